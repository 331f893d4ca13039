//! Structural ops: reshape, permute, slice, concat, broadcast, gather/scatter.

use std::rc::Rc;

use crate::array::{numel, strides_of, Array};
use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::ops::elementwise::{broadcast_map, broadcast_shape, reduce_to};
use crate::scalar::Scalar;

/// Splits `shape` around `axis` into (outer, axis extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Scalar>(x: &Array<T>, perm: &[usize]) -> Array<T> {
    let in_strides = strides_of(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let nd = out_shape.len();
    let total = x.len();
    let src = x.data();
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..total {
        data.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Array::new(out_shape, data).expect("permute shape")
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if numel(shape) != v.len() {
            return shape_err("reshape", format!("cannot reshape {:?} into {:?}", v.shape(), shape));
        }
        let value = v.clone().reshape(shape)?;
        self.custom(
            "reshape",
            &[x],
            value,
            Box::new(|g, p, _| vec![Some(g.clone().reshape(p[0].shape()).expect("reshape grad"))]),
        )
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let mut seen = vec![false; v.ndim()];
        if perm.len() != v.ndim() || perm.iter().any(|&p| p >= v.ndim() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("invalid permutation {perm:?} for shape {:?}", v.shape()));
        }
        let value = permute_data(v, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.custom(
            "permute",
            &[x],
            value,
            Box::new(move |g, _, _| vec![Some(permute_data(g, &inverse))]),
        )
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.ndim() || start >= end || end > v.shape()[axis] {
            return shape_err(
                "slice",
                format!("range {start}..{end} on axis {axis} of shape {:?}", v.shape()),
            );
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let w = end - start;
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * n * inner;
            data.extend_from_slice(&v.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = w;
        let value = Array::new(shape, data)?;
        self.custom(
            "slice",
            &[x],
            value,
            Box::new(move |g, p, _| {
                let mut out = Array::zeros(p[0].shape());
                let od = out.data_mut();
                for o in 0..outer {
                    let base = o * n * inner;
                    od[base + start * inner..base + end * inner]
                        .copy_from_slice(&g.data()[o * w * inner..(o + 1) * w * inner]);
                }
                vec![Some(out)]
            }),
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return invalid("concat", "no inputs");
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return shape_err("concat", format!("axis {axis} out of range for {first:?}"));
        }
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return shape_err("concat", format!("{s:?} incompatible with {first:?} on axis {axis}"));
            }
            widths.push(s[axis]);
        }
        let total_w: usize = widths.iter().sum();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total_w * inner);
        for o in 0..outer {
            for (&x, &w) in xs.iter().zip(&widths) {
                let d = self.value(x).data();
                data.extend_from_slice(&d[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total_w;
        let value = Array::new(shape, data)?;
        self.custom(
            "concat",
            xs,
            value,
            Box::new(move |g, p, _| {
                let mut outs: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(outer * w * inner)).collect();
                let gd = g.data();
                let mut off = 0;
                for _ in 0..outer {
                    for (buf, &w) in outs.iter_mut().zip(&widths) {
                        buf.extend_from_slice(&gd[off..off + w * inner]);
                        off += w * inner;
                    }
                }
                outs.into_iter()
                    .zip(p)
                    .map(|(buf, pv)| Some(Array::new(pv.shape(), buf).expect("concat grad")))
                    .collect()
            }),
        )
    }

    /// Stacks equally shaped arrays along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut rows = Vec::with_capacity(xs.len());
        for &x in xs {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(x));
            rows.push(self.reshape(x, &s)?);
        }
        self.concat(&rows, 0)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let out = broadcast_shape("broadcast_to", v.shape(), shape)?;
        if out != shape {
            return shape_err("broadcast_to", format!("{:?} does not broadcast to {shape:?}", v.shape()));
        }
        let map = broadcast_map(v.shape(), shape);
        let data = match &map {
            None => v.data().to_vec(),
            Some(m) => m.iter().map(|&i| v.data()[i]).collect(),
        };
        let value = Array::new(shape, data)?;
        self.custom(
            "broadcast_to",
            &[x],
            value,
            Box::new(move |g, p, _| vec![Some(reduce_to(g, map.as_deref(), p[0].shape()))]),
        )
    }

    /// Selects rows (axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() == 0 {
            return shape_err("gather_rows", "input must have at least one axis");
        }
        let n = v.shape()[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return shape_err("gather_rows", format!("index {bad} out of range for {} rows", n));
        }
        let w = v.len() / n.max(1);
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx.iter() {
            data.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let value = Array::new(shape, data)?;
        self.custom(
            "gather_rows",
            &[x],
            value,
            Box::new(move |g, p, _| {
                let mut out = Array::zeros(p[0].shape());
                scatter_rows_into(out.data_mut(), g.data(), &idx, w);
                vec![Some(out)]
            }),
        )
    }

    /// `out[idx[i]] += x[i]` for an `n`-row output.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Rc<Vec<usize>>, n: usize) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() == 0 || v.shape()[0] != idx.len() {
            return shape_err(
                "scatter_add_rows",
                format!("{} indices for input of shape {:?}", idx.len(), v.shape()),
            );
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return shape_err("scatter_add_rows", format!("index {bad} out of range for {n} rows"));
        }
        let w = if idx.is_empty() { numel(&v.shape()[1..]) } else { v.len() / idx.len() };
        let mut shape = v.shape().to_vec();
        shape[0] = n;
        let mut value = Array::zeros(shape);
        scatter_rows_into(value.data_mut(), v.data(), &idx, w);
        self.custom(
            "scatter_add_rows",
            &[x],
            value,
            Box::new(move |g, p, _| {
                let mut data = Vec::with_capacity(idx.len() * w);
                for &i in idx.iter() {
                    data.extend_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![Some(Array::new(p[0].shape(), data).expect("scatter grad"))]
            }),
        )
    }

    /// Per-segment elementwise max of rows `[N, C] -> [nseg, C]`; empty segments are zero.
    pub fn segment_max(&mut self, x: Var, seg: Rc<Vec<usize>>, nseg: usize) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() != 2 || v.shape()[0] != seg.len() {
            return shape_err("segment_max", format!("{} segment ids for shape {:?}", seg.len(), v.shape()));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= nseg) {
            return shape_err("segment_max", format!("segment {bad} out of range for {nseg}"));
        }
        let c = v.shape()[1];
        let mut arg: Vec<Option<usize>> = vec![None; nseg * c];
        for (i, &s) in seg.iter().enumerate() {
            for k in 0..c {
                let slot = &mut arg[s * c + k];
                let xv = v.data()[i * c + k];
                if slot.is_none_or(|j| xv > v.data()[j * c + k]) {
                    *slot = Some(i);
                }
            }
        }
        let data = arg
            .iter()
            .enumerate()
            .map(|(o, a)| a.map_or(T::zero(), |i| v.data()[i * c + o % c]))
            .collect();
        let value = Array::new(vec![nseg, c], data)?;
        self.custom(
            "segment_max",
            &[x],
            value,
            Box::new(move |g, p, _| {
                let mut out = Array::zeros(p[0].shape());
                let od = out.data_mut();
                for (o, a) in arg.iter().enumerate() {
                    if let Some(i) = a {
                        od[i * c + o % c] += g.data()[o];
                    }
                }
                vec![Some(out)]
            }),
        )
    }

    /// Nearest-neighbour upsampling of the last two axes by an integer factor.
    pub fn upsample_nearest2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() < 2 || factor == 0 {
            return shape_err("upsample_nearest2d", format!("shape {:?}, factor {factor}", v.shape()));
        }
        let nd = v.ndim();
        let (h, w) = (v.shape()[nd - 2], v.shape()[nd - 1]);
        let planes = v.len() / (h * w);
        let (oh, ow) = (h * factor, w * factor);
        let mut data = Vec::with_capacity(planes * oh * ow);
        for pl in 0..planes {
            let src = &v.data()[pl * h * w..(pl + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    data.push(src[(y / factor) * w + xx / factor]);
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[nd - 2] = oh;
        shape[nd - 1] = ow;
        let value = Array::new(shape, data)?;
        self.custom(
            "upsample_nearest2d",
            &[x],
            value,
            Box::new(move |g, p, _| {
                let mut out = Array::zeros(p[0].shape());
                let od = out.data_mut();
                for pl in 0..planes {
                    for y in 0..oh {
                        for xx in 0..ow {
                            od[pl * h * w + (y / factor) * w + xx / factor] += g.data()[pl * oh * ow + y * ow + xx];
                        }
                    }
                }
                vec![Some(out)]
            }),
        )
    }
}

fn scatter_rows_into<T: Scalar>(out: &mut [T], src: &[T], idx: &[usize], w: usize) {
    for (r, &i) in idx.iter().enumerate() {
        let dst = &mut out[i * w..(i + 1) * w];
        for (d, &s) in dst.iter_mut().zip(&src[r * w..(r + 1) * w]) {
            *d += s;
        }
    }
}
