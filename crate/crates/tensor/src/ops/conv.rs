//! Direct-loop 2D and 3D convolution.

use crate::array::Array;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

/// Geometry of a 3-spatial-axis convolution. 2D convolutions use depth 1.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
}

impl ConvGeom {
    fn new(
        op: &'static str,
        x: &[usize],
        w: &[usize],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let (batch, cin, input) = (x[0], x[1], [x[2], x[3], x[4]]);
        let (cout, wcin, kernel) = (w[0], w[1], [w[2], w[3], w[4]]);
        if wcin != cin {
            return shape_err(op, format!("input has {cin} channels, weight expects {wcin}"));
        }
        let mut output = [0; 3];
        for d in 0..3 {
            if stride[d] == 0 || input[d] + 2 * pad[d] < kernel[d] {
                return shape_err(
                    op,
                    format!("kernel {kernel:?} stride {stride:?} pad {pad:?} does not fit input {input:?}"),
                );
            }
            output[d] = (input[d] + 2 * pad[d] - kernel[d]) / stride[d] + 1;
        }
        Ok(ConvGeom {
            batch,
            cin,
            cout,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn k_len(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Visits every (output position, kernel tap) pair that lands inside the
    /// input, passing (output offset, input offset, kernel offset) within one
    /// channel slice.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let o = (z * oh + y) * ow + x;
                    for a in 0..kd {
                        let iz = (z * self.stride[0] + a) as isize - self.pad[0] as isize;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for b in 0..kh {
                            let iy = (y * self.stride[1] + b) as isize - self.pad[1] as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            for c in 0..kw {
                                let ix = (x * self.stride[2] + c) as isize - self.pad[2] as isize;
                                if ix < 0 || ix >= iw as isize {
                                    continue;
                                }
                                let i = ((iz as usize) * ih + iy as usize) * iw + ix as usize;
                                f(o, i, (a * kh + b) * kw + c);
                            }
                        }
                    }
                }
            }
        }
    }

    fn taps(&self) -> Vec<(u32, u32, u32)> {
        let mut taps = Vec::new();
        self.for_each_tap(|o, i, k| taps.push((o as u32, i as u32, k as u32)));
        taps
    }
}

fn conv_forward<T: Scalar>(
    g: &ConvGeom,
    taps: &[(u32, u32, u32)],
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (il, ol, kl) = (g.in_len(), g.out_len(), g.k_len());
    let mut out = vec![T::zero(); g.batch * g.cout * ol];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let ob = &mut out[(b * g.cout + co) * ol..(b * g.cout + co + 1) * ol];
            if let Some(bias) = bias {
                ob.fill(bias[co]);
            }
            for ci in 0..g.cin {
                let xb = &x[(b * g.cin + ci) * il..(b * g.cin + ci + 1) * il];
                let wb = &w[(co * g.cin + ci) * kl..(co * g.cin + ci + 1) * kl];
                for &(o, i, k) in taps {
                    ob[o as usize] += wb[k as usize] * xb[i as usize];
                }
            }
        }
    }
    out
}

/// Returns (dx, dw, dbias).
fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    taps: &[(u32, u32, u32)],
    x: &[T],
    w: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (il, ol, kl) = (g.in_len(), g.out_len(), g.k_len());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.cout];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let gb = &dy[(b * g.cout + co) * ol..(b * g.cout + co + 1) * ol];
            db[co] += gb.iter().copied().sum();
            for ci in 0..g.cin {
                let xoff = (b * g.cin + ci) * il;
                let woff = (co * g.cin + ci) * kl;
                for &(o, i, k) in taps {
                    let gv = gb[o as usize];
                    dw[woff + k as usize] += gv * x[xoff + i as usize];
                    dx[xoff + i as usize] += gv * w[woff + k as usize];
                }
            }
        }
    }
    (dx, dw, db)
}

impl<T: Scalar> Graph<T> {
    /// 3D convolution. `x: [B, Cin, D, H, W]`, `w: [Cout, Cin, kd, kh, kw]`, `bias: [Cout]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 5 {
            return shape_err("conv3d", format!("input {sx:?}, weight {sw:?}: expected rank 5"));
        }
        let geom = ConvGeom::new("conv3d", &sx, &sw, stride, pad)?;
        let out_shape = vec![geom.batch, geom.cout, geom.output[0], geom.output[1], geom.output[2]];
        self.conv_impl("conv3d", geom, x, w, bias, out_shape)
    }

    /// 2D convolution. `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `bias: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: [usize; 2],
        pad: [usize; 2],
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return shape_err("conv2d", format!("input {sx:?}, weight {sw:?}: expected rank 4"));
        }
        let geom = ConvGeom::new(
            "conv2d",
            &[sx[0], sx[1], 1, sx[2], sx[3]],
            &[sw[0], sw[1], 1, sw[2], sw[3]],
            [1, stride[0], stride[1]],
            [0, pad[0], pad[1]],
        )?;
        let out_shape = vec![geom.batch, geom.cout, geom.output[1], geom.output[2]];
        self.conv_impl("conv2d", geom, x, w, bias, out_shape)
    }

    fn conv_impl(
        &mut self,
        op: &'static str,
        geom: ConvGeom,
        x: Var,
        w: Var,
        bias: Option<Var>,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return shape_err(op, format!("bias shape {:?}, expected [{}]", self.shape(b), geom.cout));
            }
        }
        let taps = geom.taps();
        let data = conv_forward(
            &geom,
            &taps,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Array::new(out_shape, data)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.custom(
            op,
            &parents,
            value,
            Box::new(move |g, p, _| {
                let (dx, dw, db) = conv_backward(&geom, &taps, p[0].data(), p[1].data(), g.data());
                let mut out = vec![
                    Some(Array::new(p[0].shape(), dx).expect("conv dx")),
                    Some(Array::new(p[1].shape(), dw).expect("conv dw")),
                ];
                if has_bias {
                    out.push(Some(Array::new(p[2].shape(), db).expect("conv db")));
                }
                out
            }),
        )
    }
}
