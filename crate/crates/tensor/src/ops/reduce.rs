//! Sum and mean reductions.

use crate::array::Array;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::ops::shape::split_axis;
use crate::scalar::Scalar;

impl<T: Scalar> Graph<T> {
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let value = Array::scalar(self.value(x).sum());
        self.custom(
            "sum_all",
            &[x],
            value,
            Box::new(|g, p, _| vec![Some(Array::full(p[0].shape(), g.item()))]),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = T::of(self.value(x).len() as f64);
        let s = self.sum_all(x)?;
        self.scale(s, T::one() / n)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.ndim() {
            return shape_err("sum_axis", format!("axis {axis} out of range for {:?}", v.shape()));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &v.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let value = Array::new(shape, data)?;
        self.custom(
            "sum_axis",
            &[x],
            value,
            Box::new(move |g, p, _| {
                let mut out = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        out.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Array::new(p[0].shape(), out).expect("sum_axis grad"))]
            }),
        )
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis, keepdim)?;
        self.scale(s, T::one() / T::of(n as f64))
    }
}
