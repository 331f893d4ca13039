//! Softmax, group normalization and regression losses.

use crate::array::Array;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::ops::shape::split_axis;
use crate::scalar::Scalar;

impl<T: Scalar> Graph<T> {
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.ndim() {
            return shape_err("softmax", format!("axis {axis} out of range for {:?}", v.shape()));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut out = vec![T::zero(); v.len()];
        let src = v.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).fold(T::neg_infinity(), |m, k| m.max(src[at(k)]));
                let mut z = T::zero();
                for k in 0..n {
                    let e = (src[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] /= z;
                }
            }
        }
        let value = Array::new(v.shape(), out)?;
        self.custom(
            "softmax",
            &[x],
            value,
            Box::new(move |g, _, y| {
                let (gd, yd) = (g.data(), y.data());
                let mut dx = vec![T::zero(); gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: T = (0..n).map(|k| gd[at(k)] * yd[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                vec![Some(Array::new(g.shape(), dx).expect("softmax grad"))]
            }),
        )
    }

    /// Group normalization over `x: [B, C, ...]` with per-channel affine `gamma`, `beta: [C]`.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() < 2 {
            return shape_err("group_norm", format!("input {:?} needs [B, C, ...]", v.shape()));
        }
        let (b, c) = (v.shape()[0], v.shape()[1]);
        if groups == 0 || c % groups != 0 {
            return shape_err("group_norm", format!("{c} channels not divisible into {groups} groups"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(
                "group_norm",
                format!("affine shapes {:?}/{:?}, expected [{c}]", self.shape(gamma), self.shape(beta)),
            );
        }
        let spatial = v.len() / (b * c);
        let cpg = c / groups;
        let glen = cpg * spatial;
        let eps = T::of(eps);
        let (xd, gd, bd) = (v.data(), self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); v.len()];
        let mut inv_std = vec![T::zero(); b * groups];
        let mut out = vec![T::zero(); v.len()];
        for bg in 0..b * groups {
            let s = &xd[bg * glen..(bg + 1) * glen];
            let n = T::of(glen as f64);
            let mean = s.iter().copied().sum::<T>() / n;
            let var = s.iter().map(|&u| (u - mean) * (u - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[bg] = is;
            for (k, &u) in s.iter().enumerate() {
                let ch = (bg % groups) * cpg + k / spatial;
                let xh = (u - mean) * is;
                xhat[bg * glen + k] = xh;
                out[bg * glen + k] = gd[ch] * xh + bd[ch];
            }
        }
        let value = Array::new(v.shape(), out)?;
        self.custom(
            "group_norm",
            &[x, gamma, beta],
            value,
            Box::new(move |g, p, _| {
                let gy = g.data();
                let gam = p[1].data();
                let mut dx = vec![T::zero(); gy.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let n = T::of(glen as f64);
                for bg in 0..b * groups {
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for k in 0..glen {
                        let idx = bg * glen + k;
                        let ch = (bg % groups) * cpg + k / spatial;
                        let dxh = gy[idx] * gam[ch];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat[idx];
                        dgamma[ch] += gy[idx] * xhat[idx];
                        dbeta[ch] += gy[idx];
                    }
                    mean_dxh /= n;
                    mean_dxh_xh /= n;
                    for k in 0..glen {
                        let idx = bg * glen + k;
                        let ch = (bg % groups) * cpg + k / spatial;
                        let dxh = gy[idx] * gam[ch];
                        dx[idx] = inv_std[bg] * (dxh - mean_dxh - xhat[idx] * mean_dxh_xh);
                    }
                }
                vec![
                    Some(Array::new(p[0].shape(), dx).expect("gn dx")),
                    Some(Array::new(vec![c], dgamma).expect("gn dgamma")),
                    Some(Array::new(vec![c], dbeta).expect("gn dbeta")),
                ]
            }),
        )
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.pointwise_loss("l1_loss", pred, target, |d| d.abs(), |d| {
            if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.pointwise_loss("mse_loss", pred, target, |d| d * d, |d| d + d)
    }

    fn pointwise_loss(
        &mut self,
        op: &'static str,
        pred: Var,
        target: Var,
        f: fn(T) -> T,
        df: fn(T) -> T,
    ) -> Result<Var> {
        let (a, b) = (self.value(pred), self.value(target));
        if a.shape() != b.shape() {
            return shape_err(op, format!("prediction {:?} vs target {:?}", a.shape(), b.shape()));
        }
        let n = T::of(a.len().max(1) as f64);
        let total: T = a.data().iter().zip(b.data()).map(|(&u, &w)| f(u - w)).sum();
        self.custom(
            op,
            &[pred, target],
            Array::scalar(total / n),
            Box::new(move |g, p, _| {
                let s = g.item() / n;
                let da = p[0].zip_map(p[1], |u, w| s * df(u - w));
                let db = da.map(|v| -v);
                vec![Some(da), Some(db)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Array::zeros(vec![3]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Array::from_fn(vec![1, 4, 3], |i| (i * i) as f64));
        let gamma = g.constant(Array::ones(vec![4]));
        let beta = g.constant(Array::zeros(vec![4]));
        let y = g.group_norm(x, 2, gamma, beta, 0.0).unwrap();
        let d = g.value(y).data();
        for grp in d.chunks(6) {
            let m: f64 = grp.iter().sum::<f64>() / 6.0;
            let v: f64 = grp.iter().map(|u| (u - m) * (u - m)).sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_at_equality_are_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Array::from_fn(vec![5], |i| i as f64));
        let l1 = g.l1_loss(a, a).unwrap();
        let l2 = g.mse_loss(a, a).unwrap();
        assert_eq!(g.value(l1).item(), 0.0);
        assert_eq!(g.value(l2).item(), 0.0);
    }
}
