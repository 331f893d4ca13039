//! Matrix products.

use crate::array::Array;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

/// `c[b] = a[b] @ bmat[b]` on raw buffers, optionally transposing either side.
#[allow(clippy::too_many_arguments)]
fn bmm_raw<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &b[bi * k * n..(bi + 1) * k * n];
        let cb = &mut c[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let crow = &mut cb[i * n..(i + 1) * n];
            for p in 0..k {
                let av = if ta { ab[p * m + i] } else { ab[i * k + p] };
                if av == T::zero() {
                    continue;
                }
                if tb {
                    for (j, cv) in crow.iter_mut().enumerate() {
                        *cv += av * bb[j * k + p];
                    }
                } else {
                    for (cv, &bv) in crow.iter_mut().zip(&bb[p * n..(p + 1) * n]) {
                        *cv += av * bv;
                    }
                }
            }
        }
    }
    c
}

impl<T: Scalar> Graph<T> {
    /// `[M, K] @ [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} @ {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        self.bmm_impl("matmul", a, b, 1, m, k, n, vec![m, n])
    }

    /// Batched `[B, M, K] @ [B, K, N] -> [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err("bmm", format!("{sa:?} @ {sb:?}"));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        self.bmm_impl("bmm", a, b, bs, m, k, n, vec![bs, m, n])
    }

    #[allow(clippy::too_many_arguments)]
    fn bmm_impl(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        bs: usize,
        m: usize,
        k: usize,
        n: usize,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let data = bmm_raw(self.value(a).data(), self.value(b).data(), bs, m, k, n, false, false);
        let value = Array::new(out_shape, data)?;
        self.custom(
            op,
            &[a, b],
            value,
            Box::new(move |g, p, _| {
                // dA = dC @ B^T, dB = A^T @ dC
                let da = bmm_raw(g.data(), p[1].data(), bs, m, n, k, false, true);
                let db = bmm_raw(p[0].data(), g.data(), bs, k, m, n, true, false);
                vec![
                    Some(Array::new(p[0].shape(), da).expect("matmul grad")),
                    Some(Array::new(p[1].shape(), db).expect("matmul grad")),
                ]
            }),
        )
    }
}
