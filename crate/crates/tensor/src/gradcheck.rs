//! Central finite-difference gradient checking.

use crate::array::Array;
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};

/// Gradient magnitude below which errors are measured absolutely, so that
/// structurally zero gradients are not judged against finite-difference noise.
pub const ABS_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Per input: `max |analytic - numeric|` over `max(|analytic|, |numeric|, ABS_FLOOR)`.
    pub max_rel_err: Vec<f64>,
    pub analytic: Vec<Array<f64>>,
    pub numeric: Vec<Array<f64>>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst() < tol
    }
}

/// Compares backprop gradients of the scalar `f(inputs)` to central differences with step `eps`.
pub fn gradcheck<F>(f: F, inputs: &[Array<f64>], eps: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.param(a.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(TensorError::NonScalar(g.shape(out).to_vec()));
    }
    let analytic: Vec<Array<f64>> = if g.requires_grad(out) {
        g.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, a)| g.grad(v).cloned().unwrap_or_else(|| Array::zeros(a.shape())))
            .collect()
    } else {
        inputs.iter().map(|a| Array::zeros(a.shape())).collect()
    };

    let eval = |xs: &[Array<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|a| g.constant(a.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut work = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut num = Array::zeros(inputs[i].shape());
        for k in 0..inputs[i].len() {
            let x0 = inputs[i].data()[k];
            work[i].data_mut()[k] = x0 + eps;
            let fp = eval(&work)?;
            work[i].data_mut()[k] = x0 - eps;
            let fm = eval(&work)?;
            work[i].data_mut()[k] = x0;
            num.data_mut()[k] = (fp - fm) / (2.0 * eps);
        }
        numeric.push(num);
    }

    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let scale = a.max_abs().max(n.max_abs()).max(ABS_FLOOR);
            a.max_abs_diff(n) / scale
        })
        .collect();
    Ok(GradcheckReport {
        max_rel_err,
        analytic,
        numeric,
    })
}
