//! Deterministic DDIM sampling.

use triplane_tensor::{Array, Rng};

use super::schedule::NoiseSchedule;
use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prediction {
    /// The model predicts the added noise.
    Epsilon,
    /// The model predicts the clean sample.
    Sample,
}

pub trait Denoiser {
    fn prediction(&self) -> Prediction;
    fn predict(&self, x_t: &Array<f64>, t: usize) -> Result<Array<f64>>;
}

/// Evenly spaced decreasing timesteps `T - floor(i T / S)`, `i < S`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return config(format!("DDIM needs 1 ≤ steps ≤ {total}, got {steps}"));
    }
    Ok((0..steps).map(|i| total - i * total / steps).collect())
}

/// Runs `steps` η = 0 updates from `x_t` at `t = T` and returns the final clean estimate.
pub fn ddim_sample_from(
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    x_t: Array<f64>,
    steps: usize,
) -> Result<Array<f64>> {
    let ts = ddim_timesteps(sched.steps(), steps)?;
    let mut x = x_t;
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let a = sched.alpha_bar(t);
        let ap = sched.alpha_bar(prev);
        let pred = model.predict(&x, t)?;
        let (x0, eps) = match model.prediction() {
            Prediction::Epsilon => {
                let x0 = x.zip_map(&pred, |xv, e| (xv - (1.0 - a).sqrt() * e) / a.sqrt());
                (x0, pred)
            }
            Prediction::Sample => {
                let eps = x.zip_map(&pred, |xv, x0| (xv - a.sqrt() * x0) / (1.0 - a).sqrt());
                (pred, eps)
            }
        };
        x = if prev == 0 {
            x0
        } else {
            x0.zip_map(&eps, |x0, e| ap.sqrt() * x0 + (1.0 - ap).sqrt() * e)
        };
    }
    Ok(x)
}

/// Draws `x_T ~ N(0, 1)` of the given shape and samples.
pub fn ddim_sample(
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    shape: &[usize],
    steps: usize,
    rng: &mut Rng,
) -> Result<Array<f64>> {
    ddim_timesteps(sched.steps(), steps)?;
    let x = Array::randn(shape.to_vec(), 1.0, rng);
    ddim_sample_from(model, sched, x, steps)
}
