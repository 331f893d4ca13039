//! Linear-β noise schedule and the closed-form forward process.

use triplane_tensor::{Array, Rng};

use crate::error::{config, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cum: Vec<f64>,
}

impl NoiseSchedule {
    /// `steps` betas spaced linearly from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return config(format!("invalid schedule: {steps} steps, beta {beta_start}..{beta_end}"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                beta_start + f * (beta_end - beta_start)
            })
            .collect();
        let mut acc = 1.0;
        let alphas_cum = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule { betas, alphas_cum })
    }

    /// `T = 1000`, β from 1e-4 to 0.02.
    pub fn standard() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("standard schedule")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `1 ≤ t ≤ T`; `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_cum[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return config(format!("timestep {t} outside [1, {}]", self.steps()));
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t x0 + √(1-ᾱ_t) ε`, returning `(x_t, ε)`.
    pub fn forward_diffuse(&self, x0: &Array<f64>, t: usize, rng: &mut Rng) -> Result<(Array<f64>, Array<f64>)> {
        self.check_t(t)?;
        let eps = Array::randn(x0.shape().to_vec(), 1.0, rng);
        Ok((self.diffuse_with(x0, &eps, t), eps))
    }

    /// Forward process with given noise.
    pub fn diffuse_with(&self, x0: &Array<f64>, eps: &Array<f64>, t: usize) -> Array<f64> {
        let a = self.alpha_bar(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        x0.zip_map(eps, |x, e| sa * x + sn * e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule::standard();
        assert_eq!(s.steps(), 1000);
        assert!(s.betas().windows(2).all(|w| w[0] <= w[1]));
        assert!((1..1000).all(|t| s.alpha_bar(t + 1) < s.alpha_bar(t)));
        assert!(s.alpha_bar(1000) > 0.0 && s.alpha_bar(1) < 1.0);
    }

    #[test]
    fn out_of_range_t_is_rejected() {
        let s = NoiseSchedule::standard();
        let x = Array::zeros(vec![2]);
        let mut rng = triplane_tensor::rng::seeded(0);
        assert!(s.forward_diffuse(&x, 0, &mut rng).is_err());
        assert!(s.forward_diffuse(&x, 1001, &mut rng).is_err());
    }
}
