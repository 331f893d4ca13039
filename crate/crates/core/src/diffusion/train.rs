//! Training objectives and single optimizer steps for the prior and the triplane UNet.

use rand::Rng as _;
use triplane_tensor::{Array, Graph, Rng, Scalar, Var};

use super::prior::PriorModel;
use super::schedule::NoiseSchedule;
use super::unet::UNet;
use crate::error::{config, CoreError, Result};
use crate::nn::{Bound, Params};
use crate::optim::{clip_grad_norm, AdamW};

/// Scaled `(e_s, e_i)` pairs, each `[B, D]`.
#[derive(Debug, Clone)]
pub struct PriorBatch {
    pub shape: Array<f64>,
    pub image: Array<f64>,
}

/// Triplane latents `[B * 3, c′, r′, r′]` with their condition embeddings `[B, D]`.
#[derive(Debug, Clone)]
pub struct TriplaneBatch {
    pub latents: Array<f64>,
    pub shape: Array<f64>,
    pub image: Array<f64>,
}

impl TriplaneBatch {
    pub fn len(&self) -> usize {
        self.shape.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-sample condition dropout probabilities; the three events are mutually exclusive.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DropoutRates {
    /// Only the image embedding is replaced by its null.
    pub image_only: f64,
    /// Only the shape embedding is replaced by its null.
    pub shape_only: f64,
    /// Both embeddings are replaced.
    pub both: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        DropoutRates {
            image_only: 0.05,
            shape_only: 0.05,
            both: 0.05,
        }
    }
}

impl DropoutRates {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.image_only, self.shape_only, self.both];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || ps.iter().sum::<f64>() > 1.0 + 1e-12 {
            return config(format!("invalid dropout rates {self:?}"));
        }
        Ok(())
    }

    /// `(keep_shape, keep_image)` for one sample.
    pub fn draw(&self, rng: &mut Rng) -> (bool, bool) {
        let u: f64 = rng.random();
        if u < self.image_only {
            (true, false)
        } else if u < self.image_only + self.shape_only {
            (false, true)
        } else if u < self.image_only + self.shape_only + self.both {
            (false, false)
        } else {
            (true, true)
        }
    }
}

/// Uniform timesteps in `[1, T]` and unit Gaussian noise of `shape`.
pub fn draw_noise(sched: &NoiseSchedule, batch: usize, shape: &[usize], rng: &mut Rng) -> (Vec<usize>, Array<f64>) {
    let ts = (0..batch).map(|_| rng.random_range(1..=sched.steps())).collect();
    (ts, Array::randn(shape.to_vec(), 1.0, rng))
}

/// Diffuses each of the `ts.len()` equal row blocks of `x0` with its own timestep.
pub fn diffuse_rows(sched: &NoiseSchedule, x0: &Array<f64>, eps: &Array<f64>, ts: &[usize]) -> Result<Array<f64>> {
    let n = x0.data().len();
    if ts.is_empty() || !n.is_multiple_of(ts.len()) || eps.shape() != x0.shape() {
        return Err(CoreError::Dimension(
            "diffuse_rows",
            format!("x0 {:?}, eps {:?}, {} timesteps", x0.shape(), eps.shape(), ts.len()),
        ));
    }
    let block = n / ts.len();
    let mut out = Vec::with_capacity(n);
    for (i, &t) in ts.iter().enumerate() {
        sched.check_t(t)?;
        let a = sched.alpha_bar(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let r = i * block..(i + 1) * block;
        out.extend(x0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(x, e)| sa * x + sn * e));
    }
    Ok(Array::new(x0.shape().to_vec(), out)?)
}

/// Mean `|f(x_t, t, e_i) − e_s|` over all entries.
pub fn prior_loss<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    model: &PriorModel,
    x_t: Var,
    ts: &[usize],
    e_i: Var,
    target: Var,
) -> Result<Var> {
    let pred = model.forward(g, b, x_t, ts, e_i)?;
    Ok(g.l1_loss(pred, target)?)
}

/// Mean `|ε̂(z_t, t, e_s, e_p) − ε|` over all entries.
#[allow(clippy::too_many_arguments)]
pub fn triplane_loss<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    model: &UNet,
    z_t: Var,
    ts: &[usize],
    e_s: Var,
    e_p: Var,
    keep_shape: &[bool],
    keep_image: &[bool],
    eps: Var,
) -> Result<Var> {
    let pred = model.forward(g, b, z_t, ts, e_s, e_p, keep_shape, keep_image)?;
    Ok(g.l1_loss(pred, eps)?)
}

/// Learning rate and optional global gradient-norm clip for one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub lr: f64,
    pub clip_norm: Option<f64>,
}

fn apply_update(
    g: &mut Graph<f64>,
    b: &Bound,
    loss: Var,
    params: &mut Params<f64>,
    opt: &mut AdamW<f64>,
    step: StepOptions,
) -> Result<f64> {
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(CoreError::NonFinite(format!("training loss {value}")));
    }
    g.backward(loss)?;
    let mut grads = b.grads(g);
    if let Some(max) = step.clip_norm {
        clip_grad_norm(&mut grads, max);
    }
    opt.step(params, &grads, step.lr)?;
    Ok(value)
}

/// One optimizer step on the x0-prediction prior objective; returns the pre-update loss.
pub fn train_step_prior(
    model: &PriorModel,
    params: &mut Params<f64>,
    opt: &mut AdamW<f64>,
    sched: &NoiseSchedule,
    batch: &PriorBatch,
    step: StepOptions,
    rng: &mut Rng,
) -> Result<f64> {
    let n = batch.shape.shape().first().copied().unwrap_or(0);
    if n == 0 || batch.shape.data().is_empty() {
        return Err(CoreError::Empty("prior training batch"));
    }
    let (ts, eps) = draw_noise(sched, n, batch.shape.shape(), rng);
    let x_t = diffuse_rows(sched, &batch.shape, &eps, &ts)?;
    let mut g = Graph::new();
    let b = params.bind(&mut g, true);
    let x = g.constant(x_t);
    let e_i = g.constant(batch.image.clone());
    let target = g.constant(batch.shape.clone());
    let loss = prior_loss(&mut g, &b, model, x, &ts, e_i, target)?;
    apply_update(&mut g, &b, loss, params, opt, step)
}

/// One optimizer step on the ε-prediction triplane objective with condition dropout.
#[allow(clippy::too_many_arguments)]
pub fn train_step_triplane(
    model: &UNet,
    params: &mut Params<f64>,
    opt: &mut AdamW<f64>,
    sched: &NoiseSchedule,
    batch: &TriplaneBatch,
    dropout: &DropoutRates,
    step: StepOptions,
    rng: &mut Rng,
) -> Result<f64> {
    dropout.validate()?;
    let n = batch.len();
    if n == 0 || batch.latents.data().is_empty() {
        return Err(CoreError::Empty("triplane training batch"));
    }
    let (keep_shape, keep_image): (Vec<bool>, Vec<bool>) = (0..n).map(|_| dropout.draw(rng)).unzip();
    let (ts, eps) = draw_noise(sched, n, batch.latents.shape(), rng);
    let z_t = diffuse_rows(sched, &batch.latents, &eps, &ts)?;
    let mut g = Graph::new();
    let b = params.bind(&mut g, true);
    let z = g.constant(z_t);
    let es = g.constant(batch.shape.clone());
    let ep = g.constant(batch.image.clone());
    let target = g.constant(eps);
    let loss = triplane_loss(&mut g, &b, model, z, &ts, es, ep, &keep_shape, &keep_image, target)?;
    apply_update(&mut g, &b, loss, params, opt, step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use triplane_tensor::rng::seeded;

    #[test]
    fn dropout_frequencies_match_rates() {
        let rates = DropoutRates::default();
        let mut rng = seeded(3);
        let n = 40_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let idx = match rates.draw(&mut rng) {
                (true, false) => 0,
                (false, true) => 1,
                (false, false) => 2,
                (true, true) => 3,
            };
            counts[idx] += 1;
        }
        let sd = (0.05 * 0.95 / n as f64).sqrt();
        for c in &counts[..3] {
            assert!((*c as f64 / n as f64 - 0.05).abs() < 4.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn full_dropout_always_drops_both() {
        let rates = DropoutRates {
            image_only: 0.0,
            shape_only: 0.0,
            both: 1.0,
        };
        let mut rng = seeded(4);
        assert!((0..1000).all(|_| rates.draw(&mut rng) == (false, false)));
    }

    #[test]
    fn rates_above_one_are_rejected() {
        let rates = DropoutRates {
            image_only: 0.5,
            shape_only: 0.5,
            both: 0.5,
        };
        assert!(rates.validate().is_err());
    }

    #[test]
    fn row_diffusion_uses_each_timestep() {
        let sched = NoiseSchedule::standard();
        let x0 = Array::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let eps = Array::zeros(vec![2, 2]);
        let x = diffuse_rows(&sched, &x0, &eps, &[1, 1000]).unwrap();
        assert!((x.data()[0] - sched.alpha_bar(1).sqrt()).abs() < 1e-15);
        assert!((x.data()[3] - sched.alpha_bar(1000).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let model = PriorModel::new(super::super::prior::PriorConfig {
            dim: 2,
            width: 4,
            depth: 2,
            shape_scale: 0.25,
            image_scale: 0.85,
        })
        .unwrap();
        let mut rng = seeded(5);
        let mut params = model.init::<f64>(&mut rng);
        let mut opt = AdamW::new(0.0);
        let batch = PriorBatch {
            shape: Array::zeros(vec![0, 2]),
            image: Array::zeros(vec![0, 2]),
        };
        let step = StepOptions { lr: 1e-3, clip_norm: None };
        let r = train_step_prior(&model, &mut params, &mut opt, &NoiseSchedule::standard(), &batch, step, &mut rng);
        assert!(matches!(r, Err(CoreError::Empty(_))));
    }
}
