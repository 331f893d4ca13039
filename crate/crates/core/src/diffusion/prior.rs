//! Shape-embedding prior: an MLP-ResBlock stack predicting the clean embedding.

use triplane_tensor::{Array, Graph, Rng, Scalar, Var};

use super::ddim::{Denoiser, Prediction};
use crate::error::{config, CoreError, Result};
use crate::nn::{sinusoidal_embedding, Bound, Linear, Params};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PriorConfig {
    /// Embedding dimension `D`.
    pub dim: usize,
    pub width: usize,
    /// Number of MLP blocks; the first and second halves are joined by long skips.
    pub depth: usize,
    pub shape_scale: f64,
    pub image_scale: f64,
}

impl PriorConfig {
    pub fn desk() -> Self {
        PriorConfig {
            dim: 64,
            width: 128,
            depth: 4,
            shape_scale: 0.25,
            image_scale: 0.85,
        }
    }

    pub fn paper() -> Self {
        PriorConfig {
            dim: 1280,
            width: 2048,
            depth: 6,
            shape_scale: 0.25,
            image_scale: 0.85,
        }
    }
}

/// Sinusoidal timestep features for a batch, `[B, dim]`.
pub fn timestep_features<T: Scalar>(ts: &[usize], dim: usize) -> Array<T> {
    let data = ts
        .iter()
        .flat_map(|&t| sinusoidal_embedding(t as f64, dim))
        .map(T::of)
        .collect();
    Array::new(vec![ts.len(), dim], data).expect("timestep features")
}

/// Two-layer MLP on sinusoidal features.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    pub dim: usize,
    l0: Linear,
    l1: Linear,
}

impl TimeEmbedding {
    pub fn new(name: &str, dim: usize) -> Self {
        TimeEmbedding {
            dim,
            l0: Linear::new(format!("{name}.l0"), dim, dim),
            l1: Linear::new(format!("{name}.l1"), dim, dim),
        }
    }

    pub fn init<T: Scalar>(&self, p: &mut Params<T>, rng: &mut Rng) {
        self.l0.init(p, rng);
        self.l1.init(p, rng);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, ts: &[usize]) -> Result<Var> {
        let f = g.constant(timestep_features(ts, self.dim));
        let h = self.l0.forward(g, b, f)?;
        let h = g.silu(h)?;
        self.l1.forward(g, b, h)
    }
}

#[derive(Debug, Clone)]
struct PriorBlock {
    cond: Linear,
    time: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
pub struct PriorModel {
    pub cfg: PriorConfig,
    time: TimeEmbedding,
    input: Linear,
    blocks: Vec<PriorBlock>,
    output: Linear,
}

impl PriorModel {
    pub fn new(cfg: PriorConfig) -> Result<Self> {
        if cfg.dim == 0 || cfg.width == 0 || cfg.depth == 0 {
            return config("prior dimensions must be positive");
        }
        let (d, w) = (cfg.dim, cfg.width);
        Ok(PriorModel {
            time: TimeEmbedding::new("prior.time", w),
            input: Linear::new("prior.in", d, w),
            blocks: (0..cfg.depth)
                .map(|i| PriorBlock {
                    cond: Linear::new(format!("prior.b{i}.cond"), w + d, w),
                    time: Linear::new(format!("prior.b{i}.time"), w, w),
                    out: Linear::new(format!("prior.b{i}.out"), w, w),
                })
                .collect(),
            output: Linear::new("prior.out", w, d),
            cfg,
        })
    }

    /// Random weights with a zero output layer, so the initial model returns its input.
    pub fn init<T: Scalar>(&self, rng: &mut Rng) -> Params<T> {
        let mut p = Params::new();
        self.time.init(&mut p, rng);
        self.input.init(&mut p, rng);
        for b in &self.blocks {
            b.cond.init(&mut p, rng);
            b.time.init(&mut p, rng);
            b.out.init(&mut p, rng);
        }
        self.output.init_zero(&mut p);
        p
    }

    /// `x_t, e_i: [B, D]` (already scaled) → predicted clean `[B, D]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x_t: Var,
        ts: &[usize],
        e_i: Var,
    ) -> Result<Var> {
        let d = self.cfg.dim;
        let (xs, es) = (g.shape(x_t).to_vec(), g.shape(e_i).to_vec());
        if xs.len() != 2 || xs[1] != d || es != xs || ts.len() != xs[0] {
            return Err(CoreError::Dimension(
                "prior_forward",
                format!("x_t {xs:?}, e_i {es:?}, {} timesteps, D = {d}", ts.len()),
            ));
        }
        let temb = self.time.forward(g, b, ts)?;
        let mut h = self.input.forward(g, b, x_t)?;
        let half = self.cfg.depth / 2;
        let mut stack = Vec::with_capacity(half);
        for (i, blk) in self.blocks.iter().enumerate() {
            if i >= self.cfg.depth - half {
                let mirror = stack.pop().expect("mirrored block output");
                h = g.add(h, mirror)?;
            }
            let c = g.concat(&[h, e_i], 1)?;
            let y = blk.cond.forward(g, b, c)?;
            let t = blk.time.forward(g, b, temb)?;
            let y = g.add(y, t)?;
            let y = g.silu(y)?;
            let y = blk.out.forward(g, b, y)?;
            h = g.add(h, y)?;
            if i < half {
                stack.push(h);
            }
        }
        let out = self.output.forward(g, b, h)?;
        Ok(g.add(x_t, out)?)
    }
}

/// Prior conditioned on one scaled image embedding, for DDIM sampling in scaled space.
pub struct PriorDenoiser<'a> {
    pub model: &'a PriorModel,
    pub params: &'a Params<f64>,
    /// Scaled image embedding `[1, D]`.
    pub image: Array<f64>,
}

impl Denoiser for PriorDenoiser<'_> {
    fn prediction(&self) -> Prediction {
        Prediction::Sample
    }

    fn predict(&self, x_t: &Array<f64>, t: usize) -> Result<Array<f64>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let e = g.constant(self.image.clone());
        let y = self.model.forward(&mut g, &b, x, &[t], e)?;
        Ok(g.value(y).clone())
    }
}
