//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::f64::consts::PI;

use triplane_tensor::{Array, Scalar};

use crate::error::{CoreError, Result};
use crate::nn::Params;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CosineSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    /// Learning rate at `step` (0-based), `start` at 0 and `end` from `total_steps` on.
    pub fn at(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.start;
        }
        let p = (step as f64 / (self.total_steps - 1) as f64).min(1.0);
        self.end + 0.5 * (self.start - self.end) * (1.0 + (PI * p).cos())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Params<T>,
    v: Params<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Params::new(),
            v: Params::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient entry.
    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(CoreError::Dimension(
                    "AdamW::step",
                    format!("{name}: param {:?} grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !self.m.contains(name) {
                self.m.insert(name, Array::zeros(g.shape()));
                self.v.insert(name, Array::zeros(g.shape()));
            }
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gf = gv.as_f64();
                let mf = b1 * mv.as_f64() + (1.0 - b1) * gf;
                let vf = b2 * vv.as_f64() + (1.0 - b2) * gf * gf;
                *mv = T::of(mf);
                *vv = T::of(vf);
                let update = (mf / c1) / ((vf / c2).sqrt() + self.eps);
                let x = pv.as_f64();
                *pv = T::of(x - lr * (update + self.weight_decay * x));
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Params<T>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
