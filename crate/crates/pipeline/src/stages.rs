//! The three training stages, their logs and checkpoints.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::Serialize;
use triplane_core::autoencoder::Autoencoder;
use triplane_core::diffusion::{
    train_step_prior, train_step_triplane, PriorBatch, PriorModel, StepOptions, TriplaneBatch, UNet,
};
use triplane_core::nn::Params;
use triplane_core::optim::{clip_grad_norm, AdamW};
use triplane_core::render::{render_vars, rendering_loss, Camera, LossWeights, RasterOptions, RenderTarget};
use triplane_tensor::rng::{fork, seeded};
use triplane_tensor::{Array, Checkpoint, Graph};

use crate::config::{RunConfig, TrainConfig};
use crate::error::{require, PipelineError, Result};
use crate::synth::Dataset;

pub const AE_CHECKPOINT: &str = "ae.ckpt";
pub const PRIOR_CHECKPOINT: &str = "prior.ckpt";
pub const TRIPLANE_CHECKPOINT: &str = "tri.ckpt";
const PARAM_PREFIX: &str = "param/";
const NORM_MEAN: &str = "latent_norm.mean";
const NORM_STD: &str = "latent_norm.std";

/// One stage-1 log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AeRecord {
    pub step: usize,
    pub lr: f64,
    /// Weighted rendering loss `λ₁ L_rgb + λ₂ L_mask + λ₃ L_depth`.
    pub render: f64,
    pub rgb: f64,
    pub mask: f64,
    pub depth: f64,
    pub kl: f64,
    pub total: f64,
}

/// One stage-2 or stage-3 log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiffusionRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Directory receiving a stage's checkpoint and CSV log.
#[derive(Debug, Clone)]
pub struct Output {
    pub dir: PathBuf,
}

impl Output {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PipelineError::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| PipelineError::Format(e.to_string()))?;
    }
    w.flush().map_err(PipelineError::io(format!("writing {}", path.display())))
}

fn config_meta(ck: &mut Checkpoint, cfg: &RunConfig, stage: &str, step: usize) -> Result<()> {
    ck.meta.insert("config".into(), cfg.to_toml()?);
    ck.meta.insert("stage".into(), stage.into());
    ck.meta.insert("step".into(), step.to_string());
    Ok(())
}

fn params_checkpoint(params: &Params<f64>, cfg: &RunConfig, stage: &str, step: usize) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    params.write_to(&mut ck, PARAM_PREFIX);
    config_meta(&mut ck, cfg, stage, step)?;
    Ok(ck)
}

fn should_save(t: &TrainConfig, step: usize) -> bool {
    (step + 1).is_multiple_of(t.checkpoint_every) || step + 1 == t.steps
}

fn non_finite(what: &str, step: usize, v: f64) -> PipelineError {
    PipelineError::Numerical(format!("{what} is {v} at step {step}"))
}

/// Stage-1 result: trained parameters and one record per step.
#[derive(Debug, Clone)]
pub struct AeRun {
    pub params: Params<f64>,
    pub log: Vec<AeRecord>,
}

fn views_of(data: &Dataset, i: usize) -> Vec<(Camera, RenderTarget)> {
    data.cameras.iter().cloned().zip(data.targets[i].iter().cloned()).collect()
}

/// Trains the autoencoder on the rendering loss, cycling through shapes one per step.
pub fn train_autoencoder(cfg: &RunConfig, data: &Dataset, out: Option<&Output>) -> Result<AeRun> {
    let ae = Autoencoder::new(cfg.autoencoder.clone())?;
    let mut rng = seeded(cfg.seed);
    let mut params = ae.init::<f64>(&mut rng);
    let mut opt = AdamW::new(cfg.stage1.weight_decay);
    let lr = cfg.stage1.schedule();
    let all_views: Vec<Vec<(Camera, RenderTarget)>> = (0..data.len()).map(|i| views_of(data, i)).collect();
    let per_step = cfg.views.per_step.min(data.cameras.len());
    let mut log = Vec::with_capacity(cfg.stage1.steps);
    for step in 0..cfg.stage1.steps {
        let i = step % data.len();
        let views = &all_views[i];
        let start = if per_step < views.len() { rng.random_range(0..views.len()) } else { 0 };
        let chosen: Vec<(Camera, RenderTarget)> =
            (0..per_step).map(|k| views[(start + k) % views.len()].clone()).collect();
        let mut g = Graph::new();
        let b = params.bind(&mut g, true);
        let terms = ae.stage1_loss(&mut g, &b, &data.clouds[i], &chosen, &cfg.loss, &mut rng)?;
        let total = g.value(terms.total).item();
        if !total.is_finite() {
            return Err(non_finite("stage-1 loss", step, total));
        }
        if !terms.kl.is_finite() {
            return Err(non_finite("KL term", step, terms.kl));
        }
        let l = &cfg.loss;
        let rate = lr.at(step);
        log.push(AeRecord {
            step,
            lr: rate,
            render: l.rgb * terms.rgb + l.mask * terms.mask + l.depth * terms.depth,
            rgb: terms.rgb,
            mask: terms.mask,
            depth: terms.depth,
            kl: terms.kl,
            total,
        });
        g.backward(terms.total)?;
        let mut grads = b.grads(&g);
        if let Some(c) = cfg.stage1.clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        opt.step(&mut params, &grads, rate)?;
        if let Some(o) = out {
            if should_save(&cfg.stage1, step) {
                params_checkpoint(&params, cfg, "autoencoder", step + 1)?.save(o.path(AE_CHECKPOINT))?;
                write_csv(&o.path("ae_log.csv"), &log)?;
            }
        }
    }
    Ok(AeRun { params, log })
}

/// Mean unweighted image losses of the deterministic `μ` reconstruction over every shape and view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReconstructionLoss {
    pub rgb: f64,
    pub mask: f64,
    pub depth: f64,
}

pub fn evaluate_autoencoder(ae: &Autoencoder, params: &Params<f64>, data: &Dataset) -> Result<ReconstructionLoss> {
    let unit = LossWeights {
        rgb: 1.0,
        mask: 1.0,
        depth: 1.0,
        kl: 0.0,
    };
    let (mut rgb, mut mask, mut depth, mut n) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..data.len() {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let dist = ae.encode(&mut g, &b, &data.clouds[i])?;
        let dec = ae.decode(&mut g, &b, dist.mu)?;
        for (cam, gt) in data.cameras.iter().zip(&data.targets[i]) {
            let pred = render_vars(&mut g, dec.mesh.vertices, &dec.mesh.faces, dec.colors, cam, RasterOptions::default())?;
            let l = rendering_loss(&mut g, &pred, gt, None, &unit)?;
            rgb += g.value(l.rgb).item();
            mask += g.value(l.mask).item();
            depth += g.value(l.depth).item();
            n += 1.0;
        }
    }
    Ok(ReconstructionLoss {
        rgb: rgb / n,
        mask: mask / n,
        depth: depth / n,
    })
}

/// Stage-2 or stage-3 result.
#[derive(Debug, Clone)]
pub struct DiffusionRun {
    pub params: Params<f64>,
    pub log: Vec<DiffusionRecord>,
}

/// Trains the shape-embedding prior on every `(shape, view)` pair of the dataset.
pub fn train_prior(cfg: &RunConfig, data: &Dataset, out: Option<&Output>) -> Result<DiffusionRun> {
    if data.embed_dim() != cfg.prior.dim {
        return Err(PipelineError::Usage(format!(
            "dataset embeddings have width {} but the prior expects {}",
            data.embed_dim(),
            cfg.prior.dim
        )));
    }
    let model = PriorModel::new(cfg.prior.clone())?;
    let sched = cfg.diffusion.schedule()?;
    let mut rng = fork(cfg.seed, 2);
    let mut params = model.init::<f64>(&mut rng);
    let mut opt = AdamW::new(cfg.stage2.weight_decay);
    let lr = cfg.stage2.schedule();
    let views = data.cameras.len();
    let pairs: Vec<(usize, usize)> = (0..data.len()).flat_map(|i| (0..views).map(move |v| (i, v))).collect();
    let d = cfg.prior.dim;
    let mut log = Vec::with_capacity(cfg.stage2.steps);
    for step in 0..cfg.stage2.steps {
        let chosen: Vec<(usize, usize)> = if cfg.stage2.batch >= pairs.len() {
            pairs.clone()
        } else {
            (0..cfg.stage2.batch).map(|_| pairs[rng.random_range(0..pairs.len())]).collect()
        };
        let (mut shape, mut image) = (Vec::with_capacity(chosen.len() * d), Vec::with_capacity(chosen.len() * d));
        for &(i, v) in &chosen {
            shape.extend(data.shape_embedding(i).iter().map(|x| x * cfg.prior.shape_scale));
            image.extend(data.image_embedding(i, v).iter().map(|x| x * cfg.prior.image_scale));
        }
        let batch = PriorBatch {
            shape: Array::new(vec![chosen.len(), d], shape)?,
            image: Array::new(vec![chosen.len(), d], image)?,
        };
        let rate = lr.at(step);
        let opts = StepOptions {
            lr: rate,
            clip_norm: cfg.stage2.clip_norm,
        };
        let loss = train_step_prior(&model, &mut params, &mut opt, &sched, &batch, opts, &mut rng)?;
        log.push(DiffusionRecord { step, lr: rate, loss });
        if let Some(o) = out {
            if should_save(&cfg.stage2, step) {
                params_checkpoint(&params, cfg, "prior", step + 1)?.save(o.path(PRIOR_CHECKPOINT))?;
                write_csv(&o.path("prior_log.csv"), &log)?;
            }
        }
    }
    Ok(DiffusionRun { params, log })
}

/// Per-channel affine map between encoder latents and the unit-scale diffusion space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentNorm {
    /// Statistics over every `[3, c′, r′, r′]` latent, plane and texel.
    pub fn fit(latents: &[Array<f64>]) -> Result<Self> {
        let first = latents.first().ok_or_else(|| PipelineError::Usage("no latents to standardize".into()))?;
        let (c, hw) = (first.shape()[1], first.shape()[2] * first.shape()[3]);
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0.0;
        for z in latents {
            for plane in z.data().chunks_exact(c * hw) {
                for (ch, vals) in plane.chunks_exact(hw).enumerate() {
                    sum[ch] += vals.iter().sum::<f64>();
                    sq[ch] += vals.iter().map(|v| v * v).sum::<f64>();
                }
                count += hw as f64;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(LatentNorm { mean, std })
    }

    fn apply(&self, z: &Array<f64>, f: impl Fn(f64, f64, f64) -> f64) -> Array<f64> {
        let c = self.mean.len();
        let hw = z.len() / (3 * c);
        Array::from_fn(z.shape().to_vec(), |k| {
            let ch = (k / hw) % c;
            f(z.data()[k], self.mean[ch], self.std[ch])
        })
    }

    pub fn standardize(&self, z: &Array<f64>) -> Array<f64> {
        self.apply(z, |v, m, s| (v - m) / s)
    }

    pub fn restore(&self, z: &Array<f64>) -> Array<f64> {
        self.apply(z, |v, m, s| v * s + m)
    }

    fn write(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.insert(NORM_MEAN, &Array::new(vec![self.mean.len()], self.mean.clone())?);
        ck.insert(NORM_STD, &Array::new(vec![self.std.len()], self.std.clone())?);
        Ok(())
    }

    fn read(ck: &Checkpoint) -> Result<Self> {
        Ok(LatentNorm {
            mean: ck.get::<f64>(NORM_MEAN)?.data().to_vec(),
            std: ck.get::<f64>(NORM_STD)?.data().to_vec(),
        })
    }
}

/// Encoder means of every dataset shape, each `[3, c′, r′, r′]`.
pub fn encode_dataset(ae: &Autoencoder, params: &Params<f64>, data: &Dataset) -> Result<Vec<Array<f64>>> {
    data.clouds.iter().map(|pc| Ok(ae.mean_latent(params, pc)?)).collect()
}

/// Stage-3 result with the latent statistics it was trained on.
#[derive(Debug, Clone)]
pub struct TriplaneRun {
    pub params: Params<f64>,
    pub norm: LatentNorm,
    pub log: Vec<DiffusionRecord>,
}

/// Order-sensitive digest of every parameter value.
pub fn params_digest(p: &Params<f64>) -> u64 {
    let mut h = DefaultHasher::new();
    for (name, a) in p.iter() {
        name.hash(&mut h);
        a.shape().hash(&mut h);
        for v in a.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Trains the triplane UNet on standardized `μ` latents of the frozen encoder.
pub fn train_triplane(
    cfg: &RunConfig,
    data: &Dataset,
    ae_params: &Params<f64>,
    out: Option<&Output>,
) -> Result<TriplaneRun> {
    let ae = Autoencoder::new(cfg.autoencoder.clone())?;
    let frozen = params_digest(ae_params);
    let norm_latents = encode_dataset(&ae, ae_params, data)?;
    let norm = LatentNorm::fit(&norm_latents)?;
    let latents: Vec<Array<f64>> = norm_latents.iter().map(|z| norm.standardize(z)).collect();
    let model = UNet::new(cfg.unet.clone())?;
    let sched = cfg.diffusion.schedule()?;
    let mut rng = fork(cfg.seed, 3);
    let mut params = model.init::<f64>(&mut rng);
    let mut opt = AdamW::new(cfg.stage3.weight_decay);
    let lr = cfg.stage3.schedule();
    let [_, c, r, _] = cfg.autoencoder.latent_shape();
    let d = cfg.unet.embed_dim;
    let views = data.cameras.len();
    let mut log = Vec::with_capacity(cfg.stage3.steps);
    for step in 0..cfg.stage3.steps {
        let bsz = cfg.stage3.batch;
        let mut z = Vec::with_capacity(bsz * 3 * c * r * r);
        let (mut es, mut ep) = (Vec::with_capacity(bsz * d), Vec::with_capacity(bsz * d));
        for k in 0..bsz {
            let i = k % data.len();
            z.extend_from_slice(latents[i].data());
            es.extend(data.shape_embedding(i));
            ep.extend(data.image_embedding(i, rng.random_range(0..views)));
        }
        let batch = TriplaneBatch {
            latents: Array::new(vec![bsz * 3, c, r, r], z)?,
            shape: Array::new(vec![bsz, d], es)?,
            image: Array::new(vec![bsz, d], ep)?,
        };
        let rate = lr.at(step);
        let opts = StepOptions {
            lr: rate,
            clip_norm: cfg.stage3.clip_norm,
        };
        let loss = train_step_triplane(
            &model,
            &mut params,
            &mut opt,
            &sched,
            &batch,
            &cfg.diffusion.dropout,
            opts,
            &mut rng,
        )?;
        log.push(DiffusionRecord { step, lr: rate, loss });
        if let Some(o) = out {
            if should_save(&cfg.stage3, step) {
                let mut ck = params_checkpoint(&params, cfg, "triplane", step + 1)?;
                norm.write(&mut ck)?;
                ck.save(o.path(TRIPLANE_CHECKPOINT))?;
                write_csv(&o.path("tri_log.csv"), &log)?;
            }
        }
    }
    if params_digest(ae_params) != frozen {
        return Err(PipelineError::Invariant("frozen encoder parameters changed during stage 3".into()));
    }
    Ok(TriplaneRun { params, norm, log })
}

/// Parameters and embedded run configuration of a stage checkpoint.
pub fn load_params(path: &Path, what: &'static str) -> Result<(Params<f64>, RunConfig, Checkpoint)> {
    let ck = Checkpoint::load(require(path, what)?)?;
    let params = Params::read_from(&ck, PARAM_PREFIX)?;
    let text = ck
        .meta
        .get("config")
        .ok_or_else(|| PipelineError::Format(format!("{} has no embedded config", path.display())))?;
    Ok((params, RunConfig::from_toml(text)?, ck))
}

/// Byte digest of a file, used to prove earlier checkpoints are left untouched.
pub fn file_digest(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(PipelineError::io(format!("reading {}", path.display())))?;
    let mut h = DefaultHasher::new();
    bytes.hash(&mut h);
    Ok(h.finish())
}

/// Runs stage 3 from the checkpoints under `dir`, failing if stages 1 or 2 are missing or modified.
pub fn train_triplane_from_dir(cfg: &RunConfig, data: &Dataset, dir: &Path) -> Result<TriplaneRun> {
    let ae_path = require(dir.join(AE_CHECKPOINT), "autoencoder checkpoint")?;
    let prior_path = require(dir.join(PRIOR_CHECKPOINT), "prior checkpoint")?;
    let before = (file_digest(&ae_path)?, file_digest(&prior_path)?);
    let (ae_params, _, _) = load_params(&ae_path, "autoencoder checkpoint")?;
    let run = train_triplane(cfg, data, &ae_params, Some(&Output { dir: dir.to_path_buf() }))?;
    if (file_digest(&ae_path)?, file_digest(&prior_path)?) != before {
        return Err(PipelineError::Invariant("stage-1 or stage-2 checkpoint changed during stage 3".into()));
    }
    Ok(run)
}

/// Reads the latent statistics stored alongside the UNet weights.
pub fn load_triplane(path: &Path) -> Result<(Params<f64>, LatentNorm)> {
    let (params, _, ck) = load_params(path, "triplane checkpoint")?;
    Ok((params, LatentNorm::read(&ck)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use triplane_tensor::rng::seeded;

    #[test]
    fn standardization_round_trips_and_centers() {
        let mut rng = seeded(5);
        let zs: Vec<Array<f64>> = (0..3)
            .map(|_| Array::randn(vec![3, 2, 2, 2], 1.0, &mut rng).map(|v| 4.0 * v + 2.0))
            .collect();
        let n = LatentNorm::fit(&zs).unwrap();
        for z in &zs {
            assert!(n.restore(&n.standardize(z)).max_abs_diff(z) < 1e-12);
        }
        let s: Vec<Array<f64>> = zs.iter().map(|z| n.standardize(z)).collect();
        let again = LatentNorm::fit(&s).unwrap();
        assert!(again.mean.iter().all(|m| m.abs() < 1e-12));
        assert!(again.std.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn checkpoint_cadence_includes_last_step() {
        let t = TrainConfig {
            steps: 250,
            lr_start: 1.0,
            lr_end: 1.0,
            weight_decay: 0.0,
            clip_norm: None,
            batch: 1,
            checkpoint_every: 100,
        };
        let saved: Vec<usize> = (0..250).filter(|&s| should_save(&t, s)).collect();
        assert_eq!(saved, vec![99, 199, 249]);
    }

    #[test]
    fn missing_stage_checkpoints_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::desk();
        let data = Dataset {
            manifest: crate::synth::DatasetManifest {
                seed: 0,
                num_points: 0,
                gt_grid: 0,
                embed_dim: 0,
                views: cfg.views.clone(),
                shapes: vec![],
            },
            clouds: vec![],
            cameras: vec![],
            targets: vec![],
            shape_embeddings: Array::zeros(vec![0]),
            image_embeddings: Array::zeros(vec![0]),
        };
        let e = train_triplane_from_dir(&cfg, &data, dir.path()).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("autoencoder checkpoint"));
    }
}
