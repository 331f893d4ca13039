//! Paired desk-scale experiments that differ along one axis.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use triplane_core::autoencoder::Autoencoder;
use triplane_core::diffusion::GuidanceScales;

use crate::config::RunConfig;
use crate::error::{PipelineError, Result};
use crate::generate::{generate, GenerateOptions, Generated, Models, Retrieval};
use crate::stages::{evaluate_autoencoder, train_autoencoder};
use crate::synth::Dataset;

/// Guidance scales swept on each axis of the guidance grid.
pub const GUIDANCE_GRID: [f64; 4] = [1.0, 3.0, 5.0, 10.0];
/// Surface samples per mesh in retrieval scoring.
pub const RETRIEVAL_SAMPLES: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Attention,
    VolumeRes,
    Prior,
    Guidance,
}

impl FromStr for Axis {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Axis::Attention),
            "volume-res" => Ok(Axis::VolumeRes),
            "prior" => Ok(Axis::Prior),
            "guidance" => Ok(Axis::Guidance),
            other => Err(PipelineError::Usage(format!(
                "unknown ablation axis '{other}' (expected attention, volume-res, prior or guidance)"
            ))),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Attention => "attention",
            Axis::VolumeRes => "volume-res",
            Axis::Prior => "prior",
            Axis::Guidance => "guidance",
        }
    }

    /// Whether the axis compares trained generators instead of training runs.
    pub fn needs_models(self) -> bool {
        matches!(self, Axis::Prior | Axis::Guidance)
    }
}

/// Comparison table; every cell is formatted deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory csv");
        for r in &self.rows {
            w.write_record(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("## {}\n\n| {} |\n|", self.title, self.columns.join(" | "));
        s.push_str(&"---|".repeat(self.columns.len()));
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "| {} |", r.join(" | "));
        }
        s
    }
}

/// Report plus wall-clock seconds per training step for each variant, kept apart so reports stay reproducible.
#[derive(Debug, Clone)]
pub struct Ablation {
    pub report: Report,
    pub seconds_per_step: Vec<(String, f64)>,
}

fn milli(v: f64) -> String {
    format!("{:.4}", v * 1e3)
}

fn training_variants(data: &Dataset, variants: Vec<(String, RunConfig)>, title: &str) -> Result<Ablation> {
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for (name, c) in variants {
        let start = Instant::now();
        let run = train_autoencoder(&c, data, None)?;
        let per_step = start.elapsed().as_secs_f64() / c.stage1.steps.max(1) as f64;
        let ae = Autoencoder::new(c.autoencoder.clone())?;
        let eval = evaluate_autoencoder(&ae, &run.params, data)?;
        rows.push(vec![name.clone(), milli(eval.rgb), milli(eval.mask), milli(eval.depth)]);
        timing.push((name, per_step));
    }
    Ok(Ablation {
        report: Report {
            title: title.into(),
            columns: ["variant", "L_rgb x1e3", "L_mask x1e3", "L_depth x1e3"].map(String::from).to_vec(),
            rows,
        },
        seconds_per_step: timing,
    })
}

/// Generates from view 0 of every dataset shape and scores retrieval against the analytic meshes.
pub fn retrieval_run(models: &Models, data: &Dataset, opts: &GenerateOptions) -> Result<(Retrieval, Vec<Generated>)> {
    let gen = (0..data.len())
        .map(|i| generate(models, &data.image_embedding(i, 0), opts))
        .collect::<Result<Vec<_>>>()?;
    let refs = (0..data.len()).map(|i| data.gt_mesh(i)).collect::<Result<Vec<_>>>()?;
    let meshes: Vec<_> = gen.iter().map(|g| g.mesh.clone()).collect();
    Ok((Retrieval::compute(&meshes, &refs, RETRIEVAL_SAMPLES)?, gen))
}

fn retrieval_row(name: String, r: &Retrieval) -> Vec<String> {
    vec![name, format!("{:.4}", r.accuracy()), milli(r.mean_self_distance())]
}

/// Runs the experiments of `axis` and tabulates them.
pub fn ablate(cfg: &RunConfig, axis: Axis, data: &Dataset, models: Option<&Models>) -> Result<Ablation> {
    match axis {
        Axis::Attention => {
            let variants = [false, true]
                .into_iter()
                .map(|on| {
                    let mut c = cfg.clone();
                    c.autoencoder.use_attention = on;
                    (if on { "w attention" } else { "w/o attention" }.to_string(), c)
                })
                .collect();
            training_variants(data, variants, "3D-aware cross-attention")
        }
        Axis::VolumeRes => {
            let r = cfg.autoencoder.attention.volume_res;
            let variants = [4, 2]
                .into_iter()
                .filter(|&o| r.is_multiple_of(o) && r / o >= 1)
                .map(|o| {
                    let mut c = cfg.clone();
                    c.autoencoder.use_attention = true;
                    c.autoencoder.attention.downsample = o;
                    (format!("r''={}", r / o), c)
                })
                .collect();
            training_variants(data, variants, "attended volume resolution")
        }
        Axis::Prior | Axis::Guidance => {
            let models = models.ok_or_else(|| PipelineError::Usage(format!("axis '{}' needs trained checkpoints", axis.name())))?;
            let base = GenerateOptions::from_config(&models.cfg);
            let columns = ["variant", "retrieval accuracy", "self chamfer x1e3"].map(String::from).to_vec();
            let rows = if axis == Axis::Prior {
                [false, true]
                    .into_iter()
                    .map(|p| {
                        let o = GenerateOptions { use_prior: p, ..base };
                        let (r, _) = retrieval_run(models, data, &o)?;
                        Ok(retrieval_row(if p { "w prior" } else { "w/o prior" }.into(), &r))
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                let mut rows = Vec::new();
                for &s in &GUIDANCE_GRID {
                    for &p in &GUIDANCE_GRID {
                        let o = GenerateOptions {
                            guidance: GuidanceScales { shape: s, image: p },
                            ..base
                        };
                        let (r, _) = retrieval_run(models, data, &o)?;
                        rows.push(retrieval_row(format!("s_s={s} s_p={p}"), &r));
                    }
                }
                rows
            };
            Ok(Ablation {
                report: Report {
                    title: if axis == Axis::Prior { "shape-embedding prior" } else { "guidance scales" }.into(),
                    columns,
                    rows,
                },
                seconds_per_step: vec![],
            })
        }
    }
}
