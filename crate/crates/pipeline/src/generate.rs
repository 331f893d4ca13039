//! Image embedding to colored mesh: prior sampling, guided triplane sampling, decoding and export.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use triplane_core::autoencoder::Autoencoder;
use triplane_core::diffusion::{ddim_sample, GuidanceScales, GuidedDenoiser, NoiseSchedule, PriorDenoiser, PriorModel, UNet};
use triplane_core::iso::SurfaceMesh;
use triplane_core::nn::Params;
use triplane_core::render::{rasterize, Camera, RasterOptions, RenderTarget};
use triplane_tensor::rng::{fork, seeded};
use triplane_tensor::Array;

use crate::config::RunConfig;
use crate::error::{PipelineError, Result};
use crate::stages::{load_params, load_triplane, LatentNorm, AE_CHECKPOINT, PRIOR_CHECKPOINT, TRIPLANE_CHECKPOINT};

/// All three trained stages.
#[derive(Debug, Clone)]
pub struct Models {
    pub cfg: RunConfig,
    pub ae: Autoencoder,
    pub ae_params: Params<f64>,
    pub prior: PriorModel,
    pub prior_params: Params<f64>,
    pub unet: UNet,
    pub unet_params: Params<f64>,
    pub norm: LatentNorm,
}

impl Models {
    pub fn new(
        cfg: &RunConfig,
        ae_params: Params<f64>,
        prior_params: Params<f64>,
        unet_params: Params<f64>,
        norm: LatentNorm,
    ) -> Result<Self> {
        Ok(Models {
            ae: Autoencoder::new(cfg.autoencoder.clone())?,
            prior: PriorModel::new(cfg.prior.clone())?,
            unet: UNet::new(cfg.unet.clone())?,
            cfg: cfg.clone(),
            ae_params,
            prior_params,
            unet_params,
            norm,
        })
    }

    /// Loads the stage checkpoints in `dir`, rebuilding each model from the configuration it was trained with.
    pub fn load(dir: &Path) -> Result<Self> {
        let (ae_params, ae_cfg, _) = load_params(&dir.join(AE_CHECKPOINT), "autoencoder checkpoint")?;
        let (prior_params, prior_cfg, _) = load_params(&dir.join(PRIOR_CHECKPOINT), "prior checkpoint")?;
        let tri_path = dir.join(TRIPLANE_CHECKPOINT);
        let (_, tri_cfg, _) = load_params(&tri_path, "triplane checkpoint")?;
        let (unet_params, norm) = load_triplane(&tri_path)?;
        if ae_cfg.autoencoder != tri_cfg.autoencoder || prior_cfg.prior != tri_cfg.prior {
            return Err(PipelineError::Core(triplane_core::CoreError::Dimension(
                "Models::load",
                "stage checkpoints were trained with different model configurations".into(),
            )));
        }
        Models::new(&tri_cfg, ae_params, prior_params, unet_params, norm)
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.prior.dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    /// Samples the shape embedding with the prior; otherwise the image embedding stands in for it.
    pub use_prior: bool,
    pub guidance: GuidanceScales,
    pub ddim_steps: usize,
    pub seed: u64,
}

impl GenerateOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        GenerateOptions {
            use_prior: true,
            guidance: cfg.diffusion.guidance,
            ddim_steps: cfg.diffusion.ddim_steps,
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub shape_embedding: Vec<f64>,
    /// De-standardized `[3, c′, r′, r′]`.
    pub latent: Array<f64>,
    pub mesh: SurfaceMesh,
}

fn row(v: &[f64]) -> Result<Array<f64>> {
    Ok(Array::new(vec![1, v.len()], v.to_vec())?)
}

/// Samples a shape embedding, then a triplane latent under dual guidance, and decodes it.
pub fn generate(models: &Models, image_embedding: &[f64], opts: &GenerateOptions) -> Result<Generated> {
    let d = models.embed_dim();
    if image_embedding.len() != d {
        return Err(PipelineError::Core(triplane_core::CoreError::Dimension(
            "generate",
            format!("image embedding has {} values but the checkpoints expect {d}", image_embedding.len()),
        )));
    }
    let sched: NoiseSchedule = models.cfg.diffusion.schedule()?;
    let pc = &models.cfg.prior;
    let shape_embedding = if opts.use_prior {
        let prior = PriorDenoiser {
            model: &models.prior,
            params: &models.prior_params,
            image: row(&image_embedding.iter().map(|v| v * pc.image_scale).collect::<Vec<_>>())?,
        };
        let mut rng = fork(opts.seed, 10);
        let scaled = ddim_sample(&prior, &sched, &[1, d], opts.ddim_steps, &mut rng)?;
        scaled.data().iter().map(|v| v / pc.shape_scale).collect()
    } else {
        image_embedding.to_vec()
    };
    let guided = GuidedDenoiser {
        model: &models.unet,
        params: &models.unet_params,
        shape: row(&shape_embedding)?,
        image: row(image_embedding)?,
        scales: opts.guidance,
    };
    let mut rng = fork(opts.seed, 11);
    let z = ddim_sample(
        &guided,
        &sched,
        &models.cfg.autoencoder.latent_shape(),
        opts.ddim_steps,
        &mut rng,
    )?;
    if z.data().iter().any(|v| !v.is_finite()) {
        return Err(PipelineError::Numerical("sampled latent is not finite".into()));
    }
    let latent = models.norm.restore(&z);
    let mesh = models.ae.reconstruct(&models.ae_params, &latent)?;
    Ok(Generated {
        shape_embedding,
        latent,
        mesh,
    })
}

/// `n` cameras circling the `y` axis at 20° elevation.
pub fn turntable_cameras(n: usize, radius: f64, fov_deg: f64, size: usize) -> Result<Vec<Camera>> {
    let elev = 20f64.to_radians();
    (0..n)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / n as f64;
            let pos = [
                radius * elev.cos() * a.sin(),
                radius * elev.sin(),
                radius * elev.cos() * a.cos(),
            ];
            Ok(Camera::new(
                pos,
                [0.0; 3],
                [0.0, 1.0, 0.0],
                fov_deg,
                (size, size),
                0.1 * radius,
                2.0 * radius,
            )?)
        })
        .collect()
}

/// Writes `mesh.obj`, `mesh.ply` and `turn_XX_{rgb,mask,depth}.png` into `dir`.
pub fn export_mesh(mesh: &SurfaceMesh, cfg: &RunConfig, dir: &Path, frames: usize) -> Result<Vec<RenderTarget>> {
    std::fs::create_dir_all(dir).map_err(PipelineError::io(format!("creating {}", dir.display())))?;
    let create = |name: &str| -> Result<BufWriter<File>> {
        let p = dir.join(name);
        Ok(BufWriter::new(File::create(&p).map_err(PipelineError::io(format!("creating {}", p.display())))?))
    };
    mesh.write_obj(create("mesh.obj")?).map_err(PipelineError::io("writing mesh.obj"))?;
    mesh.write_ply(create("mesh.ply")?).map_err(PipelineError::io("writing mesh.ply"))?;
    let v = &cfg.views;
    let cams = turntable_cameras(frames, v.radius, v.fov_deg, v.image_size)?;
    let mut renders = Vec::with_capacity(frames);
    for (k, cam) in cams.iter().enumerate() {
        let img = rasterize(mesh, cam, RasterOptions::default())?;
        img.save_png(dir, &format!("turn_{k:02}"))?;
        renders.push(img);
    }
    Ok(renders)
}

fn nearest_sq(p: [f64; 3], cloud: &[[f64; 3]]) -> f64 {
    cloud
        .iter()
        .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric mean squared nearest-neighbor distance between two point sets.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    let ab = a.iter().map(|&p| nearest_sq(p, b)).sum::<f64>() / a.len() as f64;
    let ba = b.iter().map(|&p| nearest_sq(p, a)).sum::<f64>() / b.len() as f64;
    ab + ba
}

/// Chamfer distance between `k` seeded area-weighted samples of each mesh; infinite for an empty mesh.
pub fn mesh_chamfer(a: &SurfaceMesh, b: &SurfaceMesh, k: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() || a.total_area() <= 0.0 || b.total_area() <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let pa = a.surface_samples(k, &mut seeded(seed))?.points;
    let pb = b.surface_samples(k, &mut seeded(seed ^ 1))?.points;
    Ok(chamfer(&pa, &pb))
}

/// Distances from each generated mesh to every reference mesh and whether its own reference is nearest.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    /// `distances[i][j]`: generated `i` against reference `j`.
    pub distances: Vec<Vec<f64>>,
}

impl Retrieval {
    pub fn compute(generated: &[SurfaceMesh], references: &[SurfaceMesh], samples: usize) -> Result<Self> {
        let distances = generated
            .iter()
            .map(|g| references.iter().map(|r| mesh_chamfer(g, r, samples, 7)).collect())
            .collect::<Result<_>>()?;
        Ok(Retrieval { distances })
    }

    pub fn hits(&self) -> Vec<bool> {
        self.distances
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let own = row[i];
                own.is_finite() && row.iter().enumerate().all(|(j, &d)| j == i || own < d)
            })
            .collect()
    }

    /// Fraction of generated meshes nearest to their own reference.
    pub fn accuracy(&self) -> f64 {
        let h = self.hits();
        h.iter().filter(|&&b| b).count() as f64 / h.len().max(1) as f64
    }

    /// Mean distance from each generated mesh to its own reference.
    pub fn mean_self_distance(&self) -> f64 {
        let n = self.distances.len().max(1) as f64;
        self.distances.iter().enumerate().map(|(i, r)| r[i]).sum::<f64>() / n
    }
}
