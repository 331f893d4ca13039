//! Procedural shapes with analytic SDFs, their render targets and oracle embeddings.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use triplane_core::decode::FlexiField;
use triplane_core::encode::ColoredPointCloud;
use triplane_core::iso::{extract_mesh, SurfaceMesh};
use triplane_core::pcio::{read_ply, write_ply, PlyFormat};
use triplane_core::render::{make_view_set, render_targets, Camera, RasterOptions, RenderTarget};
use triplane_tensor::rng::{fork, normal, seeded};
use triplane_tensor::{Array, Checkpoint, Rng};

use crate::config::{RunConfig, ViewConfig};
use crate::error::{require, PipelineError, Result};

/// Length of the analytic shape descriptor.
pub const DESCRIPTOR_DIM: usize = 32;
/// Standard deviation of the per-view embedding noise.
pub const IMAGE_NOISE: f64 = 0.05;
/// Seed of the fixed projections shared by every dataset.
const ORACLE_SEED: u64 = 0x0E3B_ED01;
const VIEW_SEED: u64 = 0x5EE5;
const PERTURB_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { radius: f64 },
    Box { half: [f64; 3] },
    /// Ring in the `xz` plane.
    Torus { major: f64, minor: f64 },
    /// Segment along `y`.
    Capsule { half_length: f64, radius: f64 },
    Union { first: std::boxed::Box<Part>, second: std::boxed::Box<Part> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub primitive: Primitive,
    pub center: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorSpec {
    /// Gradient axis, 0..3.
    pub axis: usize,
    pub hue_a: f64,
    pub hue_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShapeSpec {
    pub primitive: Primitive,
    pub color: ColorSpec,
    pub seed: u64,
}

fn length(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

impl Primitive {
    pub fn kind_index(&self) -> usize {
        match self {
            Primitive::Sphere { .. } => 0,
            Primitive::Box { .. } => 1,
            Primitive::Torus { .. } => 2,
            Primitive::Capsule { .. } => 3,
            Primitive::Union { .. } => 4,
        }
    }

    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        match self {
            Primitive::Sphere { radius } => length(p) - radius,
            Primitive::Box { half } => {
                let q = [0, 1, 2].map(|i| p[i].abs() - half[i]);
                let outside = length(q.map(|v| v.max(0.0)));
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Primitive::Torus { major, minor } => {
                let r = (p[0] * p[0] + p[2] * p[2]).sqrt() - major;
                (r * r + p[1] * p[1]).sqrt() - minor
            }
            Primitive::Capsule { half_length, radius } => {
                let y = p[1].clamp(-half_length, *half_length);
                length([p[0], p[1] - y, p[2]]) - radius
            }
            Primitive::Union { first, second } => first.sdf(p).min(second.sdf(p)),
        }
    }

    /// Six size parameters, zero-padded.
    fn sizes(&self) -> [f64; 6] {
        match self {
            Primitive::Sphere { radius } => [*radius, 0.0, 0.0, 0.0, 0.0, 0.0],
            Primitive::Box { half } => [half[0], half[1], half[2], 0.0, 0.0, 0.0],
            Primitive::Torus { major, minor } => [*major, *minor, 0.0, 0.0, 0.0, 0.0],
            Primitive::Capsule { half_length, radius } => [*half_length, *radius, 0.0, 0.0, 0.0, 0.0],
            Primitive::Union { first, second } => {
                let (a, b) = (first.primitive.sizes(), second.primitive.sizes());
                [a[0], b[0], b[1], b[2], first.center[0], second.center[0]]
            }
        }
    }
}

impl Part {
    fn sdf(&self, p: [f64; 3]) -> f64 {
        self.primitive.sdf([0, 1, 2].map(|i| p[i] - self.center[i]))
    }
}

/// HSV color with saturation 0.7, value 0.9 and hue in turns.
fn hue_rgb(h: f64) -> [f64; 3] {
    let (s, v) = (0.7, 0.9);
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6.floor() as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

impl ColorSpec {
    /// Linear blend from `hue_a` at `-1` to `hue_b` at `+1` along `axis`.
    pub fn color(&self, p: [f64; 3]) -> [f64; 3] {
        let t = ((p[self.axis] + 1.0) / 2.0).clamp(0.0, 1.0);
        let (a, b) = (hue_rgb(self.hue_a), hue_rgb(self.hue_b));
        [0, 1, 2].map(|i| a[i] + t * (b[i] - a[i]))
    }
}

impl SyntheticShapeSpec {
    /// Spec `index` of a dataset; primitive kinds cycle so small sets stay diverse.
    pub fn random(index: usize, rng: &mut Rng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let primitive = match index % 5 {
            0 => Primitive::Sphere { radius: u(0.45, 0.7) },
            1 => Primitive::Box {
                half: [u(0.3, 0.55), u(0.3, 0.55), u(0.3, 0.55)],
            },
            2 => Primitive::Torus {
                major: u(0.45, 0.6),
                minor: u(0.15, 0.25),
            },
            3 => Primitive::Capsule {
                half_length: u(0.2, 0.4),
                radius: u(0.2, 0.3),
            },
            _ => Primitive::Union {
                first: std::boxed::Box::new(Part {
                    primitive: Primitive::Sphere { radius: u(0.3, 0.4) },
                    center: [-u(0.25, 0.35), 0.0, 0.0],
                }),
                second: std::boxed::Box::new(Part {
                    primitive: Primitive::Box {
                        half: [u(0.2, 0.3), u(0.2, 0.3), u(0.2, 0.3)],
                    },
                    center: [u(0.25, 0.35), 0.0, 0.0],
                }),
            },
        };
        let color = ColorSpec {
            axis: rng.random_range(0..3),
            hue_a: rng.random(),
            hue_b: rng.random(),
        };
        SyntheticShapeSpec {
            primitive,
            color,
            seed: rng.random(),
        }
    }

    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        self.primitive.sdf(p)
    }

    /// Analytic descriptor: kind one-hot, doubled sizes, gradient-axis one-hot and hue angles.
    pub fn descriptor(&self) -> [f64; DESCRIPTOR_DIM] {
        let mut d = [0.0; DESCRIPTOR_DIM];
        d[self.primitive.kind_index()] = 1.0;
        for (i, s) in self.primitive.sizes().iter().enumerate() {
            d[5 + i] = 2.0 * s;
        }
        d[11 + self.color.axis] = 1.0;
        for (k, h) in [self.color.hue_a, self.color.hue_b].iter().enumerate() {
            let a = std::f64::consts::TAU * h;
            d[14 + 2 * k] = a.cos();
            d[15 + 2 * k] = a.sin();
        }
        d
    }

    /// Analytic mesh on a `grid³` lattice with vertex colors.
    pub fn mesh(&self, grid: usize) -> Result<SurfaceMesh> {
        let mut mesh = extract_mesh(&FlexiField::from_sdf(grid, |p| self.sdf(p)))?;
        mesh.colors = Some(mesh.vertices.iter().map(|&p| self.color.color(p)).collect());
        Ok(mesh)
    }

    /// Newton projection onto the zero level set with a central-difference gradient.
    pub fn project(&self, mut p: [f64; 3]) -> [f64; 3] {
        const H: f64 = 1e-6;
        for _ in 0..8 {
            let d = self.sdf(p);
            if d.abs() < 1e-13 {
                break;
            }
            let grad = [0, 1, 2].map(|i| {
                let (mut a, mut b) = (p, p);
                a[i] += H;
                b[i] -= H;
                (self.sdf(a) - self.sdf(b)) / (2.0 * H)
            });
            let n2 = grad.iter().map(|g| g * g).sum::<f64>();
            if n2 < 1e-12 {
                break;
            }
            p = [0, 1, 2].map(|i| p[i] - d * grad[i] / n2);
        }
        p
    }

    /// `n` colored points on the analytic surface: area-weighted mesh samples projected onto the zero set.
    pub fn point_cloud(&self, n: usize, grid: usize) -> Result<ColoredPointCloud> {
        let mesh = extract_mesh(&FlexiField::from_sdf(grid, |p| self.sdf(p)))?;
        let samples = mesh.surface_samples(n, &mut fork(self.seed, 1))?;
        let points: Vec<[f64; 3]> = samples.points.into_iter().map(|p| self.project(p)).collect();
        let colors = points.iter().map(|&p| self.color.color(p)).collect();
        Ok(ColoredPointCloud::new(points, colors)?)
    }
}

/// Fixed projections of the embedding oracle for embedding width `dim`.
#[derive(Debug, Clone)]
pub struct EmbeddingOracle {
    /// `[dim, DESCRIPTOR_DIM]`.
    pub projection: Array<f64>,
    /// `[dim, 3]` view-direction perturbation basis.
    pub perturbation: Array<f64>,
}

impl EmbeddingOracle {
    pub fn new(dim: usize) -> Self {
        let mut rng = seeded(ORACLE_SEED);
        let projection = Array::randn(vec![dim, DESCRIPTOR_DIM], 1.0 / (DESCRIPTOR_DIM as f64).sqrt(), &mut rng);
        let perturbation = Array::randn(vec![dim, 3], PERTURB_SCALE, &mut rng);
        EmbeddingOracle {
            projection,
            perturbation,
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn shape_embedding(&self, spec: &SyntheticShapeSpec) -> Vec<f64> {
        let d = spec.descriptor();
        self.projection
            .data()
            .chunks_exact(DESCRIPTOR_DIM)
            .map(|row| row.iter().zip(&d).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Shape embedding plus a rank-3 function of the view direction and Gaussian noise.
    pub fn image_embedding(&self, spec: &SyntheticShapeSpec, view_dir: [f64; 3], rng: &mut Rng) -> Vec<f64> {
        let l = length(view_dir).max(1e-12);
        let v = view_dir.map(|c| c / l);
        self.shape_embedding(spec)
            .into_iter()
            .zip(self.perturbation.data().chunks_exact(3))
            .map(|(e, u)| e + u[0] * v[0] + u[1] * v[1] + u[2] * v[2] + IMAGE_NOISE * normal(rng))
            .collect()
    }
}

/// Shared camera ring for a dataset seed.
pub fn view_set(views: &ViewConfig, seed: u64) -> Result<Vec<Camera>> {
    Ok(make_view_set(
        views.count,
        views.radius,
        views.fov_deg,
        views.image_size,
        seed ^ VIEW_SEED,
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub num_points: usize,
    pub gt_grid: usize,
    pub embed_dim: usize,
    pub views: ViewConfig,
    pub shapes: Vec<SyntheticShapeSpec>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clouds: Vec<ColoredPointCloud>,
    pub cameras: Vec<Camera>,
    /// Ground-truth renders, one list per shape in camera order.
    pub targets: Vec<Vec<RenderTarget>>,
    /// `[n, D]`.
    pub shape_embeddings: Array<f64>,
    /// `[n, V, D]`.
    pub image_embeddings: Array<f64>,
}

struct ShapeData {
    cloud: ColoredPointCloud,
    targets: Vec<RenderTarget>,
    image: Vec<f64>,
}

fn synth_shape(
    spec: &SyntheticShapeSpec,
    cfg: &RunConfig,
    cams: &[Camera],
    oracle: &EmbeddingOracle,
) -> Result<ShapeData> {
    let cloud = spec.point_cloud(cfg.data.num_points, cfg.data.gt_grid)?;
    let mesh = spec.mesh(cfg.data.gt_grid)?;
    let targets = render_targets(&mesh, cams, RasterOptions::default())?;
    let mut rng = fork(spec.seed, 2);
    let image = cams
        .iter()
        .flat_map(|c| oracle.image_embedding(spec, c.position, &mut rng))
        .collect();
    Ok(ShapeData { cloud, targets, image })
}

/// Builds `cfg.data.num_shapes` shapes from `cfg.seed`, spreading shapes over available threads.
pub fn synth_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let n = cfg.data.num_shapes;
    if n == 0 {
        return Err(PipelineError::Usage("dataset needs at least one shape".into()));
    }
    let mut rng = seeded(cfg.seed);
    let specs: Vec<SyntheticShapeSpec> = (0..n).map(|i| SyntheticShapeSpec::random(i, &mut rng)).collect();
    let cams = view_set(&cfg.views, cfg.seed)?;
    let oracle = EmbeddingOracle::new(cfg.prior.dim);
    let workers = std::thread::available_parallelism().map_or(1, |w| w.get()).min(n);
    let chunk = n.div_ceil(workers);
    let parts: Vec<Result<ShapeData>> = std::thread::scope(|s| {
        let handles: Vec<_> = specs
            .chunks(chunk)
            .map(|group| {
                let (cams, oracle) = (&cams, &oracle);
                s.spawn(move || group.iter().map(|sp| synth_shape(sp, cfg, cams, oracle)).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("synthesis worker panicked"))
            .collect()
    });
    let mut clouds = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut image = Vec::with_capacity(n * cams.len() * oracle.dim());
    for part in parts {
        let part = part?;
        clouds.push(part.cloud);
        targets.push(part.targets);
        image.extend(part.image);
    }
    let shape: Vec<f64> = specs.iter().flat_map(|s| oracle.shape_embedding(s)).collect();
    let d = oracle.dim();
    Ok(Dataset {
        shape_embeddings: Array::new(vec![n, d], shape)?,
        image_embeddings: Array::new(vec![n, cams.len(), d], image)?,
        manifest: DatasetManifest {
            seed: cfg.seed,
            num_points: cfg.data.num_points,
            gt_grid: cfg.data.gt_grid,
            embed_dim: d,
            views: cfg.views.clone(),
            shapes: specs,
        },
        clouds,
        cameras: cams,
        targets,
    })
}

fn shape_dir(root: &Path, i: usize) -> std::path::PathBuf {
    root.join(format!("shape_{i:04}"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(PipelineError::io(format!("creating {}", path.display())))?,
    ))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.manifest.embed_dim
    }

    pub fn shape_embedding(&self, i: usize) -> Vec<f64> {
        self.shape_embeddings.row(i).to_vec()
    }

    pub fn image_embedding(&self, i: usize, view: usize) -> Vec<f64> {
        let (v, d) = (self.cameras.len(), self.embed_dim());
        self.image_embeddings.data()[(i * v + view) * d..(i * v + view + 1) * d].to_vec()
    }

    /// Analytic ground-truth mesh of shape `i`.
    pub fn gt_mesh(&self, i: usize) -> Result<SurfaceMesh> {
        self.manifest.shapes[i].mesh(self.manifest.gt_grid)
    }

    /// Writes `dataset.json`, `embeddings.ckpt` and per-shape `points.ply`, `targets.ckpt`, `mesh.obj`.
    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root).map_err(PipelineError::io(format!("creating {}", root.display())))?;
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| PipelineError::Format(e.to_string()))?;
        std::fs::write(root.join("dataset.json"), json).map_err(PipelineError::io("writing dataset.json"))?;
        let mut emb = Checkpoint::new();
        emb.insert("shape", &self.shape_embeddings);
        emb.insert("image", &self.image_embeddings);
        emb.save(root.join("embeddings.ckpt"))?;
        for i in 0..self.len() {
            let dir = shape_dir(root, i);
            std::fs::create_dir_all(&dir).map_err(PipelineError::io(format!("creating {}", dir.display())))?;
            write_ply(&self.clouds[i], create(&dir.join("points.ply"))?, PlyFormat::BinaryLittleEndian)?;
            let mut ck = Checkpoint::new();
            for (k, t) in self.targets[i].iter().enumerate() {
                let (h, w) = (t.height, t.width);
                ck.insert(
                    format!("view{k:03}.rgb"),
                    &Array::new(vec![h, w, 3], t.rgb.iter().flatten().copied().collect())?,
                );
                ck.insert(format!("view{k:03}.mask"), &Array::new(vec![h, w], t.mask.clone())?);
                ck.insert(format!("view{k:03}.depth"), &Array::new(vec![h, w], t.depth.clone())?);
            }
            ck.save(dir.join("targets.ckpt"))?;
            self.gt_mesh(i)?
                .write_obj(create(&dir.join("mesh.obj"))?)
                .map_err(PipelineError::io("writing mesh.obj"))?;
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let manifest_path = require(root.join("dataset.json"), "dataset manifest")?;
        let text = std::fs::read_to_string(&manifest_path).map_err(PipelineError::io("reading dataset.json"))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| PipelineError::Format(e.to_string()))?;
        let emb = Checkpoint::load(require(root.join("embeddings.ckpt"), "dataset embeddings")?)?;
        let cameras = view_set(&manifest.views, manifest.seed)?;
        let mut clouds = Vec::new();
        let mut targets = Vec::new();
        for i in 0..manifest.shapes.len() {
            let dir = shape_dir(root, i);
            let ply = require(dir.join("points.ply"), "shape point cloud")?;
            let f = File::open(&ply).map_err(PipelineError::io(format!("opening {}", ply.display())))?;
            clouds.push(read_ply(BufReader::new(f))?);
            let ck = Checkpoint::load(require(dir.join("targets.ckpt"), "shape render targets")?)?;
            let mut views = Vec::with_capacity(cameras.len());
            for k in 0..cameras.len() {
                let rgb = ck.get::<f64>(&format!("view{k:03}.rgb"))?;
                let (h, w) = (rgb.shape()[0], rgb.shape()[1]);
                views.push(RenderTarget {
                    width: w,
                    height: h,
                    rgb: rgb.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
                    mask: ck.get::<f64>(&format!("view{k:03}.mask"))?.data().to_vec(),
                    depth: ck.get::<f64>(&format!("view{k:03}.depth"))?.data().to_vec(),
                });
            }
            targets.push(views);
        }
        Ok(Dataset {
            shape_embeddings: emb.get("shape")?,
            image_embeddings: emb.get("image")?,
            manifest,
            clouds,
            cameras,
            targets,
        })
    }
}

/// Pearson correlation of two equal-length vectors.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
