//! Point cloud → feature volume → triplane latent distribution.

use std::f64::consts::PI;
use std::rc::Rc;

use triplane_tensor::{Array, Graph, Rng, Scalar, Var};

use crate::error::{config, CoreError, Result};
use crate::nn::{Bound, Conv2d, Conv3d, Linear, Params};
use crate::triplane::ResBlock;

/// Positions in `[-1, 1]³` with RGB colors in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColoredPointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
}

impl ColoredPointCloud {
    /// Clamps positions and colors into range.
    pub fn new(points: Vec<[f64; 3]>, colors: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(CoreError::Empty("point cloud"));
        }
        if points.len() != colors.len() {
            return Err(CoreError::Dimension(
                "ColoredPointCloud",
                format!("{} points but {} colors", points.len(), colors.len()),
            ));
        }
        let clamp = |v: [f64; 3], lo: f64, hi: f64| v.map(|c| c.clamp(lo, hi));
        Ok(ColoredPointCloud {
            points: points.into_iter().map(|p| clamp(p, -1.0, 1.0)).collect(),
            colors: colors.into_iter().map(|c| clamp(c, 0.0, 1.0)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `N × 6` rows of `[x, y, z, r, g, b]`.
    pub fn to_array<T: Scalar>(&self) -> Array<T> {
        let mut data = Vec::with_capacity(self.len() * 6);
        for (p, c) in self.points.iter().zip(&self.colors) {
            data.extend(p.iter().chain(c).map(|&v| T::of(v)));
        }
        Array::new(vec![self.len(), 6], data).expect("point cloud array")
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Feature volume resolution `r`.
    pub volume_res: usize,
    /// Point, volume and plane feature channels `c`.
    pub channels: usize,
    /// Latent plane resolution `r′`.
    pub latent_res: usize,
    /// Latent channels `c′`.
    pub latent_channels: usize,
    /// Sinusoidal frequencies per coordinate in the point embedding.
    pub pe_freqs: usize,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        EncoderConfig {
            volume_res: 16,
            channels: 8,
            latent_res: 4,
            latent_channels: 4,
            pe_freqs: 6,
        }
    }

    pub fn paper() -> Self {
        EncoderConfig {
            volume_res: 128,
            channels: 32,
            latent_res: 32,
            latent_channels: 32,
            pe_freqs: 6,
        }
    }

    /// Number of stride-2 stages between `r` and `r′`.
    pub fn down_stages(&self) -> Result<usize> {
        stages_between(self.volume_res, self.latent_res)
    }

    pub fn embed_dim(&self) -> usize {
        3 + 6 * self.pe_freqs + 3
    }

    /// `3 · r′² · c′`.
    pub fn latent_scalars(&self) -> usize {
        3 * self.latent_res * self.latent_res * self.latent_channels
    }
}

/// `log2(hi / lo)` when the ratio is a power of two.
pub fn stages_between(hi: usize, lo: usize) -> Result<usize> {
    if lo == 0 || hi < lo || !hi.is_multiple_of(lo) || !(hi / lo).is_power_of_two() {
        return config(format!("resolution ratio {hi}/{lo} is not a power of two"));
    }
    Ok((hi / lo).trailing_zeros() as usize)
}

/// Maps a coordinate in `[-1, 1]` to grid units `[0, r - 1]`.
#[inline]
pub fn to_grid(v: f64, r: usize) -> f64 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * (r - 1) as f64
}

/// Lower cell index and fractional offset of a grid coordinate, clamped so the
/// upper neighbour stays inside the grid.
#[inline]
pub fn cell_of(u: f64, r: usize) -> (usize, f64) {
    let i = (u.floor().max(0.0) as usize).min(r - 2);
    (i, u - i as f64)
}

/// `[x, y, z, sin(2^k π ·), cos(2^k π ·) for k < freqs, r, g, b]`.
pub fn point_embedding(p: [f64; 3], c: [f64; 3], freqs: usize) -> Vec<f64> {
    let mut e = Vec::with_capacity(6 + 6 * freqs);
    e.extend_from_slice(&p);
    for k in 0..freqs {
        let f = (1u64 << k) as f64 * PI;
        for &v in &p {
            e.push((f * v).sin());
            e.push((f * v).cos());
        }
    }
    e.extend_from_slice(&c);
    e
}

/// Trilinear splatting weights of each point onto its 8 surrounding grid nodes.
#[derive(Debug, Clone)]
pub struct SplatPlan {
    pub resolution: usize,
    /// `N * 8` node indices, `(x * r + y) * r + z`.
    pub nodes: Rc<Vec<usize>>,
    /// `N * 8` weights `(1-|Δx|)(1-|Δy|)(1-|Δz|)`.
    pub weights: Vec<f64>,
    /// Per-node sum of received weights, `r³`.
    pub weight_sums: Vec<f64>,
    /// Lower-corner cell of each point, `(r - 1)³` cells.
    pub cells: Rc<Vec<usize>>,
}

impl SplatPlan {
    pub fn new(points: &[[f64; 3]], r: usize) -> Result<Self> {
        if r < 2 {
            return config(format!("volume resolution must be at least 2, got {r}"));
        }
        let mut nodes = Vec::with_capacity(points.len() * 8);
        let mut weights = Vec::with_capacity(points.len() * 8);
        let mut cells = Vec::with_capacity(points.len());
        let mut weight_sums = vec![0.0; r * r * r];
        for p in points {
            let (ix, fx) = cell_of(to_grid(p[0], r), r);
            let (iy, fy) = cell_of(to_grid(p[1], r), r);
            let (iz, fz) = cell_of(to_grid(p[2], r), r);
            cells.push((ix * (r - 1) + iy) * (r - 1) + iz);
            for corner in 0..8 {
                let (dx, dy, dz) = (corner >> 2 & 1, corner >> 1 & 1, corner & 1);
                let w = (if dx == 1 { fx } else { 1.0 - fx })
                    * (if dy == 1 { fy } else { 1.0 - fy })
                    * (if dz == 1 { fz } else { 1.0 - fz });
                let node = ((ix + dx) * r + iy + dy) * r + iz + dz;
                nodes.push(node);
                weights.push(w);
                weight_sums[node] += w;
            }
        }
        Ok(SplatPlan {
            resolution: r,
            nodes: Rc::new(nodes),
            weights,
            weight_sums,
            cells: Rc::new(cells),
        })
    }

    pub fn num_points(&self) -> usize {
        self.cells.len()
    }

    pub fn num_cells(&self) -> usize {
        (self.resolution - 1).pow(3)
    }
}

/// Unnormalized volume `v_j = Σ w_i f_i`, as `[r³, c]` rows. Gradients reach
/// `feats` only; positions are data.
pub fn splat_to_volume<T: Scalar>(g: &mut Graph<T>, plan: &SplatPlan, feats: Var) -> Result<Var> {
    let s = g.shape(feats).to_vec();
    if s.len() != 2 || s[0] != plan.num_points() {
        return Err(CoreError::Dimension(
            "splat_to_volume",
            format!("features {s:?} for {} points", plan.num_points()),
        ));
    }
    let rep: Rc<Vec<usize>> = Rc::new((0..plan.num_points()).flat_map(|i| std::iter::repeat_n(i, 8)).collect());
    let f8 = g.gather_rows(feats, rep)?;
    let w = Array::new(vec![plan.weights.len(), 1], plan.weights.iter().map(|&v| T::of(v)).collect())?;
    let wf = g.mul_const(f8, w)?;
    let r = plan.resolution;
    Ok(g.scatter_add_rows(wf, plan.nodes.clone(), r * r * r)?)
}

/// Divides each node by its weight sum; nodes with sum ≤ 1e-8 become zero.
pub fn normalize_volume<T: Scalar>(g: &mut Graph<T>, volume: Var, weight_sums: &[f64]) -> Result<Var> {
    let inv: Vec<T> = weight_sums
        .iter()
        .map(|&s| if s > 1e-8 { T::of(1.0 / s) } else { T::zero() })
        .collect();
    let inv = Array::new(vec![weight_sums.len(), 1], inv)?;
    Ok(g.mul_const(volume, inv)?)
}

/// `[r³, c]` rows → `[1, c, r, r, r]` for 3D convolution.
pub fn volume_rows_to_grid<T: Scalar>(g: &mut Graph<T>, rows: Var, r: usize) -> Result<Var> {
    let c = g.shape(rows)[1];
    let t = g.permute(rows, &[1, 0])?;
    Ok(g.reshape(t, &[1, c, r, r, r])?)
}

/// Dense `r × r × r × c` feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume<T> {
    pub resolution: usize,
    pub channels: usize,
    /// `[r, r, r, c]`.
    pub grid: Array<T>,
}

impl<T: Scalar> FeatureVolume<T> {
    pub fn from_rows(rows: &Array<T>, r: usize) -> Result<Self> {
        let c = rows.shape().get(1).copied().unwrap_or(0);
        Ok(FeatureVolume {
            resolution: r,
            channels: c,
            grid: rows.clone().reshape(vec![r, r, r, c])?,
        })
    }
}

/// Intermediate tensors of one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Normalized feature volume `[1, c, r, r, r]`.
    pub volume: Var,
    /// Latent triplanes `[3, c′, r′, r′]` before attention.
    pub latent: Var,
}

/// Graph-side latent distribution, both `[B * 3, c′, r′, r′]`.
#[derive(Debug, Clone, Copy)]
pub struct LatentDistribution {
    pub mu: Var,
    pub log_sigma: Var,
}

pub const LOG_SIGMA_MIN: f64 = -30.0;
pub const LOG_SIGMA_MAX: f64 = 20.0;

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pn: [Linear; 3],
    proj: [Conv3d; 3],
    down: Vec<(ResBlock, Conv2d)>,
    out: Conv2d,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        let stages = cfg.down_stages()?;
        let (c, r) = (cfg.channels, cfg.volume_res);
        let pn = [
            Linear::new("enc.pn0", cfg.embed_dim(), c),
            Linear::new("enc.pn1", 2 * c, c),
            Linear::new("enc.pn2", c, c),
        ];
        let proj = [
            Conv3d::new("enc.proj_xy", c, c, [1, 1, r], [1, 1, r]),
            Conv3d::new("enc.proj_yz", c, c, [r, 1, 1], [r, 1, 1]),
            Conv3d::new("enc.proj_zx", c, c, [1, r, 1], [1, r, 1]),
        ];
        let down = (0..stages)
            .map(|i| {
                (
                    ResBlock::new(&format!("enc.down{i}.res"), c, c, false, None),
                    Conv2d::new(format!("enc.down{i}.conv"), c, c, 3, 2, 1),
                )
            })
            .collect();
        let out = Conv2d::same3("enc.out", c, cfg.latent_channels);
        Ok(Encoder { cfg, pn, proj, down, out })
    }

    pub fn init<T: Scalar>(&self, p: &mut Params<T>, rng: &mut Rng) {
        for l in &self.pn {
            l.init(p, rng);
        }
        for c in &self.proj {
            c.init(p, rng);
        }
        for (res, conv) in &self.down {
            res.init(p, rng);
            conv.init(p, rng);
        }
        self.out.init(p, rng);
    }

    /// Point-wise features `[N, c]`: embedding → layer → local max pool over the
    /// point's grid cell → concat → layer → layer.
    pub fn pointnet_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        pc: &ColoredPointCloud,
        plan: &SplatPlan,
    ) -> Result<Var> {
        if pc.is_empty() {
            return Err(CoreError::Empty("point cloud"));
        }
        let d = self.cfg.embed_dim();
        let mut emb = Vec::with_capacity(pc.len() * d);
        for (p, c) in pc.points.iter().zip(&pc.colors) {
            emb.extend(point_embedding(*p, *c, self.cfg.pe_freqs).into_iter().map(T::of));
        }
        let e = g.constant(Array::new(vec![pc.len(), d], emb)?);
        let h = self.pn[0].forward(g, b, e)?;
        let h = g.silu(h)?;
        let pooled = g.segment_max(h, plan.cells.clone(), plan.num_cells())?;
        let pooled = g.gather_rows(pooled, plan.cells.clone())?;
        let h = g.concat(&[h, pooled], 1)?;
        let h = self.pn[1].forward(g, b, h)?;
        let h = g.silu(h)?;
        self.pn[2].forward(g, b, h)
    }

    /// Normalized volume `[1, c, r, r, r]` → triplanes `[3, c, r, r]`.
    pub fn project_to_triplanes<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, volume: Var) -> Result<Var> {
        let (c, r) = (self.cfg.channels, self.cfg.volume_res);
        let xy = self.proj[0].forward(g, b, volume)?;
        let xy = g.reshape(xy, &[1, c, r, r])?;
        let yz = self.proj[1].forward(g, b, volume)?;
        let yz = g.reshape(yz, &[1, c, r, r])?;
        let xz = self.proj[2].forward(g, b, volume)?;
        let xz = g.reshape(xz, &[1, c, r, r])?;
        let zx = g.permute(xz, &[0, 1, 3, 2])?;
        Ok(g.concat(&[xy, yz, zx], 0)?)
    }

    /// `[ResBlock → stride-2 conv] × log2(r / r′)`, then a 3×3 conv to `c′`.
    pub fn encode_down<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, planes: Var) -> Result<Var> {
        let mut h = planes;
        for (res, conv) in &self.down {
            h = res.forward(g, b, h, None)?;
            h = conv.forward(g, b, h)?;
        }
        self.out.forward(g, b, h)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, pc: &ColoredPointCloud) -> Result<Encoded> {
        let r = self.cfg.volume_res;
        let plan = SplatPlan::new(&pc.points, r)?;
        let feats = self.pointnet_features(g, b, pc, &plan)?;
        self.encode_features(g, b, &plan, feats)
    }

    /// Splat, normalize, project and downsample precomputed point features `[N, c]`.
    pub fn encode_features<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, plan: &SplatPlan, feats: Var) -> Result<Encoded> {
        let r = self.cfg.volume_res;
        let v = splat_to_volume(g, plan, feats)?;
        let vn = normalize_volume(g, v, &plan.weight_sums)?;
        let volume = volume_rows_to_grid(g, vn, r)?;
        let planes = self.project_to_triplanes(g, b, volume)?;
        let latent = self.encode_down(g, b, planes)?;
        Ok(Encoded { volume, latent })
    }
}

/// 1×1 convolution producing `μ` and clamped `log σ`.
#[derive(Debug, Clone)]
pub struct VaeHead {
    conv: Conv2d,
    channels: usize,
}

impl VaeHead {
    pub fn new(latent_channels: usize) -> Self {
        VaeHead {
            conv: Conv2d::new("vae.head", latent_channels, 2 * latent_channels, 1, 1, 0),
            channels: latent_channels,
        }
    }

    /// Fan-in initialization with weights scaled by 0.1.
    pub fn init<T: Scalar>(&self, p: &mut Params<T>, rng: &mut Rng) {
        self.conv.init(p, rng);
        if let Ok(w) = p.get_mut(&format!("{}.w", self.conv.name)) {
            w.data_mut().iter_mut().for_each(|v| *v *= T::of(0.1));
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, planes: Var) -> Result<LatentDistribution> {
        let h = self.conv.forward(g, b, planes)?;
        let mu = g.slice(h, 1, 0, self.channels)?;
        let ls = g.slice(h, 1, self.channels, 2 * self.channels)?;
        let log_sigma = g.clamp(ls, T::of(LOG_SIGMA_MIN), T::of(LOG_SIGMA_MAX))?;
        Ok(LatentDistribution { mu, log_sigma })
    }
}

/// Reparameterized sample `μ + σ ε`, `ε ~ N(0, 1)`.
pub fn sample_latent<T: Scalar>(g: &mut Graph<T>, dist: LatentDistribution, rng: &mut Rng) -> Result<Var> {
    let eps = Array::randn(g.shape(dist.mu).to_vec(), 1.0, rng);
    let sigma = g.exp(dist.log_sigma)?;
    let noise = g.mul_const(sigma, eps)?;
    Ok(g.add(dist.mu, noise)?)
}

/// `D_KL(N(μ, σ) ‖ N(0, 1))` summed over latent dimensions and averaged over
/// the batch (`batch` triplane sets in the leading axis).
pub fn kl_penalty<T: Scalar>(g: &mut Graph<T>, dist: LatentDistribution, batch: usize) -> Result<Var> {
    let mu2 = g.square(dist.mu)?;
    let two_ls = g.scale(dist.log_sigma, T::of(2.0))?;
    let var = g.exp(two_ls)?;
    let t = g.add(mu2, var)?;
    let t = g.sub(t, two_ls)?;
    let t = g.add_scalar(t, -T::one())?;
    let s = g.sum_all(t)?;
    Ok(g.scale(s, T::of(0.5 / batch.max(1) as f64))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_point_gets_full_weight() {
        // r = 5: grid coordinate 2 is world 0.0
        let plan = SplatPlan::new(&[[0.0, 0.0, 0.0]], 5).unwrap();
        let hits: Vec<_> = plan.weights.iter().zip(plan.nodes.iter()).filter(|(w, _)| **w > 0.0).collect();
        assert_eq!(hits.len(), 1);
        assert_eq!(*hits[0].0, 1.0);
        assert_eq!(*hits[0].1, (2 * 5 + 2) * 5 + 2);
    }

    #[test]
    fn cell_center_point_spreads_evenly() {
        // r = 3: grid coordinate 0.5 is world -0.5
        let plan = SplatPlan::new(&[[-0.5, -0.5, -0.5]], 3).unwrap();
        assert!(plan.weights.iter().all(|&w| (w - 0.125).abs() < 1e-15));
    }

    #[test]
    fn boundary_points_clamp_into_grid() {
        let plan = SplatPlan::new(&[[1.0, -1.0, 1.0]], 4).unwrap();
        let s: f64 = plan.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(plan.nodes.iter().all(|&n| n < 64));
    }

    #[test]
    fn resolution_below_two_is_rejected() {
        assert!(SplatPlan::new(&[[0.0; 3]], 1).is_err());
    }

    #[test]
    fn empty_cloud_is_rejected() {
        assert!(matches!(ColoredPointCloud::new(vec![], vec![]), Err(CoreError::Empty(_))));
    }

    #[test]
    fn stage_count_needs_power_of_two_ratio() {
        assert_eq!(stages_between(128, 32).unwrap(), 2);
        assert_eq!(EncoderConfig::paper().down_stages().unwrap(), 2);
        assert!(stages_between(24, 8).is_err());
    }

    #[test]
    fn paper_latent_budget() {
        assert_eq!(EncoderConfig::paper().latent_scalars(), 98_304);
    }

    #[test]
    fn kl_closed_forms() {
        let mut g = Graph::<f64>::new();
        let mu = g.constant(Array::zeros(vec![3, 1, 2, 2]));
        let ls = g.constant(Array::zeros(vec![3, 1, 2, 2]));
        let kl = kl_penalty(&mut g, LatentDistribution { mu, log_sigma: ls }, 1).unwrap();
        assert_eq!(g.value(kl).item(), 0.0);

        let mu = g.constant(Array::ones(vec![1]));
        let ls = g.constant(Array::zeros(vec![1]));
        let kl = kl_penalty(&mut g, LatentDistribution { mu, log_sigma: ls }, 1).unwrap();
        assert!((g.value(kl).item() - 0.5).abs() < 1e-15);
    }
}
