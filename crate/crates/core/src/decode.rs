//! Latent triplanes → high-resolution planes → per-vertex field and surface color.

use std::rc::Rc;

use triplane_tensor::{Array, Graph, Rng, Scalar, Var};

use crate::encode::{cell_of, stages_between, to_grid};
use crate::error::{config, CoreError, Result};
use crate::nn::{Bound, Conv2d, GroupNorm, Mlp, Params};
use crate::triplane::{Plane, ResBlock};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    pub latent_res: usize,
    pub latent_channels: usize,
    /// Decoded plane resolution `R_dec`.
    pub plane_res: usize,
    /// Decoded plane channels `C_dec`.
    pub plane_channels: usize,
    /// Isosurface grid size `G` (cubes per axis).
    pub grid: usize,
    pub head_hidden: usize,
    /// When set, the SDF head predicts a residual on top of `|p| - radius`.
    pub sphere_prior: Option<f64>,
}

impl DecoderConfig {
    pub fn desk() -> Self {
        DecoderConfig {
            latent_res: 4,
            latent_channels: 4,
            plane_res: 16,
            plane_channels: 8,
            grid: 16,
            head_hidden: 32,
            sphere_prior: Some(0.5),
        }
    }

    pub fn paper() -> Self {
        DecoderConfig {
            latent_res: 32,
            latent_channels: 32,
            plane_res: 128,
            plane_channels: 32,
            grid: 90,
            head_hidden: 32,
            sphere_prior: Some(0.5),
        }
    }

    pub fn cell_size(&self) -> f64 {
        2.0 / self.grid as f64
    }

    pub fn num_vertices(&self) -> usize {
        (self.grid + 1).pow(3)
    }
}

/// World position of grid vertex `(i, j, k)` on a `G`-cube grid.
pub fn grid_vertex(i: usize, j: usize, k: usize, grid: usize) -> [f64; 3] {
    let s = 2.0 / grid as f64;
    [-1.0 + s * i as f64, -1.0 + s * j as f64, -1.0 + s * k as f64]
}

/// All `(G + 1)³` grid vertices, index `(i * (G + 1) + j) * (G + 1) + k`.
pub fn grid_vertices(grid: usize) -> Vec<[f64; 3]> {
    let n = grid + 1;
    let mut out = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                out.push(grid_vertex(i, j, k, grid));
            }
        }
    }
    out
}

/// Bilinear lookups of points on three planes: 12 `(row, weight)` taps per
/// point into the `[3 R², C]` row view of `[3, C, R, R]`.
#[derive(Debug, Clone)]
pub struct PlaneTaps {
    pub rows: Rc<Vec<usize>>,
    pub weights: Vec<f64>,
    pub owner: Rc<Vec<usize>>,
    pub num_points: usize,
}

impl PlaneTaps {
    pub fn new(points: &[[f64; 3]], res: usize) -> Result<Self> {
        if res < 2 {
            return config(format!("plane resolution must be at least 2, got {res}"));
        }
        let n = points.len();
        let mut rows = Vec::with_capacity(n * 12);
        let mut weights = Vec::with_capacity(n * 12);
        let mut owner = Vec::with_capacity(n * 12);
        for (pi, p) in points.iter().enumerate() {
            for plane in Plane::ALL {
                let (ra, ca) = plane.axes();
                let (i, fi) = cell_of(to_grid(p[ra], res), res);
                let (j, fj) = cell_of(to_grid(p[ca], res), res);
                let base = plane as usize * res * res;
                for (di, wi) in [(0, 1.0 - fi), (1, fi)] {
                    for (dj, wj) in [(0, 1.0 - fj), (1, fj)] {
                        rows.push(base + (i + di) * res + j + dj);
                        weights.push(wi * wj);
                        owner.push(pi);
                    }
                }
            }
        }
        Ok(PlaneTaps {
            rows: Rc::new(rows),
            weights,
            owner: Rc::new(owner),
            num_points: n,
        })
    }
}

/// Sum of bilinear samples from the three planes `[3, C, R, R]` at each point, `[M, C]`.
pub fn sample_triplane<T: Scalar>(g: &mut Graph<T>, planes: Var, points: &[[f64; 3]]) -> Result<Var> {
    let s = g.shape(planes).to_vec();
    if s.len() != 4 || s[0] != 3 || s[2] != s[3] {
        return Err(CoreError::Dimension("sample_triplane", format!("expected [3, C, R, R], got {s:?}")));
    }
    let (c, r) = (s[1], s[2]);
    let taps = PlaneTaps::new(points, r)?;
    let rows = g.permute(planes, &[0, 2, 3, 1])?;
    let rows = g.reshape(rows, &[3 * r * r, c])?;
    let picked = g.gather_rows(rows, taps.rows.clone())?;
    let w = Array::new(vec![taps.weights.len(), 1], taps.weights.iter().map(|&v| T::of(v)).collect())?;
    let picked = g.mul_const(picked, w)?;
    Ok(g.scatter_add_rows(picked, taps.owner.clone(), taps.num_points)?)
}

/// Graph-side per-vertex field, `(G + 1)³` rows each.
#[derive(Debug, Clone, Copy)]
pub struct FieldVars {
    /// `[V, 1]` in `(-1, 1)`.
    pub sdf: Var,
    /// `[V, 1]`, positive.
    pub weight: Var,
    /// `[V, 3]`, each component bounded by half a cell.
    pub deform: Var,
}

/// Plain-array per-vertex field.
#[derive(Debug, Clone, PartialEq)]
pub struct FlexiField {
    pub grid: usize,
    pub sdf: Vec<f64>,
    pub weight: Vec<f64>,
    pub deform: Vec<[f64; 3]>,
}

impl FlexiField {
    /// Field with unit weights and no deformation.
    pub fn from_sdf(grid: usize, sdf: impl Fn([f64; 3]) -> f64) -> Self {
        let verts = grid_vertices(grid);
        FlexiField {
            grid,
            sdf: verts.iter().map(|&p| sdf(p)).collect(),
            weight: vec![1.0; verts.len()],
            deform: vec![[0.0; 3]; verts.len()],
        }
    }

    pub fn from_vars<T: Scalar>(g: &Graph<T>, f: &FieldVars, grid: usize) -> Self {
        let d = g.value(f.deform).to_f64_vec();
        FlexiField {
            grid,
            sdf: g.value(f.sdf).to_f64_vec(),
            weight: g.value(f.weight).to_f64_vec(),
            deform: d.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        }
    }

    pub fn num_vertices(&self) -> usize {
        (self.grid + 1).pow(3)
    }

    /// Graph constants holding this field.
    pub fn to_vars<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> Result<FieldVars> {
        let n = self.num_vertices();
        let mk = |v: Vec<f64>, w: usize| Array::new(vec![n, w], v.into_iter().map(T::of).collect());
        let sdf = mk(self.sdf.clone(), 1)?;
        let weight = mk(self.weight.clone(), 1)?;
        let deform = mk(self.deform.iter().flatten().copied().collect(), 3)?;
        Ok(if trainable {
            FieldVars {
                sdf: g.param(sdf),
                weight: g.param(weight),
                deform: g.param(deform),
            }
        } else {
            FieldVars {
                sdf: g.constant(sdf),
                weight: g.constant(weight),
                deform: g.constant(deform),
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    conv_in: Conv2d,
    up: Vec<(ResBlock, Conv2d)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    sdf_head: Mlp,
    weight_head: Mlp,
    deform_head: Mlp,
    color_head: Mlp,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        let stages = stages_between(cfg.plane_res, cfg.latent_res)?;
        if cfg.grid < 2 {
            return config(format!("isosurface grid must be at least 2, got {}", cfg.grid));
        }
        let c = cfg.plane_channels;
        let hidden = [cfg.head_hidden, cfg.head_hidden];
        Ok(Decoder {
            conv_in: Conv2d::same3("dec.in", cfg.latent_channels, c),
            up: (0..stages)
                .map(|i| {
                    (
                        ResBlock::new(&format!("dec.up{i}.res"), c, c, false, None),
                        Conv2d::same3(format!("dec.up{i}.conv"), c, c),
                    )
                })
                .collect(),
            norm_out: GroupNorm::new("dec.norm_out", c),
            conv_out: Conv2d::same3("dec.out", c, c),
            sdf_head: Mlp::new("dec.sdf", c, &hidden, 1),
            weight_head: Mlp::new("dec.weight", c, &hidden, 1),
            deform_head: Mlp::new("dec.deform", c, &hidden, 3),
            color_head: Mlp::new("dec.color", c, &hidden, 3),
            cfg,
        })
    }

    pub fn init<T: Scalar>(&self, p: &mut Params<T>, rng: &mut Rng) {
        self.conv_in.init(p, rng);
        for (res, conv) in &self.up {
            res.init(p, rng);
            conv.init(p, rng);
        }
        self.norm_out.init(p);
        self.conv_out.init(p, rng);
        for h in [&self.sdf_head, &self.weight_head, &self.deform_head, &self.color_head] {
            h.init(p, rng);
        }
    }

    /// Zeroes the last plane convolution.
    pub fn zero_output_conv<T: Scalar>(&self, p: &mut Params<T>) {
        self.conv_out.init_zero(p);
    }

    /// Zeroes the last layer of every head.
    pub fn zero_heads<T: Scalar>(&self, p: &mut Params<T>) {
        for h in [&self.sdf_head, &self.weight_head, &self.deform_head, &self.color_head] {
            h.last().init_zero(p);
        }
    }

    /// `[3, c′, r′, r′]` → `[3, C_dec, R_dec, R_dec]`.
    pub fn decode_up<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, latent: Var) -> Result<Var> {
        let s = g.shape(latent).to_vec();
        let (c, r) = (self.cfg.latent_channels, self.cfg.latent_res);
        if s != [3, c, r, r] {
            return Err(CoreError::Dimension("decode_up", format!("expected [3, {c}, {r}, {r}], got {s:?}")));
        }
        let mut h = self.conv_in.forward(g, b, latent)?;
        for (res, conv) in &self.up {
            h = res.forward(g, b, h, None)?;
            h = g.upsample_nearest2d(h, 2)?;
            h = conv.forward(g, b, h)?;
        }
        let h = self.norm_out.forward(g, b, h)?;
        let h = g.silu(h)?;
        self.conv_out.forward(g, b, h)
    }

    /// SDF, weight and deformation at every grid vertex.
    pub fn field_heads<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, planes: Var) -> Result<FieldVars> {
        let verts = grid_vertices(self.cfg.grid);
        let n = verts.len();
        let feats = sample_triplane(g, planes, &verts)?;
        let s = self.sdf_head.forward(g, b, feats)?;
        let s = match self.cfg.sphere_prior {
            Some(radius) => {
                let prior = verts.iter().map(|p| T::of(norm(*p) - radius)).collect();
                g.add_const(s, Array::new(vec![n, 1], prior)?)?
            }
            None => s,
        };
        let sdf = g.tanh(s)?;
        let w = self.weight_head.forward(g, b, feats)?;
        let weight = g.softplus(w)?;
        let d = self.deform_head.forward(g, b, feats)?;
        let d = g.tanh(d)?;
        let deform = g.scale(d, T::of(0.5 * self.cfg.cell_size()))?;
        Ok(FieldVars { sdf, weight, deform })
    }

    /// RGB in `(0, 1)` at each point, `[M, 3]`.
    pub fn color_head<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, planes: Var, points: &[[f64; 3]]) -> Result<Var> {
        let feats = sample_triplane(g, planes, points)?;
        let c = self.color_head.forward(g, b, feats)?;
        Ok(g.sigmoid(c)?)
    }
}

pub(crate) fn norm(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_vertex_spans_cube() {
        assert_eq!(grid_vertex(0, 0, 0, 4), [-1.0; 3]);
        assert_eq!(grid_vertex(4, 2, 4, 4), [1.0, 0.0, 1.0]);
        assert_eq!(grid_vertices(3).len(), 64);
    }

    #[test]
    fn taps_are_convex_per_plane() {
        let taps = PlaneTaps::new(&[[0.3, -0.7, 0.99], [1.0, 1.0, -1.0]], 5).unwrap();
        for chunk in taps.weights.chunks(4) {
            let s: f64 = chunk.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(chunk.iter().all(|&w| w >= 0.0));
        }
        assert!(taps.rows.iter().all(|&r| r < 75));
    }

    #[test]
    fn bad_ratio_is_rejected() {
        let cfg = DecoderConfig {
            plane_res: 12,
            ..DecoderConfig::desk()
        };
        assert!(Decoder::new(cfg).is_err());
    }

    #[test]
    fn paper_profile_upsamples_twice() {
        assert_eq!(stages_between(128, 32).unwrap(), 2);
        assert_eq!(DecoderConfig::paper().grid, 90);
    }
}
