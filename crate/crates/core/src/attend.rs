//! Windowed cross-attention from triplane latents into a downsampled feature volume.

use std::rc::Rc;

use triplane_tensor::{Array, Graph, Rng, Scalar, Var};

use crate::error::{config, CoreError, Result};
use crate::nn::{Bound, Conv3d, Params};
use crate::triplane::{Plane, TriConv};

/// Window layout linking an `r′ × r′` latent plane to an `r″³` volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionGeometry {
    pub latent_res: usize,
    pub volume_res: usize,
    /// Window side `m = round(r″ / r′)`, at least 1.
    pub m: usize,
    pub head_dim: usize,
    pub value_channels: usize,
}

impl AttentionGeometry {
    pub fn new(latent_res: usize, volume_res: usize, head_dim: usize, value_channels: usize) -> Result<Self> {
        if latent_res == 0 || volume_res == 0 || head_dim == 0 || value_channels == 0 {
            return config("attention geometry extents must be positive");
        }
        let m = ((volume_res as f64 / latent_res as f64).round() as usize).clamp(1, volume_res);
        Ok(AttentionGeometry {
            latent_res,
            volume_res,
            m,
            head_dim,
            value_channels,
        })
    }

    /// First volume index of the window for latent index `i`.
    pub fn window_start(&self, i: usize) -> usize {
        let s = (i as f64 * self.volume_res as f64 / self.latent_res as f64).round() as usize;
        s.min(self.volume_res - self.m)
    }

    pub fn tokens_per_query(&self) -> usize {
        self.m * self.m * self.volume_res
    }

    pub fn num_queries(&self) -> usize {
        3 * self.latent_res * self.latent_res
    }

    /// Voxel indices `(x * r″ + y) * r″ + z` attended by query `(i, j)` of a plane.
    /// The plane's two axes are windowed, the third spans the whole volume.
    pub fn window(&self, plane: Plane, i: usize, j: usize) -> Vec<usize> {
        let r = self.volume_res;
        let (si, sj) = (self.window_start(i), self.window_start(j));
        let mut out = Vec::with_capacity(self.tokens_per_query());
        for a in si..si + self.m {
            for bb in sj..sj + self.m {
                for f in 0..r {
                    let (x, y, z) = match plane {
                        Plane::Xy => (a, bb, f),
                        Plane::Yz => (f, a, bb),
                        Plane::Zx => (bb, f, a),
                    };
                    out.push((x * r + y) * r + z);
                }
            }
        }
        out
    }

    /// Concatenated windows of all queries in `(plane, i, j)` order.
    pub fn all_windows(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_queries() * self.tokens_per_query());
        for plane in Plane::ALL {
            for i in 0..self.latent_res {
                for j in 0..self.latent_res {
                    out.extend(self.window(plane, i, j));
                }
            }
        }
        out
    }
}

/// Attention output and the per-query weights `[3 r′², 1, m² r″]`.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub residual: Var,
    pub weights: Var,
}

/// `q: [3, d, r′, r′]`, `k: [r″³, d]`, `v: [r″³, c′]` → residual planes `[3, c′, r′, r′]`.
pub fn windowed_cross_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    geom: &AttentionGeometry,
) -> Result<Attended> {
    let (rl, rv, d, cv) = (geom.latent_res, geom.volume_res, geom.head_dim, geom.value_channels);
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs != [3, d, rl, rl] || ks != [rv * rv * rv, d] || vs != [rv * rv * rv, cv] {
        return Err(CoreError::Dimension(
            "windowed_cross_attention",
            format!("q {qs:?}, k {ks:?}, v {vs:?} do not fit {geom:?}"),
        ));
    }
    let (nq, nt) = (geom.num_queries(), geom.tokens_per_query());
    let idx = Rc::new(geom.all_windows());
    let qr = g.permute(q, &[0, 2, 3, 1])?;
    let qr = g.reshape(qr, &[nq, 1, d])?;
    let kw = g.gather_rows(k, idx.clone())?;
    let kw = g.reshape(kw, &[nq, nt, d])?;
    let kt = g.permute(kw, &[0, 2, 1])?;
    let scores = g.bmm(qr, kt)?;
    let scores = g.scale(scores, T::of(1.0 / (d as f64).sqrt()))?;
    let weights = g.softmax(scores, 2)?;
    let vw = g.gather_rows(v, idx)?;
    let vw = g.reshape(vw, &[nq, nt, cv])?;
    let out = g.bmm(weights, vw)?;
    let out = g.reshape(out, &[3, rl, rl, cv])?;
    let residual = g.permute(out, &[0, 3, 1, 2])?;
    Ok(Attended { residual, weights })
}

/// `T^e = T^l + A`.
pub fn enhance_latent<T: Scalar>(g: &mut Graph<T>, latent: Var, residual: Var) -> Result<Var> {
    if g.shape(latent) != g.shape(residual) {
        return Err(CoreError::Dimension(
            "enhance_latent",
            format!("{:?} vs {:?}", g.shape(latent), g.shape(residual)),
        ));
    }
    Ok(g.add(latent, residual)?)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    /// Input volume resolution `r`.
    pub volume_res: usize,
    /// Input volume channels `c`; the downsampled volume keeps `c″ = c`.
    pub channels: usize,
    /// Downsampling factor `o`, giving `r″ = r / o`.
    pub downsample: usize,
    pub latent_res: usize,
    pub latent_channels: usize,
    /// Query/key width `d`.
    pub head_dim: usize,
}

impl AttentionConfig {
    pub fn attended_res(&self) -> Result<usize> {
        if self.downsample == 0 || !self.volume_res.is_multiple_of(self.downsample) {
            return config(format!(
                "volume resolution {} is not divisible by {}",
                self.volume_res, self.downsample
            ));
        }
        Ok(self.volume_res / self.downsample)
    }
}

/// Downsampling conv, learned position table, Q/K/V projections.
#[derive(Debug, Clone)]
pub struct VolumeAttention {
    pub cfg: AttentionConfig,
    pub geom: AttentionGeometry,
    down: Conv3d,
    key: Conv3d,
    value: Conv3d,
    query: TriConv,
}

pub const POS_NAME: &str = "attn.pos";

impl VolumeAttention {
    pub fn new(cfg: AttentionConfig) -> Result<Self> {
        let rv = cfg.attended_res()?;
        let geom = AttentionGeometry::new(cfg.latent_res, rv, cfg.head_dim, cfg.latent_channels)?;
        let (c, o) = (cfg.channels, cfg.downsample);
        Ok(VolumeAttention {
            down: Conv3d::new("attn.down", c, c, [o; 3], [o; 3]),
            key: Conv3d::new("attn.k", c, cfg.head_dim, [1; 3], [1; 3]),
            value: Conv3d::new("attn.v", c, cfg.latent_channels, [1; 3], [1; 3]),
            query: TriConv::new("attn.q", cfg.latent_channels, cfg.head_dim, 1),
            geom,
            cfg,
        })
    }

    pub fn init<T: Scalar>(&self, p: &mut Params<T>, rng: &mut Rng) {
        self.down.init(p, rng);
        self.key.init(p, rng);
        self.value.init(p, rng);
        self.query.init(p, rng);
        let rv = self.geom.volume_res;
        p.insert(POS_NAME, Array::randn(vec![self.cfg.channels, rv * rv * rv], 0.02, rng));
    }

    /// `[1, c, r, r, r]` → `[1, c, r″, r″, r″]`.
    pub fn downsample_volume<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, volume: Var) -> Result<Var> {
        self.down.forward(g, b, volume)
    }

    /// Queries `[3, d, r′, r′]`, keys `[r″³, d]`, values `[r″³, c′]`.
    pub fn make_qkv<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        latent: Var,
        small_volume: Var,
    ) -> Result<(Var, Var, Var)> {
        let rv = self.geom.volume_res;
        let n = rv * rv * rv;
        let pos = b.var(POS_NAME)?;
        let pos = g.reshape(pos, &[1, self.cfg.channels, rv, rv, rv])?;
        let kv_in = g.add(small_volume, pos)?;
        let to_rows = |g: &mut Graph<T>, x: Var, ch: usize| -> Result<Var> {
            let x = g.reshape(x, &[ch, n])?;
            Ok(g.permute(x, &[1, 0])?)
        };
        let k = self.key.forward(g, b, kv_in)?;
        let k = to_rows(g, k, self.cfg.head_dim)?;
        let v = self.value.forward(g, b, kv_in)?;
        let v = to_rows(g, v, self.cfg.latent_channels)?;
        let q = self.query.forward(g, b, latent)?;
        Ok((q, k, v))
    }

    /// `T^e = T^l + A(T^l, V)` with `volume: [1, c, r, r, r]`, `latent: [3, c′, r′, r′]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, latent: Var, volume: Var) -> Result<Var> {
        let small = self.downsample_volume(g, b, volume)?;
        let (q, k, v) = self.make_qkv(g, b, latent, small)?;
        let a = windowed_cross_attention(g, q, k, v, &self.geom)?;
        enhance_latent(g, latent, a.residual)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_window_is_single_column() {
        let geom = AttentionGeometry::new(32, 32, 32, 32).unwrap();
        assert_eq!(geom.m, 1);
        assert_eq!(geom.tokens_per_query(), 32);
    }

    #[test]
    fn windows_stay_inside_volume() {
        for rl in 1..=4 {
            for rv in 1..=9 {
                let geom = AttentionGeometry::new(rl, rv, 1, 1).unwrap();
                for i in 0..rl {
                    assert!(geom.window_start(i) + geom.m <= rv);
                }
                assert!(geom.all_windows().iter().all(|&v| v < rv * rv * rv));
            }
        }
    }

    #[test]
    fn indivisible_downsample_is_rejected() {
        let cfg = AttentionConfig {
            volume_res: 10,
            channels: 2,
            downsample: 4,
            latent_res: 2,
            latent_channels: 2,
            head_dim: 2,
        };
        assert!(VolumeAttention::new(cfg).is_err());
    }

    #[test]
    fn enhance_rejects_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Array::zeros(vec![3, 2, 2, 2]));
        let b = g.constant(Array::zeros(vec![3, 2, 3, 3]));
        assert!(enhance_latent(&mut g, a, b).is_err());
    }
}
