//! Triplane denoising UNet with 3D-aware ResBlocks and cross-attention on the condition embeddings.

use triplane_tensor::{Array, Graph, Rng, Scalar, Var};

use super::ddim::{Denoiser, Prediction};
use super::guidance::{cfg_combine, GuidanceScales};
use super::prior::TimeEmbedding;
use crate::error::{config, CoreError, Result};
use crate::nn::{Bound, Conv2d, GroupNorm, Linear, Params};
use crate::triplane::{ResBlock, TriConv};

pub const NULL_SHAPE: &str = "unet.null_s";
pub const NULL_IMAGE: &str = "unet.null_p";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UNetConfig {
    pub latent_res: usize,
    pub latent_channels: usize,
    pub width: usize,
    /// Number of downsampling levels `L`.
    pub levels: usize,
    /// Dimension `D` of both condition embeddings.
    pub embed_dim: usize,
}

impl UNetConfig {
    pub fn desk() -> Self {
        UNetConfig {
            latent_res: 4,
            latent_channels: 4,
            width: 32,
            levels: 2,
            embed_dim: 64,
        }
    }

    pub fn paper() -> Self {
        UNetConfig {
            latent_res: 32,
            latent_channels: 32,
            width: 192,
            levels: 3,
            embed_dim: 1280,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_res == 0 || self.latent_channels == 0 || self.width == 0 || self.embed_dim == 0 {
            return config("UNet extents must be positive");
        }
        if self.levels >= usize::BITS as usize || !self.latent_res.is_multiple_of(1 << self.levels) {
            return config(format!(
                "latent resolution {} is not divisible by 2^{}",
                self.latent_res, self.levels
            ));
        }
        Ok(())
    }
}

/// Single-head attention from plane features to condition tokens, added back residually.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub norm: GroupNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl CrossAttention {
    pub fn new(name: &str, channels: usize, token_dim: usize) -> Self {
        CrossAttention {
            norm: GroupNorm::new(format!("{name}.norm"), channels),
            query: Linear::new(format!("{name}.q"), channels, channels),
            key: Linear::new(format!("{name}.k"), token_dim, channels),
            value: Linear::new(format!("{name}.v"), token_dim, channels),
            out: Linear::new(format!("{name}.o"), channels, channels),
        }
    }

    pub fn init<T: Scalar>(&self, p: &mut Params<T>, rng: &mut Rng) {
        self.norm.init(p);
        self.query.init(p, rng);
        self.key.init(p, rng);
        self.value.init(p, rng);
        self.out.init(p, rng);
    }

    /// `x: [B * 3, C, R, R]`, `tokens: [B, K, token_dim]` → same shape as `x`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var, tokens: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let ts = g.shape(tokens).to_vec();
        if s.len() != 4 || ts.len() != 3 || s[0] != 3 * ts[0] {
            return Err(CoreError::Dimension("cross_attention", format!("x {s:?}, tokens {ts:?}")));
        }
        let (batch, c, r, k) = (ts[0], s[1], s[2], ts[1]);
        let n = 3 * r * r;
        let h = self.norm.forward(g, b, x)?;
        let h = g.reshape(h, &[batch, 3, c, r * r])?;
        let h = g.permute(h, &[0, 1, 3, 2])?;
        let h = g.reshape(h, &[batch * n, c])?;
        let q = self.query.forward(g, b, h)?;
        let q = g.reshape(q, &[batch, n, c])?;
        let tk = g.reshape(tokens, &[batch * k, ts[2]])?;
        let kk = self.key.forward(g, b, tk)?;
        let kk = g.reshape(kk, &[batch, k, c])?;
        let kt = g.permute(kk, &[0, 2, 1])?;
        let vv = self.value.forward(g, b, tk)?;
        let vv = g.reshape(vv, &[batch, k, c])?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, T::of(1.0 / (c as f64).sqrt()))?;
        let w = g.softmax(scores, 2)?;
        let a = g.bmm(w, vv)?;
        let a = g.reshape(a, &[batch * n, c])?;
        let a = self.out.forward(g, b, a)?;
        let a = g.reshape(a, &[batch, 3, r * r, c])?;
        let a = g.permute(a, &[0, 1, 3, 2])?;
        let a = g.reshape(a, &s)?;
        Ok(g.add(x, a)?)
    }
}

#[derive(Debug, Clone)]
pub struct DownLevel {
    pub res: ResBlock,
    pub attn: CrossAttention,
    pub down: Conv2d,
}

#[derive(Debug, Clone)]
pub struct UpLevel {
    pub up: Conv2d,
    pub res: ResBlock,
    pub attn: CrossAttention,
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub time: TimeEmbedding,
    pub shape_token: Linear,
    pub image_token: Linear,
    pub conv_in: TriConv,
    pub down: Vec<DownLevel>,
    pub mid_res1: ResBlock,
    pub mid_attn: CrossAttention,
    pub mid_res2: ResBlock,
    pub up: Vec<UpLevel>,
    pub norm_out: GroupNorm,
    pub conv_out: Conv2d,
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let (w, d, c) = (cfg.width, cfg.embed_dim, cfg.latent_channels);
        let res = |name: String, cin: usize| ResBlock::new(&name, cin, w, true, Some(w));
        Ok(UNet {
            time: TimeEmbedding::new("unet.time", w),
            shape_token: Linear::new("unet.tok_s", d, w),
            image_token: Linear::new("unet.tok_p", d, w),
            conv_in: TriConv::new("unet.in", c, w, 3),
            down: (0..cfg.levels)
                .map(|i| DownLevel {
                    res: res(format!("unet.down{i}.res"), w),
                    attn: CrossAttention::new(&format!("unet.down{i}.attn"), w, w),
                    down: Conv2d::new(format!("unet.down{i}.conv"), w, w, 3, 2, 1),
                })
                .collect(),
            mid_res1: res("unet.mid.res1".into(), w),
            mid_attn: CrossAttention::new("unet.mid.attn", w, w),
            mid_res2: res("unet.mid.res2".into(), w),
            up: (0..cfg.levels)
                .map(|i| UpLevel {
                    up: Conv2d::same3(format!("unet.up{i}.conv"), w, w),
                    res: res(format!("unet.up{i}.res"), 2 * w),
                    attn: CrossAttention::new(&format!("unet.up{i}.attn"), w, w),
                })
                .collect(),
            norm_out: GroupNorm::new("unet.norm_out", w),
            conv_out: Conv2d::same3("unet.out", w, c),
            cfg,
        })
    }

    /// Random weights, a zero output convolution and null embeddings drawn from N(0, 0.02²).
    pub fn init<T: Scalar>(&self, rng: &mut Rng) -> Params<T> {
        let mut p = Params::new();
        self.time.init(&mut p, rng);
        self.shape_token.init(&mut p, rng);
        self.image_token.init(&mut p, rng);
        self.conv_in.init(&mut p, rng);
        for l in &self.down {
            l.res.init(&mut p, rng);
            l.attn.init(&mut p, rng);
            l.down.init(&mut p, rng);
        }
        self.mid_res1.init(&mut p, rng);
        self.mid_attn.init(&mut p, rng);
        self.mid_res2.init(&mut p, rng);
        for l in &self.up {
            l.up.init(&mut p, rng);
            l.res.init(&mut p, rng);
            l.attn.init(&mut p, rng);
        }
        self.norm_out.init(&mut p);
        self.conv_out.init_zero(&mut p);
        let d = self.cfg.embed_dim;
        p.insert(NULL_SHAPE, Array::randn(vec![d], 0.02, rng));
        p.insert(NULL_IMAGE, Array::randn(vec![d], 0.02, rng));
        p
    }

    /// Condition tokens `[B, 2, W]` from `e_s, e_p: [B, D]`; rows whose keep flag is
    /// false use the learned null embedding instead.
    pub fn condition_tokens<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        e_s: Var,
        e_p: Var,
        keep_shape: &[bool],
        keep_image: &[bool],
    ) -> Result<Var> {
        let d = self.cfg.embed_dim;
        let (ss, ps) = (g.shape(e_s).to_vec(), g.shape(e_p).to_vec());
        let batch = ss.first().copied().unwrap_or(0);
        if ss != [batch, d] || ps != ss || keep_shape.len() != batch || keep_image.len() != batch {
            return Err(CoreError::Dimension(
                "condition_tokens",
                format!(
                    "e_s {ss:?}, e_p {ps:?}, {} / {} keep flags, D = {d}",
                    keep_shape.len(),
                    keep_image.len()
                ),
            ));
        }
        let es = select_condition(g, e_s, b.var(NULL_SHAPE)?, keep_shape)?;
        let ep = select_condition(g, e_p, b.var(NULL_IMAGE)?, keep_image)?;
        let ts = self.shape_token.forward(g, b, es)?;
        let tp = self.image_token.forward(g, b, ep)?;
        let w = self.cfg.width;
        let ts = g.reshape(ts, &[batch, 1, w])?;
        let tp = g.reshape(tp, &[batch, 1, w])?;
        Ok(g.concat(&[ts, tp], 1)?)
    }

    /// Time embedding plus the sum of the condition tokens, `[B, W]`.
    pub fn conditioned_embedding<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, ts: &[usize], tokens: Var) -> Result<Var> {
        let temb = self.time.forward(g, b, ts)?;
        let pooled = g.sum_axis(tokens, 1, false)?;
        Ok(g.add(temb, pooled)?)
    }

    /// `z_t: [B * 3, c′, r′, r′]` → predicted noise of the same shape.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        z_t: Var,
        ts: &[usize],
        e_s: Var,
        e_p: Var,
        keep_shape: &[bool],
        keep_image: &[bool],
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let s = g.shape(z_t).to_vec();
        let r = cfg.latent_res;
        if s != [3 * ts.len(), cfg.latent_channels, r, r] {
            return Err(CoreError::Dimension(
                "triplane_denoiser",
                format!("z_t {s:?} with {} timesteps, expected planes of {} x {r} x {r}", ts.len(), cfg.latent_channels),
            ));
        }
        let tokens = self.condition_tokens(g, b, e_s, e_p, keep_shape, keep_image)?;
        let temb = self.conditioned_embedding(g, b, ts, tokens)?;
        let mut h = self.conv_in.forward(g, b, z_t)?;
        let mut skips = Vec::with_capacity(cfg.levels);
        for l in &self.down {
            h = l.res.forward(g, b, h, Some(temb))?;
            h = l.attn.forward(g, b, h, tokens)?;
            skips.push(h);
            h = l.down.forward(g, b, h)?;
        }
        h = self.mid_res1.forward(g, b, h, Some(temb))?;
        h = self.mid_attn.forward(g, b, h, tokens)?;
        h = self.mid_res2.forward(g, b, h, Some(temb))?;
        for l in self.up.iter().rev() {
            let skip = skips.pop().expect("skip per level");
            h = g.upsample_nearest2d(h, 2)?;
            h = l.up.forward(g, b, h)?;
            h = g.concat(&[h, skip], 1)?;
            h = l.res.forward(g, b, h, Some(temb))?;
            h = l.attn.forward(g, b, h, tokens)?;
        }
        h = self.norm_out.forward(g, b, h)?;
        h = g.silu(h)?;
        self.conv_out.forward(g, b, h)
    }
}

/// `keep ? e : null` per row, with `e: [B, D]` and `null: [D]`.
pub fn select_condition<T: Scalar>(g: &mut Graph<T>, e: Var, null: Var, keep: &[bool]) -> Result<Var> {
    let n = keep.len();
    let mask: Array<T> = Array::from_fn(vec![n, 1], |i| T::of(if keep[i] { 1.0 } else { 0.0 }));
    let inv = mask.map(|m| T::of(1.0) - m);
    let kept = g.mul_const(e, mask)?;
    let inv = g.constant(inv);
    let nulls = g.mul(null, inv)?;
    Ok(g.add(kept, nulls)?)
}

/// Dual-guided noise prediction for a single triplane latent `[3, c′, r′, r′]`.
pub struct GuidedDenoiser<'a> {
    pub model: &'a UNet,
    pub params: &'a Params<f64>,
    /// Shape embedding `[1, D]`.
    pub shape: Array<f64>,
    /// Image embedding `[1, D]`.
    pub image: Array<f64>,
    pub scales: GuidanceScales,
}

impl GuidedDenoiser<'_> {
    /// Noise predictions for the `(∅_s, ∅_p)`, `(∅_s, e_p)` and `(e_s, e_p)` conditions.
    pub fn branches(&self, x_t: &Array<f64>, t: usize) -> Result<[Array<f64>; 3]> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let x3 = g.concat(&[x, x, x], 0)?;
        let es = g.constant(self.shape.clone());
        let es = g.concat(&[es, es, es], 0)?;
        let ep = g.constant(self.image.clone());
        let ep = g.concat(&[ep, ep, ep], 0)?;
        let y = self
            .model
            .forward(&mut g, &b, x3, &[t; 3], es, ep, &[false, false, true], &[false, true, true])?;
        let y = g.value(y);
        let n = x_t.data().len();
        let part = |i: usize| Array::new(x_t.shape().to_vec(), y.data()[i * n..(i + 1) * n].to_vec());
        Ok([part(0)?, part(1)?, part(2)?])
    }
}

impl Denoiser for GuidedDenoiser<'_> {
    fn prediction(&self) -> Prediction {
        Prediction::Epsilon
    }

    fn predict(&self, x_t: &Array<f64>, t: usize) -> Result<Array<f64>> {
        let [u, i, f] = self.branches(x_t, t)?;
        cfg_combine(&u, &i, &f, &self.scales)
    }
}
