//! Encoder, attention, VAE head and decoder assembled into the stage-1 model.

use triplane_tensor::{Array, Graph, Rng, Scalar, Var};

use crate::attend::{AttentionConfig, VolumeAttention};
use crate::decode::{Decoder, DecoderConfig, FieldVars, FlexiField};
use crate::encode::{kl_penalty, sample_latent, ColoredPointCloud, Encoder, EncoderConfig, LatentDistribution, VaeHead};
use crate::error::{config, Result};
use crate::iso::{extract_mesh_vars, MeshVars, SurfaceMesh};
use crate::nn::{Bound, Params};
use crate::render::{render_vars, rendering_loss, Camera, LossWeights, RasterOptions, RenderTarget};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AutoencoderConfig {
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub use_attention: bool,
    pub decoder: DecoderConfig,
}

impl AutoencoderConfig {
    pub fn desk() -> Self {
        AutoencoderConfig {
            encoder: EncoderConfig::desk(),
            attention: AttentionConfig {
                volume_res: 16,
                channels: 8,
                downsample: 2,
                latent_res: 4,
                latent_channels: 4,
                head_dim: 4,
            },
            use_attention: true,
            decoder: DecoderConfig::desk(),
        }
    }

    pub fn paper() -> Self {
        AutoencoderConfig {
            encoder: EncoderConfig::paper(),
            attention: AttentionConfig {
                volume_res: 128,
                channels: 32,
                downsample: 4,
                latent_res: 32,
                latent_channels: 32,
                head_dim: 32,
            },
            use_attention: true,
            decoder: DecoderConfig::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (e, a, d) = (&self.encoder, &self.attention, &self.decoder);
        if a.volume_res != e.volume_res || a.channels != e.channels {
            return config("attention volume must match the encoder volume");
        }
        if a.latent_res != e.latent_res || a.latent_channels != e.latent_channels {
            return config("attention latent must match the encoder latent");
        }
        if d.latent_res != e.latent_res || d.latent_channels != e.latent_channels {
            return config("decoder latent must match the encoder latent");
        }
        Ok(())
    }

    /// Latent shape `[3, c′, r′, r′]`.
    pub fn latent_shape(&self) -> [usize; 4] {
        let e = &self.encoder;
        [3, e.latent_channels, e.latent_res, e.latent_res]
    }
}

/// Graph values of one decoded shape.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub planes: Var,
    pub field: FieldVars,
    pub mesh: MeshVars,
    /// `[M, 3]` colors at the mesh vertices.
    pub colors: Option<Var>,
}

/// Per-view-averaged stage-1 loss.
#[derive(Debug, Clone, Copy)]
pub struct Stage1Terms {
    pub total: Var,
    pub rgb: f64,
    pub mask: f64,
    pub depth: f64,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub cfg: AutoencoderConfig,
    pub encoder: Encoder,
    pub attention: Option<VolumeAttention>,
    pub head: VaeHead,
    pub decoder: Decoder,
}

impl Autoencoder {
    pub fn new(cfg: AutoencoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Autoencoder {
            encoder: Encoder::new(cfg.encoder.clone())?,
            attention: if cfg.use_attention {
                Some(VolumeAttention::new(cfg.attention.clone())?)
            } else {
                None
            },
            head: VaeHead::new(cfg.encoder.latent_channels),
            decoder: Decoder::new(cfg.decoder.clone())?,
            cfg,
        })
    }

    pub fn init<T: Scalar>(&self, rng: &mut Rng) -> Params<T> {
        let mut p = Params::new();
        self.encoder.init(&mut p, rng);
        if let Some(a) = &self.attention {
            a.init(&mut p, rng);
        }
        self.head.init(&mut p, rng);
        self.decoder.init(&mut p, rng);
        p
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, pc: &ColoredPointCloud) -> Result<LatentDistribution> {
        let enc = self.encoder.forward(g, b, pc)?;
        let latent = match &self.attention {
            Some(a) => a.forward(g, b, enc.latent, enc.volume)?,
            None => enc.latent,
        };
        self.head.forward(g, b, latent)
    }

    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, latent: Var) -> Result<Decoded> {
        let planes = self.decoder.decode_up(g, b, latent)?;
        let field = self.decoder.field_heads(g, b, planes)?;
        let mesh = extract_mesh_vars(g, &field, self.cfg.decoder.grid)?;
        let colors = match mesh.vertices {
            Some(v) => {
                let pts: Vec<[f64; 3]> =
                    g.value(v).to_f64_vec().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
                Some(self.decoder.color_head(g, b, planes, &pts)?)
            }
            None => None,
        };
        Ok(Decoded {
            planes,
            field,
            mesh,
            colors,
        })
    }

    /// Reparameterized encode, decode and render against every view.
    pub fn stage1_loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        pc: &ColoredPointCloud,
        views: &[(Camera, RenderTarget)],
        lambda: &LossWeights,
        rng: &mut Rng,
    ) -> Result<Stage1Terms> {
        if views.is_empty() {
            return config("stage-1 loss needs at least one view");
        }
        let dist = self.encode(g, b, pc)?;
        let z = sample_latent(g, dist, rng)?;
        let dec = self.decode(g, b, z)?;
        let image_only = LossWeights { kl: 0.0, ..*lambda };
        let mut total = None;
        let (mut rgb, mut mask, mut depth) = (0.0, 0.0, 0.0);
        for (cam, gt) in views {
            let pred = render_vars(g, dec.mesh.vertices, &dec.mesh.faces, dec.colors, cam, RasterOptions::default())?;
            let l = rendering_loss(g, &pred, gt, None, &image_only)?;
            rgb += g.value(l.rgb).item().as_f64();
            mask += g.value(l.mask).item().as_f64();
            depth += g.value(l.depth).item().as_f64();
            total = Some(match total {
                Some(t) => g.add(t, l.total)?,
                None => l.total,
            });
        }
        let n = views.len() as f64;
        let total = g.scale(total.expect("non-empty views"), T::of(1.0 / n))?;
        let kl = kl_penalty(g, dist, 1)?;
        let klw = g.scale(kl, T::of(lambda.kl))?;
        let total = g.add(total, klw)?;
        Ok(Stage1Terms {
            total,
            rgb: rgb / n,
            mask: mask / n,
            depth: depth / n,
            kl: g.value(kl).item().as_f64(),
        })
    }

    /// Encoder mean `μ` as `[3, c′, r′, r′]`.
    pub fn mean_latent(&self, params: &Params<f64>, pc: &ColoredPointCloud) -> Result<Array<f64>> {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let dist = self.encode(&mut g, &b, pc)?;
        Ok(g.value(dist.mu).clone())
    }

    /// Decoded field of a latent `[3, c′, r′, r′]`.
    pub fn field(&self, params: &Params<f64>, latent: &Array<f64>) -> Result<FlexiField> {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let z = g.constant(latent.clone());
        let planes = self.decoder.decode_up(&mut g, &b, z)?;
        let f = self.decoder.field_heads(&mut g, &b, planes)?;
        Ok(FlexiField::from_vars(&g, &f, self.cfg.decoder.grid))
    }

    /// Colored mesh of a latent `[3, c′, r′, r′]`.
    pub fn reconstruct(&self, params: &Params<f64>, latent: &Array<f64>) -> Result<SurfaceMesh> {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let z = g.constant(latent.clone());
        let dec = self.decode(&mut g, &b, z)?;
        let mut mesh = dec.mesh.to_mesh(&g);
        if let Some(c) = dec.colors {
            mesh.colors = Some(g.value(c).to_f64_vec().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect());
        }
        Ok(mesh)
    }
}
