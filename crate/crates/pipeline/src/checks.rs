//! Finite-difference checks of every differentiable path on tiny instances.

use std::time::Instant;

use triplane_core::attend::{windowed_cross_attention, AttentionConfig, AttentionGeometry};
use triplane_core::autoencoder::{Autoencoder, AutoencoderConfig};
use triplane_core::decode::{Decoder, DecoderConfig, FlexiField};
use triplane_core::diffusion::{prior_loss, triplane_loss, PriorConfig, PriorModel, UNet, UNetConfig};
use triplane_core::encode::{ColoredPointCloud, EncoderConfig};
use triplane_core::iso::extract_mesh;
use triplane_core::nn::{Bound, Params};
use triplane_core::render::{render_vars, rendering_loss, Camera, LossWeights, RasterOptions, RenderTarget};
use triplane_tensor::rng::seeded;
use triplane_tensor::{gradcheck, Array, Graph, TensorError, Var};

use crate::error::Result;

/// Relative error bound every path must stay under.
pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub worst: f64,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

fn core_err(e: triplane_core::CoreError) -> TensorError {
    TensorError::Format(e.to_string())
}

/// Worst relative error over every parameter of `params` for the scalar `f`.
fn param_check(params: &Params<f64>, f: impl Fn(&mut Graph<f64>, &Bound) -> triplane_core::Result<Var>) -> Result<f64> {
    let names: Vec<String> = params.iter().map(|(k, _)| k.to_string()).collect();
    let inputs: Vec<Array<f64>> = params.iter().map(|(_, v)| v.clone()).collect();
    let report = gradcheck(
        |g, vars| {
            let b = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            f(g, &b).map_err(core_err)
        },
        &inputs,
        EPS,
    )?;
    Ok(report.worst())
}

/// Replaces every parameter with `N(0, 0.4²)` so zero-initialized layers carry gradient.
fn randomize(p: &mut Params<f64>, seed: u64) {
    let mut rng = seeded(seed);
    for (_, v) in p.iter_mut() {
        *v = Array::randn(v.shape().to_vec(), 0.4, &mut rng);
    }
}

fn tiny_autoencoder(attention: bool) -> AutoencoderConfig {
    AutoencoderConfig {
        encoder: EncoderConfig {
            volume_res: 4,
            channels: 3,
            latent_res: 2,
            latent_channels: 2,
            pe_freqs: 2,
        },
        attention: AttentionConfig {
            volume_res: 4,
            channels: 3,
            downsample: 2,
            latent_res: 2,
            latent_channels: 2,
            head_dim: 2,
        },
        use_attention: attention,
        decoder: DecoderConfig {
            latent_res: 2,
            latent_channels: 2,
            plane_res: 4,
            plane_channels: 3,
            grid: 3,
            head_hidden: 4,
            sphere_prior: Some(0.5),
        },
    }
}

fn tiny_cloud() -> ColoredPointCloud {
    let mut rng = seeded(21);
    let pts = Array::uniform(vec![6, 3], -0.9, 0.9, &mut rng);
    let cols = Array::uniform(vec![6, 3], 0.0, 1.0, &mut rng);
    let rows = |a: &Array<f64>| a.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    ColoredPointCloud::new(rows(&pts), rows(&cols)).expect("non-empty cloud")
}

/// `Σ w ⊙ μ` of the encoder, in every encoder and VAE-head parameter.
fn encoder_to_mu(attention: bool) -> Result<f64> {
    let ae = Autoencoder::new(tiny_autoencoder(attention))?;
    let mut params = ae.init::<f64>(&mut seeded(22));
    randomize(&mut params, 23);
    let pc = tiny_cloud();
    let w = Array::randn(ae.cfg.latent_shape().to_vec(), 1.0, &mut seeded(24));
    param_check(&params, |g, b| {
        let d = ae.encode(g, b, &pc)?;
        let y = g.mul_const(d.mu, w.clone())?;
        Ok(g.sum_all(y)?)
    })
}

/// Windowed attention in its queries, keys and values.
fn attention_inputs() -> Result<f64> {
    let (rl, rv, d, cv) = (2, 3, 2, 2);
    let geom = AttentionGeometry::new(rl, rv, d, cv)?;
    let mut rng = seeded(31);
    let n = rv * rv * rv;
    let inputs = [
        Array::randn(vec![3, d, rl, rl], 1.0, &mut rng),
        Array::randn(vec![n, d], 1.0, &mut rng),
        Array::randn(vec![n, cv], 1.0, &mut rng),
    ];
    let w = Array::randn(vec![3, cv, rl, rl], 1.0, &mut rng);
    let report = gradcheck(
        |g, x| {
            let a = windowed_cross_attention(g, x[0], x[1], x[2], &geom).map_err(core_err)?;
            let y = g.mul_const(a.residual, w.clone())?;
            g.sum_all(y)
        },
        &inputs,
        EPS,
    )?;
    Ok(report.worst())
}

/// Vertex colors of the decoder in its latent and every decoder parameter.
fn decoder_to_color() -> Result<f64> {
    let dec = Decoder::new(tiny_autoencoder(false).decoder)?;
    let mut p = Params::<f64>::new();
    dec.init(&mut p, &mut seeded(41));
    randomize(&mut p, 42);
    let latent = Array::randn(vec![3, 2, 2, 2], 1.0, &mut seeded(43));
    let pts = [[0.3, -0.2, 0.8], [-0.9, 0.1, 0.0], [0.0, 0.5, -0.5]];
    let w = Array::randn(vec![3, 3], 1.0, &mut seeded(44));
    let color = |g: &mut Graph<f64>, b: &Bound, z: Var| -> triplane_core::Result<Var> {
        let planes = dec.decode_up(g, b, z)?;
        let c = dec.color_head(g, b, planes, &pts)?;
        let c = g.mul_const(c, w.clone())?;
        Ok(g.sum_all(c)?)
    };
    let in_latent = gradcheck(
        |g, x| {
            let b = p.bind(g, false);
            color(g, &b, x[0]).map_err(core_err)
        },
        std::slice::from_ref(&latent),
        EPS,
    )?
    .worst();
    let in_params = param_check(&p, |g, b| {
        let z = g.constant(latent.clone());
        color(g, b, z)
    })?;
    Ok(in_latent.max(in_params))
}

/// `L_rgb` of a rasterized sphere in vertex positions and colors.
fn rasterize_to_rgb() -> Result<f64> {
    let mesh = extract_mesh(&FlexiField::from_sdf(6, |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.6))?;
    let n = mesh.vertices.len();
    let v = Array::new(vec![n, 3], mesh.vertices.iter().flatten().copied().collect())?;
    let c = Array::uniform(vec![n, 3], 0.1, 0.9, &mut seeded(51));
    let cam = Camera::new([0.3, 0.4, -2.5], [0.0; 3], [0.0, 1.0, 0.0], 45.0, (12, 12), 0.1, 5.0)?;
    let mut gt = RenderTarget::background(12, 12);
    gt.rgb.iter_mut().for_each(|p| *p = [0.3, 0.5, 0.7]);
    let lambda = LossWeights {
        rgb: 1.0,
        mask: 0.0,
        depth: 0.0,
        kl: 0.0,
    };
    let faces = mesh.faces;
    let report = gradcheck(
        |g, x| {
            let pred = render_vars(g, Some(x[0]), &faces, Some(x[1]), &cam, RasterOptions::default()).map_err(core_err)?;
            Ok(rendering_loss(g, &pred, &gt, None, &lambda).map_err(core_err)?.rgb)
        },
        &[v, c],
        EPS,
    )?;
    Ok(report.worst())
}

/// Prior L1 objective in every prior parameter.
fn prior_objective() -> Result<f64> {
    let model = PriorModel::new(PriorConfig {
        dim: 3,
        width: 4,
        depth: 2,
        shape_scale: 0.25,
        image_scale: 0.85,
    })?;
    let mut params = model.init::<f64>(&mut seeded(61));
    randomize(&mut params, 62);
    let mut rng = seeded(63);
    let x = Array::randn(vec![2, 3], 1.0, &mut rng);
    let e = Array::randn(vec![2, 3], 1.0, &mut rng);
    let target = Array::randn(vec![2, 3], 1.0, &mut rng);
    param_check(&params, |g, b| {
        let (xv, ev, tv) = (g.constant(x.clone()), g.constant(e.clone()), g.constant(target.clone()));
        prior_loss(g, b, &model, xv, &[3, 700], ev, tv)
    })
}

/// Triplane ε objective with mixed condition dropout in every UNet parameter.
fn triplane_objective() -> Result<f64> {
    let model = UNet::new(UNetConfig {
        latent_res: 4,
        latent_channels: 1,
        width: 2,
        levels: 1,
        embed_dim: 2,
    })?;
    let mut params = model.init::<f64>(&mut seeded(71));
    randomize(&mut params, 72);
    let mut rng = seeded(73);
    let z = Array::randn(vec![6, 1, 4, 4], 1.0, &mut rng);
    let es = Array::randn(vec![2, 2], 1.0, &mut rng);
    let ep = Array::randn(vec![2, 2], 1.0, &mut rng);
    let eps = Array::randn(vec![6, 1, 4, 4], 1.0, &mut rng);
    param_check(&params, |g, b| {
        let (zv, sv, pv, nv) = (
            g.constant(z.clone()),
            g.constant(es.clone()),
            g.constant(ep.clone()),
            g.constant(eps.clone()),
        );
        triplane_loss(g, b, &model, zv, &[5, 600], sv, pv, &[true, false], &[false, true], nv)
    })
}

/// Runs every check and reports the worst relative error of each path.
pub fn gradcheck_suite() -> Result<Vec<CheckResult>> {
    type Check = fn() -> Result<f64>;
    let checks: [(&'static str, Check); 6] = [
        ("encoder -> mu", || encoder_to_mu(false)),
        ("attention", || Ok(attention_inputs()?.max(encoder_to_mu(true)?))),
        ("decoder -> color", decoder_to_color),
        ("rasterize -> L_rgb", rasterize_to_rgb),
        ("prior loss", prior_objective),
        ("triplane loss", triplane_objective),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let t = Instant::now();
            let worst = f()?;
            Ok(CheckResult {
                name,
                worst,
                seconds: t.elapsed().as_secs_f64(),
            })
        })
        .collect()
}
