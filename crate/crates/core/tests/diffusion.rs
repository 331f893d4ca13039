use triplane_core::diffusion::*;
use triplane_core::nn::{Bound, Params};
use triplane_core::optim::AdamW;
use triplane_core::Result;
use triplane_tensor::rng::seeded;
use triplane_tensor::{gradcheck, Array, Graph, TensorError, Var};

/// Returns the exact noise that corrupted a known clean sample.
struct EpsOracle<'a> {
    sched: &'a NoiseSchedule,
    x0: Array<f64>,
}

impl Denoiser for EpsOracle<'_> {
    fn prediction(&self) -> Prediction {
        Prediction::Epsilon
    }

    fn predict(&self, x_t: &Array<f64>, t: usize) -> Result<Array<f64>> {
        let a = self.sched.alpha_bar(t);
        Ok(x_t.zip_map(&self.x0, |x, x0| (x - a.sqrt() * x0) / (1.0 - a).sqrt()))
    }
}

struct SampleOracle {
    x0: Array<f64>,
}

impl Denoiser for SampleOracle {
    fn prediction(&self) -> Prediction {
        Prediction::Sample
    }

    fn predict(&self, _x_t: &Array<f64>, _t: usize) -> Result<Array<f64>> {
        Ok(self.x0.clone())
    }
}

fn round_trip(steps: usize, seed: u64) -> f64 {
    let sched = NoiseSchedule::standard();
    let mut rng = seeded(seed);
    let x0 = Array::randn(vec![3, 4, 4, 4], 1.0, &mut rng);
    let (x_t, _) = sched.forward_diffuse(&x0, sched.steps(), &mut rng).unwrap();
    let oracle = EpsOracle { sched: &sched, x0: x0.clone() };
    let out = ddim_sample_from(&oracle, &sched, x_t, steps).unwrap();
    out.max_abs_diff(&x0)
}

#[test]
fn ddim_with_exact_noise_oracle_recovers_clean_sample() {
    for steps in [1, 50, 1000] {
        let err = round_trip(steps, 7 + steps as u64);
        assert!(err < 1e-6, "{steps} steps: {err}");
    }
}

#[test]
fn ddim_with_sample_oracle_recovers_clean_sample() {
    let sched = NoiseSchedule::linear(200, 1e-3, 0.05).unwrap();
    let mut rng = seeded(2);
    let x0 = Array::randn(vec![10], 1.0, &mut rng);
    let oracle = SampleOracle { x0: x0.clone() };
    let out = ddim_sample(&oracle, &sched, &[10], 20, &mut rng).unwrap();
    assert!(out.max_abs_diff(&x0) < 1e-12);
}

#[test]
fn ddim_is_deterministic_and_bounds_steps() {
    let sched = NoiseSchedule::standard();
    let oracle = SampleOracle { x0: Array::zeros(vec![4]) };
    let a = ddim_sample(&oracle, &sched, &[4], 50, &mut seeded(9)).unwrap();
    let b = ddim_sample(&oracle, &sched, &[4], 50, &mut seeded(9)).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(ddim_sample(&oracle, &sched, &[4], 1001, &mut seeded(9)).is_err());
    assert_eq!(ddim_timesteps(1000, 50).unwrap().len(), 50);
}

#[test]
fn alpha_bar_matches_direct_product() {
    let sched = NoiseSchedule::standard();
    for t in [1, 2, 10, 500, 1000] {
        let direct: f64 = (1..=t).map(|i| 1.0 - sched.beta(i)).product();
        assert!((direct - sched.alpha_bar(t)).abs() < 1e-12);
    }
}

#[test]
fn forward_diffusion_returns_its_noise_and_has_expected_variance() {
    let sched = NoiseSchedule::standard();
    let mut rng = seeded(11);
    let t = 300;
    let a = sched.alpha_bar(t);
    let x0 = Array::from_fn(vec![10_000], |i| if i % 2 == 0 { 1.5 } else { -1.5 });
    let (x_t, eps) = sched.forward_diffuse(&x0, t, &mut rng).unwrap();
    let back = x_t.zip_map(&x0, |x, x0| (x - a.sqrt() * x0) / (1.0 - a).sqrt());
    assert!(back.max_abs_diff(&eps) < 1e-12);
    let n = x_t.len() as f64;
    let mean = x_t.data().iter().sum::<f64>() / n;
    let var = x_t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let expected = a * 2.25 + (1.0 - a);
    assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    assert!(sched.forward_diffuse(&x0, 0, &mut rng).is_err());
    assert!(sched.forward_diffuse(&x0, 1001, &mut rng).is_err());
}

#[test]
fn guidance_reduces_exactly_and_is_affine() {
    let mut rng = seeded(5);
    let u = Array::randn(vec![3, 2, 2, 2], 1.0, &mut rng);
    let i = Array::randn(vec![3, 2, 2, 2], 1.0, &mut rng);
    let f = Array::randn(vec![3, 2, 2, 2], 1.0, &mut rng);
    let one = GuidanceScales { shape: 1.0, image: 1.0 };
    let zero = GuidanceScales { shape: 0.0, image: 0.0 };
    assert_eq!(cfg_combine(&u, &i, &f, &one).unwrap().data(), f.data());
    assert_eq!(cfg_combine(&u, &i, &f, &zero).unwrap().data(), u.data());
    let s = GuidanceScales::default();
    assert_eq!((s.shape, s.image), (1.0, 5.0));
    let out = cfg_combine(&u, &i, &f, &s).unwrap();
    for k in 0..u.len() {
        let (uu, ii, ff) = (u.data()[k], i.data()[k], f.data()[k]);
        let direct = uu + 5.0 * (ii - uu) + (ff - ii);
        assert!((out.data()[k] - direct).abs() < 1e-12);
    }
    let k = 2.5;
    let scaled = cfg_combine(&u.map(|v| k * v), &i.map(|v| k * v), &f.map(|v| k * v), &s).unwrap();
    assert!(scaled.max_abs_diff(&out.map(|v| k * v)) < 1e-12);
    assert!(cfg_combine(&u, &i, &Array::zeros(vec![2]), &s).is_err());
}

fn tiny_prior() -> PriorModel {
    PriorModel::new(PriorConfig {
        dim: 3,
        width: 4,
        depth: 2,
        shape_scale: 0.25,
        image_scale: 0.85,
    })
    .unwrap()
}

fn randomize_all(p: &mut Params<f64>, seed: u64) {
    let mut rng = seeded(seed);
    for (_, v) in p.iter_mut() {
        *v = Array::randn(v.shape().to_vec(), 0.4, &mut rng);
    }
}

#[test]
fn prior_is_identity_at_init_and_deterministic() {
    let model = PriorModel::new(PriorConfig::desk()).unwrap();
    let mut rng = seeded(1);
    let params = model.init::<f64>(&mut rng);
    let x = Array::randn(vec![2, 64], 1.0, &mut rng);
    let e = Array::randn(vec![2, 64], 1.0, &mut rng);
    let run = || {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let ev = g.constant(e.clone());
        let y = model.forward(&mut g, &b, xv, &[10, 900], ev).unwrap();
        g.value(y).clone()
    };
    let y = run();
    assert!(y.max_abs_diff(&x) == 0.0);
    assert_eq!(y.data(), run().data());
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let bad = g.constant(Array::zeros(vec![2, 63]));
    assert!(model.forward(&mut g, &b, xv, &[1, 2], bad).is_err());
}

#[test]
fn prior_loss_matches_hand_computed_l1() {
    let model = tiny_prior();
    let mut params = model.init::<f64>(&mut seeded(3));
    randomize_all(&mut params, 4);
    let mut rng = seeded(5);
    let x = Array::randn(vec![2, 3], 1.0, &mut rng);
    let e = Array::randn(vec![2, 3], 1.0, &mut rng);
    let target = Array::randn(vec![2, 3], 1.0, &mut rng);
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let (xv, ev, tv) = (g.constant(x.clone()), g.constant(e.clone()), g.constant(target.clone()));
    let pred = model.forward(&mut g, &b, xv, &[4, 40], ev).unwrap();
    let pred = g.value(pred).clone();
    let loss = prior_loss(&mut g, &b, &model, xv, &[4, 40], ev, tv).unwrap();
    let hand = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t).abs()).sum::<f64>() / 6.0;
    assert!((g.value(loss).item() - hand).abs() < 1e-14);
}

#[test]
fn zero_model_on_zero_target_has_zero_loss() {
    let model = tiny_prior();
    let params = model.init::<f64>(&mut seeded(3));
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let z = g.constant(Array::zeros(vec![2, 3]));
    let loss = prior_loss(&mut g, &b, &model, z, &[1, 2], z, z).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
}

fn param_gradcheck(params: &Params<f64>, f: impl Fn(&mut Graph<f64>, &Bound) -> Result<Var>) -> f64 {
    let names: Vec<String> = params.iter().map(|(k, _)| k.to_string()).collect();
    let inputs: Vec<Array<f64>> = params.iter().map(|(_, v)| v.clone()).collect();
    let report = gradcheck(
        |g, vars| {
            let b = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            f(g, &b).map_err(|e| TensorError::Format(e.to_string()))
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    for (n, e) in names.iter().zip(&report.max_rel_err) {
        if *e > 1e-4 {
            eprintln!("gradcheck {n}: {e}");
        }
    }
    report.worst()
}

#[test]
fn prior_loss_passes_gradcheck() {
    let model = tiny_prior();
    let mut params = model.init::<f64>(&mut seeded(3));
    randomize_all(&mut params, 6);
    let mut rng = seeded(7);
    let x = Array::randn(vec![2, 3], 1.0, &mut rng);
    let e = Array::randn(vec![2, 3], 1.0, &mut rng);
    let target = Array::randn(vec![2, 3], 1.0, &mut rng);
    let worst = param_gradcheck(&params, |g, b| {
        let (xv, ev, tv) = (g.constant(x.clone()), g.constant(e.clone()), g.constant(target.clone()));
        prior_loss(g, b, &model, xv, &[3, 700], ev, tv)
    });
    assert!(worst < 1e-4, "{worst}");
}

fn tiny_unet() -> UNet {
    UNet::new(UNetConfig {
        latent_res: 4,
        latent_channels: 1,
        width: 2,
        levels: 1,
        embed_dim: 2,
    })
    .unwrap()
}

#[test]
fn triplane_loss_passes_gradcheck() {
    let model = tiny_unet();
    let mut params = model.init::<f64>(&mut seeded(8));
    randomize_all(&mut params, 9);
    let mut rng = seeded(10);
    let z = Array::randn(vec![6, 1, 4, 4], 1.0, &mut rng);
    let es = Array::randn(vec![2, 2], 1.0, &mut rng);
    let ep = Array::randn(vec![2, 2], 1.0, &mut rng);
    let eps = Array::randn(vec![6, 1, 4, 4], 1.0, &mut rng);
    let worst = param_gradcheck(&params, |g, b| {
        let (zv, sv, pv, nv) = (
            g.constant(z.clone()),
            g.constant(es.clone()),
            g.constant(ep.clone()),
            g.constant(eps.clone()),
        );
        triplane_loss(g, b, &model, zv, &[5, 600], sv, pv, &[true, false], &[false, true], nv)
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn unet_single_level_matches_block_composition() {
    let model = UNet::new(UNetConfig {
        latent_res: 4,
        latent_channels: 2,
        width: 4,
        levels: 1,
        embed_dim: 3,
    })
    .unwrap();
    let mut params = model.init::<f64>(&mut seeded(12));
    randomize_all(&mut params, 13);
    let mut rng = seeded(14);
    let z = Array::randn(vec![3, 2, 4, 4], 1.0, &mut rng);
    let es = Array::randn(vec![1, 3], 1.0, &mut rng);
    let ep = Array::randn(vec![1, 3], 1.0, &mut rng);
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let (zv, sv, pv) = (g.constant(z), g.constant(es), g.constant(ep));
    let full = model.forward(&mut g, &b, zv, &[77], sv, pv, &[true], &[true]).unwrap();

    let tokens = model.condition_tokens(&mut g, &b, sv, pv, &[true], &[true]).unwrap();
    let t_only = model.time.forward(&mut g, &b, &[77]).unwrap();
    let (tok_s, tok_p) = (g.slice(tokens, 1, 0, 1).unwrap(), g.slice(tokens, 1, 1, 2).unwrap());
    let pooled = g.add(tok_s, tok_p).unwrap();
    let pooled = g.reshape(pooled, &[1, 4]).unwrap();
    let temb = g.add(t_only, pooled).unwrap();
    let h0 = model.conv_in.forward(&mut g, &b, zv).unwrap();
    let lvl = &model.down[0];
    let h1 = lvl.res.forward(&mut g, &b, h0, Some(temb)).unwrap();
    let skip = lvl.attn.forward(&mut g, &b, h1, tokens).unwrap();
    let h2 = lvl.down.forward(&mut g, &b, skip).unwrap();
    assert_eq!(g.shape(h2), &[3, 4, 2, 2]);
    let m = model.mid_res1.forward(&mut g, &b, h2, Some(temb)).unwrap();
    let m = model.mid_attn.forward(&mut g, &b, m, tokens).unwrap();
    let m = model.mid_res2.forward(&mut g, &b, m, Some(temb)).unwrap();
    let up = &model.up[0];
    let u = g.upsample_nearest2d(m, 2).unwrap();
    let u = up.up.forward(&mut g, &b, u).unwrap();
    let u = g.concat(&[u, skip], 1).unwrap();
    let u = up.res.forward(&mut g, &b, u, Some(temb)).unwrap();
    let u = up.attn.forward(&mut g, &b, u, tokens).unwrap();
    let o = model.norm_out.forward(&mut g, &b, u).unwrap();
    let o = g.silu(o).unwrap();
    let manual = model.conv_out.forward(&mut g, &b, o).unwrap();
    assert!(g.value(full).max_abs_diff(g.value(manual)) < 1e-12);
}

#[test]
fn guided_denoiser_branches_follow_conditions() {
    let model = tiny_unet();
    let mut params = model.init::<f64>(&mut seeded(15));
    randomize_all(&mut params, 16);
    let mut rng = seeded(17);
    let x = Array::randn(vec![3, 1, 4, 4], 1.0, &mut rng);
    let shape = Array::randn(vec![1, 2], 1.0, &mut rng);
    let image = Array::randn(vec![1, 2], 1.0, &mut rng);
    let den = GuidedDenoiser {
        model: &model,
        params: &params,
        shape: shape.clone(),
        image: image.clone(),
        scales: GuidanceScales { shape: 1.0, image: 1.0 },
    };
    let [u, i, f] = den.branches(&x, 30).unwrap();
    let single = |ks: bool, kp: bool| {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let (xv, sv, pv) = (g.constant(x.clone()), g.constant(shape.clone()), g.constant(image.clone()));
        let y = model.forward(&mut g, &b, xv, &[30], sv, pv, &[ks], &[kp]).unwrap();
        g.value(y).clone()
    };
    assert!(u.max_abs_diff(&single(false, false)) < 1e-12);
    assert!(i.max_abs_diff(&single(false, true)) < 1e-12);
    assert!(f.max_abs_diff(&single(true, true)) < 1e-12);
    assert!(den.predict(&x, 30).unwrap().max_abs_diff(&f) < 1e-12);
}

fn toy_triplane_batch(cfg: &UNetConfig, n: usize, seed: u64) -> TriplaneBatch {
    let mut rng = seeded(seed);
    let r = cfg.latent_res;
    TriplaneBatch {
        latents: Array::randn(vec![3 * n, cfg.latent_channels, r, r], 1.0, &mut rng),
        shape: Array::randn(vec![n, cfg.embed_dim], 1.0, &mut rng),
        image: Array::randn(vec![n, cfg.embed_dim], 1.0, &mut rng),
    }
}

#[test]
fn prior_overfits_toy_set() {
    let model = PriorModel::new(PriorConfig {
        dim: 8,
        width: 64,
        depth: 4,
        shape_scale: 0.25,
        image_scale: 0.85,
    })
    .unwrap();
    let mut rng = seeded(20);
    let mut params = model.init::<f64>(&mut rng);
    let batch = PriorBatch {
        shape: Array::randn(vec![4, 8], 1.0, &mut rng),
        image: Array::randn(vec![4, 8], 1.0, &mut rng),
    };
    let sched = NoiseSchedule::standard();
    let mut opt = AdamW::new(0.0);
    let losses: Vec<f64> = (0..500)
        .map(|i| {
            let lr = triplane_core::optim::CosineSchedule { start: 3e-3, end: 3e-4, total_steps: 500 }.at(i);
            let step = StepOptions { lr, clip_norm: Some(1.0) };
            train_step_prior(&model, &mut params, &mut opt, &sched, &batch, step, &mut rng).unwrap()
        })
        .collect();
    let head = losses[..10].iter().sum::<f64>() / 10.0;
    let tail = losses[490..].iter().sum::<f64>() / 10.0;
    assert!(tail <= 0.2 * head, "{head} -> {tail}");
}

#[test]
fn triplane_model_overfits_toy_set() {
    let cfg = UNetConfig {
        latent_res: 4,
        latent_channels: 2,
        width: 16,
        levels: 2,
        embed_dim: 8,
    };
    let model = UNet::new(cfg.clone()).unwrap();
    let mut rng = seeded(21);
    let mut params = model.init::<f64>(&mut rng);
    let toy = toy_triplane_batch(&cfg, 4, 22);
    let batch = TriplaneBatch {
        latents: tile(&toy.latents, 4),
        shape: tile(&toy.shape, 4),
        image: tile(&toy.image, 4),
    };
    let sched = NoiseSchedule::standard();
    let mut opt = AdamW::new(0.0);
    let rates = DropoutRates::default();
    let losses: Vec<f64> = (0..500)
        .map(|i| {
            let lr = triplane_core::optim::CosineSchedule { start: 3e-3, end: 3e-4, total_steps: 500 }.at(i);
            let step = StepOptions { lr, clip_norm: None };
            train_step_triplane(&model, &mut params, &mut opt, &sched, &batch, &rates, step, &mut rng).unwrap()
        })
        .collect();
    let head = losses[..10].iter().sum::<f64>() / 10.0;
    let tail = losses[490..].iter().sum::<f64>() / 10.0;
    eprintln!("triplane overfit {head} -> {tail} (last 50: {})", losses[450..].iter().sum::<f64>() / 50.0);
    assert!(tail <= 0.2 * head, "{head} -> {tail}");
}

fn tile(a: &Array<f64>, k: usize) -> Array<f64> {
    let mut shape = a.shape().to_vec();
    shape[0] *= k;
    Array::new(shape, a.data().repeat(k)).unwrap()
}
