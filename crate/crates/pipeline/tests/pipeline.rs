use std::path::Path;
use std::process::Command;

use triplane_core::autoencoder::Autoencoder;
use triplane_core::diffusion::{DropoutRates, PriorModel, UNet};
use triplane_pipeline::generate::{generate, GenerateOptions, Models};
use triplane_pipeline::stages::{load_params, load_triplane, params_digest, train_autoencoder, train_triplane, LatentNorm};
use triplane_pipeline::synth::{synth_dataset, Dataset};
use triplane_pipeline::RunConfig;
use triplane_tensor::rng::seeded;
use triplane_tensor::Array;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.data.num_shapes = 2;
    cfg.data.num_points = 256;
    cfg.data.gt_grid = 16;
    cfg.views.count = 2;
    cfg.views.image_size = 16;
    cfg.views.per_step = 2;
    cfg.stage1.steps = 30;
    cfg.stage3.steps = 4;
    cfg.stage3.batch = 2;
    cfg
}

#[test]
fn kl_stays_finite_and_bounded() {
    let cfg = tiny_config();
    let data = synth_dataset(&cfg).unwrap();
    let run = train_autoencoder(&cfg, &data, None).unwrap();
    assert_eq!(run.log.len(), cfg.stage1.steps);
    for r in &run.log {
        assert!(r.kl.is_finite() && r.kl < 1e3, "step {} kl {}", r.step, r.kl);
        assert!(r.total.is_finite());
    }
}

fn scrambled(data: &Dataset) -> Dataset {
    let mut rng = seeded(1234);
    let mut d = data.clone();
    d.shape_embeddings = Array::randn(d.shape_embeddings.shape().to_vec(), 3.0, &mut rng);
    d.image_embeddings = Array::randn(d.image_embeddings.shape().to_vec(), 3.0, &mut rng);
    d
}

#[test]
fn full_condition_dropout_ignores_the_embeddings() {
    let mut cfg = tiny_config();
    let data = synth_dataset(&cfg).unwrap();
    let other = scrambled(&data);
    let ae_params = Autoencoder::new(cfg.autoencoder.clone()).unwrap().init::<f64>(&mut seeded(3));

    cfg.diffusion.dropout = DropoutRates {
        image_only: 0.0,
        shape_only: 0.0,
        both: 1.0,
    };
    let a = train_triplane(&cfg, &data, &ae_params, None).unwrap();
    let b = train_triplane(&cfg, &other, &ae_params, None).unwrap();
    assert_eq!(params_digest(&a.params), params_digest(&b.params));
    let losses = |r: &triplane_pipeline::stages::TriplaneRun| r.log.iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));

    cfg.diffusion.dropout = DropoutRates::default();
    let c = train_triplane(&cfg, &data, &ae_params, None).unwrap();
    let d = train_triplane(&cfg, &other, &ae_params, None).unwrap();
    assert_ne!(params_digest(&c.params), params_digest(&d.params));
}

fn untrained_models(cfg: &RunConfig) -> Models {
    let ae = Autoencoder::new(cfg.autoencoder.clone()).unwrap();
    let ae_params = ae.init::<f64>(&mut seeded(5));
    let prior_params = PriorModel::new(cfg.prior.clone()).unwrap().init::<f64>(&mut seeded(6));
    let unet_params = UNet::new(cfg.unet.clone()).unwrap().init::<f64>(&mut seeded(7));
    let shape = cfg.autoencoder.latent_shape();
    let norm = LatentNorm::fit(&[Array::zeros(shape.to_vec()), Array::full(shape.to_vec(), 0.5)]).unwrap();
    Models::new(cfg, ae_params, prior_params, unet_params, norm).unwrap()
}

#[test]
fn generation_is_deterministic_and_checks_dimensions() {
    let cfg = tiny_config();
    let models = untrained_models(&cfg);
    let emb: Vec<f64> = (0..models.embed_dim()).map(|i| (i as f64 * 0.37).sin()).collect();
    let opts = GenerateOptions {
        ddim_steps: 4,
        ..GenerateOptions::from_config(&cfg)
    };
    let a = generate(&models, &emb, &opts).unwrap();
    let b = generate(&models, &emb, &opts).unwrap();
    assert_eq!(a.latent, b.latent);
    assert_eq!(a.shape_embedding, b.shape_embedding);
    assert_eq!(a.mesh.vertices, b.mesh.vertices);
    assert_eq!(a.mesh.faces, b.mesh.faces);

    let c = generate(&models, &emb, &GenerateOptions { seed: opts.seed + 1, ..opts }).unwrap();
    assert_ne!(a.latent, c.latent);

    let err = generate(&models, &emb[1..], &opts).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("dimension"));
}

fn run(out: &Path, args: &[&str]) -> String {
    let o = Command::new(env!("CARGO_BIN_EXE_triplane"))
        .env("TRIPLANE_OUT", out)
        .args(args)
        .output()
        .unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn pipeline(out: &Path) {
    run(
        out,
        &["--shapes", "2", "--points", "256", "--views", "2", "--image-size", "16", "--ddim-steps", "4", "synth"],
    );
    run(out, &["train-ae", "--steps", "3"]);
    run(out, &["train-prior", "--steps", "3", "--batch", "4"]);
    let ae = std::fs::read(out.join("ae.ckpt")).unwrap();
    let prior = std::fs::read(out.join("prior.ckpt")).unwrap();
    run(out, &["train-tri", "--steps", "3", "--batch", "2"]);
    assert_eq!(std::fs::read(out.join("ae.ckpt")).unwrap(), ae);
    assert_eq!(std::fs::read(out.join("prior.ckpt")).unwrap(), prior);
    run(out, &["generate", "--shape", "1", "--frames", "2"]);
    run(out, &["ablate", "--axis", "prior"]);
}

#[test]
fn full_pipeline_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let gen = Path::new("generated").join("shape_0001_view_000");
    for f in ["ae.ckpt", "prior.ckpt", "tri.ckpt"] {
        let (pa, _, _) = load_params(&a.path().join(f), "checkpoint").unwrap();
        let (pb, _, _) = load_params(&b.path().join(f), "checkpoint").unwrap();
        assert_eq!(params_digest(&pa), params_digest(&pb), "{f}");
    }
    let (_, na) = load_triplane(&a.path().join("tri.ckpt")).unwrap();
    let (_, nb) = load_triplane(&b.path().join("tri.ckpt")).unwrap();
    assert_eq!(na, nb);
    for f in [
        "ablate_prior.csv".into(),
        gen.join("mesh.obj"),
        gen.join("mesh.ply"),
        gen.join("turn_00_rgb.png"),
    ] {
        let x = std::fs::read(a.path().join(&f)).unwrap();
        assert!(!x.is_empty(), "{}", f.display());
        assert_eq!(x, std::fs::read(b.path().join(&f)).unwrap(), "{}", f.display());
    }

    let wrong = a.path().join("short.json");
    std::fs::write(&wrong, "[0.5, 0.25]").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_triplane"))
        .env("TRIPLANE_OUT", a.path())
        .args(["generate", "--embedding", wrong.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
