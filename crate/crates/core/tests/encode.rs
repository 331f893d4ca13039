use rand::Rng as _;
use triplane_core::encode::*;
use triplane_core::nn::{Bound, Params};
use triplane_tensor::rng::seeded;
use triplane_tensor::{gradcheck, Array, Graph, Rng, TensorError};

fn random_cloud(n: usize, rng: &mut Rng) -> ColoredPointCloud {
    let points = (0..n)
        .map(|_| [0; 3].map(|_: i32| rng.random_range(-1.0..=1.0)))
        .collect();
    let colors = (0..n).map(|_| [0; 3].map(|_: i32| rng.random_range(0.0..=1.0))).collect();
    ColoredPointCloud::new(points, colors).unwrap()
}

fn tent(d: f64) -> f64 {
    (1.0 - d.abs()).max(0.0)
}

/// Normalized volume and per-point weight totals by explicit loops over every node.
fn splat_oracle(points: &[[f64; 3]], feats: &[Vec<f64>], r: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let c = feats[0].len();
    let mut vol = vec![vec![0.0; c]; r * r * r];
    let mut sums = vec![0.0; r * r * r];
    let mut totals = vec![0.0; points.len()];
    for (i, p) in points.iter().enumerate() {
        let u = p.map(|v| (v + 1.0) / 2.0 * (r - 1) as f64);
        for x in 0..r {
            for y in 0..r {
                for z in 0..r {
                    let w = tent(u[0] - x as f64) * tent(u[1] - y as f64) * tent(u[2] - z as f64);
                    let j = (x * r + y) * r + z;
                    for k in 0..c {
                        vol[j][k] += w * feats[i][k];
                    }
                    sums[j] += w;
                    totals[i] += w;
                }
            }
        }
    }
    for j in 0..vol.len() {
        for k in 0..c {
            vol[j][k] = if sums[j] > 1e-8 { vol[j][k] / sums[j] } else { 0.0 };
        }
    }
    (vol, totals)
}

fn normalized_volume(points: &[[f64; 3]], feats: &Array<f64>, r: usize) -> Array<f64> {
    let plan = SplatPlan::new(points, r).unwrap();
    let mut g = Graph::new();
    let f = g.constant(feats.clone());
    let v = splat_to_volume(&mut g, &plan, f).unwrap();
    let v = normalize_volume(&mut g, v, &plan.weight_sums).unwrap();
    g.value(v).clone()
}

#[test]
fn splatting_matches_loop_oracle_on_random_clouds() {
    let mut rng = seeded(100);
    for _ in 0..100 {
        let n = rng.random_range(1..=64);
        let r = rng.random_range(2..=8);
        let c = rng.random_range(1..=4);
        let cloud = random_cloud(n, &mut rng);
        let feats = Array::randn(vec![n, c], 1.0, &mut rng);
        let rows: Vec<Vec<f64>> = (0..n).map(|i| feats.row(i).to_vec()).collect();
        let (oracle, totals) = splat_oracle(&cloud.points, &rows, r);
        let got = normalized_volume(&cloud.points, &feats, r);
        for (j, row) in oracle.iter().enumerate() {
            for k in 0..c {
                assert!((got.at(&[j, k]) - row[k]).abs() < 1e-10);
            }
        }
        let plan = SplatPlan::new(&cloud.points, r).unwrap();
        for i in 0..n {
            let s: f64 = plan.weights[8 * i..8 * i + 8].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!((totals[i] - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn cell_center_spreads_weight_evenly() {
    let r = 3;
    let plan = SplatPlan::new(&[[-0.5, -0.5, -0.5]], r).unwrap();
    assert!(plan.weights.iter().all(|&w| (w - 0.125).abs() < 1e-15));
    assert!(SplatPlan::new(&[[0.0; 3]], 1).is_err());
}

#[test]
fn replicating_points_leaves_normalized_volume_unchanged() {
    let mut rng = seeded(7);
    let n = 40;
    let cloud = random_cloud(n, &mut rng);
    let feats = Array::randn(vec![n, 3], 1.0, &mut rng);
    let base = normalized_volume(&cloud.points, &feats, 6);
    for k in [2, 5] {
        let pts = cloud.points.repeat(k);
        let f = Array::new(vec![n * k, 3], feats.data().repeat(k)).unwrap();
        let rep = normalized_volume(&pts, &f, 6);
        assert!(rep.max_abs_diff(&base) < 1e-10);
    }
}

#[test]
fn single_point_fills_its_voxels_with_its_feature() {
    let f = Array::new(vec![1, 2], vec![0.3, -1.7]).unwrap();
    let v = normalized_volume(&[[0.1, -0.2, 0.35]], &f, 5);
    let mut occupied = 0;
    for j in 0..125 {
        let row = [v.at(&[j, 0]), v.at(&[j, 1])];
        if row != [0.0, 0.0] {
            occupied += 1;
            assert!((row[0] - 0.3).abs() < 1e-12 && (row[1] + 1.7).abs() < 1e-12);
        }
    }
    assert_eq!(occupied, 8);
}

fn small_encoder() -> (Encoder, Params<f64>) {
    let cfg = EncoderConfig {
        volume_res: 4,
        channels: 3,
        latent_res: 2,
        latent_channels: 2,
        pe_freqs: 2,
    };
    let enc = Encoder::new(cfg).unwrap();
    let mut p = Params::new();
    enc.init(&mut p, &mut seeded(3));
    VaeHead::new(2).init(&mut p, &mut seeded(4));
    (enc, p)
}

fn features(enc: &Encoder, p: &Params<f64>, pc: &ColoredPointCloud) -> Array<f64> {
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let plan = SplatPlan::new(&pc.points, enc.cfg.volume_res).unwrap();
    let f = enc.pointnet_features(&mut g, &b, pc, &plan).unwrap();
    g.value(f).clone()
}

#[test]
fn pointnet_is_permutation_equivariant_and_duplicate_consistent() {
    let (enc, p) = small_encoder();
    let mut rng = seeded(11);
    let pc = random_cloud(12, &mut rng);
    let base = features(&enc, &p, &pc);
    let perm: Vec<usize> = (0..12).rev().collect();
    let shuffled = ColoredPointCloud::new(
        perm.iter().map(|&i| pc.points[i]).collect(),
        perm.iter().map(|&i| pc.colors[i]).collect(),
    )
    .unwrap();
    let out = features(&enc, &p, &shuffled);
    for (row, &src) in perm.iter().enumerate() {
        for k in 0..3 {
            assert!((out.at(&[row, k]) - base.at(&[src, k])).abs() < 1e-14);
        }
    }
    let mut dup = pc.clone();
    dup.points.push(pc.points[0]);
    dup.colors.push(pc.colors[0]);
    let d = features(&enc, &p, &dup);
    for k in 0..3 {
        assert_eq!(d.at(&[0, k]), d.at(&[12, k]));
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn dense(p: &Params<f64>, name: &str, x: &[f64]) -> Vec<f64> {
    let w = p.get(&format!("{name}.w")).unwrap();
    let b = p.get(&format!("{name}.b")).unwrap();
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    (0..dout)
        .map(|o| b.data()[o] + (0..din).map(|i| x[i] * w.at(&[i, o])).sum::<f64>())
        .collect()
}

#[test]
fn single_point_feature_is_direct_mlp_evaluation() {
    let (enc, p) = small_encoder();
    let pc = ColoredPointCloud::new(vec![[0.0; 3]], vec![[0.2, 0.5, 0.9]]).unwrap();
    let got = features(&enc, &p, &pc);
    let e = point_embedding([0.0; 3], [0.2, 0.5, 0.9], 2);
    let h: Vec<f64> = dense(&p, "enc.pn0", &e).into_iter().map(silu).collect();
    let cat: Vec<f64> = h.iter().chain(h.iter()).copied().collect();
    let h: Vec<f64> = dense(&p, "enc.pn1", &cat).into_iter().map(silu).collect();
    let out = dense(&p, "enc.pn2", &h);
    for k in 0..3 {
        assert!((got.at(&[0, k]) - out[k]).abs() < 1e-12);
    }
    let empty = ColoredPointCloud::new(vec![], vec![]);
    assert!(empty.is_err());
}

fn planes_of(enc: &Encoder, p: &Params<f64>, volume: &Array<f64>) -> Array<f64> {
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let v = g.constant(volume.clone());
    let t = enc.project_to_triplanes(&mut g, &b, v).unwrap();
    g.value(t).clone()
}

#[test]
fn projection_matches_loop_convolution() {
    let (enc, mut p) = small_encoder();
    let (c, r) = (3, 4);
    let mut rng = seeded(21);
    let vol = Array::randn(vec![1, c, r, r, r], 1.0, &mut rng);
    let got = planes_of(&enc, &p, &vol);
    let v = |ch: usize, x: usize, y: usize, z: usize| vol.at(&[0, ch, x, y, z]);
    let w = |name: &str| p.get(&format!("enc.{name}.w")).unwrap().clone();
    let bias = |name: &str| p.get(&format!("enc.{name}.b")).unwrap().clone();
    let (wxy, wyz, wzx) = (w("proj_xy"), w("proj_yz"), w("proj_zx"));
    let (bxy, byz, bzx) = (bias("proj_xy"), bias("proj_yz"), bias("proj_zx"));
    for o in 0..c {
        for i in 0..r {
            for j in 0..r {
                let (mut xy, mut yz, mut zx) = (bxy.data()[o], byz.data()[o], bzx.data()[o]);
                for ci in 0..c {
                    for k in 0..r {
                        xy += wxy.at(&[o, ci, 0, 0, k]) * v(ci, i, j, k);
                        yz += wyz.at(&[o, ci, k, 0, 0]) * v(ci, k, i, j);
                        zx += wzx.at(&[o, ci, 0, k, 0]) * v(ci, j, k, i);
                    }
                }
                assert!((got.at(&[0, o, i, j]) - xy).abs() < 1e-12);
                assert!((got.at(&[1, o, i, j]) - yz).abs() < 1e-12);
                assert!((got.at(&[2, o, i, j]) - zx).abs() < 1e-12);
            }
        }
    }

    for name in ["proj_xy", "proj_yz", "proj_zx"] {
        let wk = p.get_mut(&format!("enc.{name}.w")).unwrap();
        let shape = wk.shape().to_vec();
        *wk = Array::from_fn(shape.clone(), |idx| {
            let per_out = shape[1..].iter().product::<usize>();
            let ci = (idx % per_out) / (per_out / c);
            if ci == idx / per_out { 1.0 / r as f64 } else { 0.0 }
        });
        p.get_mut(&format!("enc.{name}.b")).unwrap().data_mut().fill(0.0);
    }
    let got = planes_of(&enc, &p, &vol);
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                let mean = |f: &dyn Fn(usize) -> f64| (0..r).map(f).sum::<f64>() / r as f64;
                assert!((got.at(&[0, ch, i, j]) - mean(&|k| v(ch, i, j, k))).abs() < 1e-12);
                assert!((got.at(&[1, ch, i, j]) - mean(&|k| v(ch, k, i, j))).abs() < 1e-12);
                assert!((got.at(&[2, ch, i, j]) - mean(&|k| v(ch, j, k, i))).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn downsample_stage_count_follows_resolution_ratio() {
    assert_eq!(EncoderConfig::paper().down_stages().unwrap(), 2);
    assert_eq!(EncoderConfig::desk().down_stages().unwrap(), 2);
    assert!(stages_between(128, 48).is_err());
    assert_eq!(EncoderConfig::paper().latent_scalars(), 98_304);
}

fn kl_of(mu: Vec<f64>, ls: Vec<f64>) -> f64 {
    let mut g = Graph::new();
    let n = mu.len();
    let mu = g.constant(Array::new(vec![3, n / 3, 1, 1], mu).unwrap());
    let log_sigma = g.constant(Array::new(vec![3, n / 3, 1, 1], ls).unwrap());
    let kl = kl_penalty(&mut g, LatentDistribution { mu, log_sigma }, 1).unwrap();
    g.value(kl).item()
}

#[test]
fn kl_matches_closed_form() {
    assert_eq!(kl_of(vec![0.0; 3], vec![0.0; 3]), 0.0);
    assert!((kl_of(vec![1.0, 0.0, 0.0], vec![0.0; 3]) - 0.5).abs() < 1e-15);
    let (m, s) = (0.3_f64, 0.7_f64);
    let expected = 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln());
    assert!((kl_of(vec![m, 0.0, 0.0], vec![s.ln(), 0.0, 0.0]) - expected).abs() < 1e-14);
}

#[test]
fn latent_sampling_is_seeded_and_clamped() {
    let (enc, p) = small_encoder();
    let pc = random_cloud(9, &mut seeded(31));
    let run = |seed| {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let e = enc.forward(&mut g, &b, &pc).unwrap();
        let d = VaeHead::new(2).forward(&mut g, &b, e.latent).unwrap();
        let z = sample_latent(&mut g, d, &mut seeded(seed)).unwrap();
        (g.value(z).clone(), g.value(d.log_sigma).clone())
    };
    let (a, ls) = run(5);
    assert_eq!(a.data(), run(5).0.data());
    assert_ne!(a.data(), run(6).0.data());
    assert!(ls.data().iter().all(|v| (LOG_SIGMA_MIN..=LOG_SIGMA_MAX).contains(v)));
}

#[test]
fn mean_latent_passes_gradcheck_in_point_features() {
    let (enc, p) = small_encoder();
    let pc = random_cloud(5, &mut seeded(41));
    let plan = SplatPlan::new(&pc.points, 4).unwrap();
    let feats = Array::randn(vec![5, 3], 1.0, &mut seeded(42));
    let report = gradcheck(
        |g, vars| {
            let mut run = || -> triplane_core::Result<_> {
                let b: Bound = p.bind(g, false);
                let e = enc.encode_features(g, &b, &plan, vars[0])?;
                let d = VaeHead::new(2).forward(g, &b, e.latent)?;
                Ok(g.sum_all(d.mu)?)
            };
            run().map_err(|e| TensorError::Format(e.to_string()))
        },
        &[feats],
        1e-6,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{}", report.worst());
    assert!(report.analytic[0].max_abs() > 0.0);
}
