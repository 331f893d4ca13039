use std::rc::Rc;

use proptest::prelude::*;
use triplane_tensor::rng::seeded;
use triplane_tensor::{gradcheck, Array, Graph, Rng, TensorError, Var};

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn rand(shape: &[usize], rng: &mut Rng) -> Array<f64> {
    Array::randn(shape.to_vec(), 1.0, rng)
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> triplane_tensor::Result<Var> {
    let w = Array::randn(g.shape(y).to_vec(), 1.0, &mut seeded(seed));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn check<F>(name: &str, inputs: Vec<Array<f64>>, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> triplane_tensor::Result<Var>,
{
    let r = gradcheck(|g, v| { let y = f(g, v)?; probe(g, y, 99) }, &inputs, EPS).unwrap();
    assert!(r.passes(TOL), "{name}: worst rel err {:e} ({:?})", r.worst(), r.max_rel_err);
}

#[test]
fn gradcheck_binary_broadcasting_ops() {
    let mut rng = seeded(1);
    for (sa, sb) in [(vec![3, 4], vec![3, 4]), (vec![2, 3, 4], vec![4]), (vec![5, 1], vec![1, 3])] {
        check("add", vec![rand(&sa, &mut rng), rand(&sb, &mut rng)], |g, v| g.add(v[0], v[1]));
        check("sub", vec![rand(&sa, &mut rng), rand(&sb, &mut rng)], |g, v| g.sub(v[0], v[1]));
        check("mul", vec![rand(&sa, &mut rng), rand(&sb, &mut rng)], |g, v| g.mul(v[0], v[1]));
        let denom = rand(&sb, &mut rng).map(|x| x.abs() + 0.5);
        check("div", vec![rand(&sa, &mut rng), denom], |g, v| g.div(v[0], v[1]));
    }
}

#[test]
fn gradcheck_unary_ops() {
    let mut rng = seeded(2);
    for shape in [vec![7], vec![3, 4], vec![2, 2, 3]] {
        let x = rand(&shape, &mut rng);
        let pos = x.map(|v| v.abs() + 0.3);
        // keep clear of kinks for abs/relu/clamp
        let away = x.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        check("neg", vec![x.clone()], |g, v| g.neg(v[0]));
        check("scale", vec![x.clone()], |g, v| g.scale(v[0], 2.5));
        check("add_scalar", vec![x.clone()], |g, v| g.add_scalar(v[0], -1.5));
        check("exp", vec![x.clone()], |g, v| g.exp(v[0]));
        check("log", vec![pos.clone()], |g, v| g.log(v[0]));
        check("sqrt", vec![pos.clone()], |g, v| g.sqrt(v[0]));
        check("square", vec![x.clone()], |g, v| g.square(v[0]));
        check("abs", vec![away.clone()], |g, v| g.abs(v[0]));
        check("tanh", vec![x.clone()], |g, v| g.tanh(v[0]));
        check("sigmoid", vec![x.clone()], |g, v| g.sigmoid(v[0]));
        check("softplus", vec![x.clone()], |g, v| g.softplus(v[0]));
        check("silu", vec![x.clone()], |g, v| g.silu(v[0]));
        check("relu", vec![away.clone()], |g, v| g.relu(v[0]));
        let mid = away.map(|v| if (v.abs() - 0.8).abs() < 0.05 { v * 0.5 } else { v });
        check("clamp", vec![mid], |g, v| g.clamp(v[0], -0.8, 0.8));
        check("powf", vec![pos.clone()], |g, v| g.powf(v[0], 1.7));
    }
}

#[test]
fn gradcheck_reductions_and_structure() {
    let mut rng = seeded(3);
    for shape in [vec![2, 3, 4], vec![4, 5, 2], vec![3, 3, 3]] {
        let x = rand(&shape, &mut rng);
        check("sum_all", vec![x.clone()], |g, v| g.sum_all(v[0]));
        check("mean_all", vec![x.clone()], |g, v| g.mean_all(v[0]));
        for axis in 0..3 {
            check("sum_axis", vec![x.clone()], move |g, v| g.sum_axis(v[0], axis, false));
            check("mean_axis", vec![x.clone()], move |g, v| g.mean_axis(v[0], axis, true));
            check("softmax", vec![x.clone()], move |g, v| g.softmax(v[0], axis));
            let n = shape[axis];
            check("slice", vec![x.clone()], move |g, v| g.slice(v[0], axis, 1, n));
        }
        check("permute", vec![x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]));
        let flat = [shape.iter().product::<usize>()];
        check("reshape", vec![x.clone()], move |g, v| g.reshape(v[0], &flat));
        let y = rand(&shape, &mut rng);
        check("concat", vec![x.clone(), y], |g, v| g.concat(&[v[0], v[1]], 1));
        let mut b = shape.clone();
        b[1] = 1;
        check("broadcast_to", vec![rand(&b, &mut rng)], {
            let s = shape.clone();
            move |g, v| g.broadcast_to(v[0], &s)
        });
        check("upsample", vec![x.clone()], |g, v| g.upsample_nearest2d(v[0], 2));
        let rows = shape[0];
        let idx = Rc::new(vec![rows - 1, 0, rows - 1, 1]);
        check("gather_rows", vec![x.clone()], {
            let idx = idx.clone();
            move |g, v| g.gather_rows(v[0], idx.clone())
        });
        let sidx = Rc::new((0..rows).map(|i| (i * 7) % 5).collect::<Vec<_>>());
        check("scatter_add_rows", vec![x.clone()], move |g, v| g.scatter_add_rows(v[0], sidx.clone(), 5));
        let x2 = rand(&[shape[0] * 2, shape[1]], &mut rng);
        let seg = Rc::new((0..shape[0] * 2).map(|i| i % 3).collect::<Vec<_>>());
        check("segment_max", vec![x2], move |g, v| g.segment_max(v[0], seg.clone(), 4));
    }
}

#[test]
fn gradcheck_linear_algebra_and_convolutions() {
    let mut rng = seeded(4);
    for (m, k, n) in [(4, 3, 2), (1, 5, 3), (3, 3, 3)] {
        check("matmul", vec![rand(&[m, k], &mut rng), rand(&[k, n], &mut rng)], |g, v| g.matmul(v[0], v[1]));
        check("bmm", vec![rand(&[2, m, k], &mut rng), rand(&[2, k, n], &mut rng)], |g, v| g.bmm(v[0], v[1]));
    }
    for (xs, ws, stride, pad) in [
        ([1, 2, 5, 5], [3, 2, 3, 3], [1, 1], [1, 1]),
        ([2, 3, 6, 4], [2, 3, 2, 2], [2, 2], [0, 0]),
        ([1, 1, 7, 7], [2, 1, 3, 1], [2, 1], [1, 0]),
    ] {
        let b = rand(&[ws[0]], &mut rng);
        check("conv2d", vec![rand(&xs, &mut rng), rand(&ws, &mut rng), b], move |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), stride, pad)
        });
    }
    for (xs, ws, stride, pad) in [
        ([1, 2, 4, 4, 4], [2, 2, 2, 2, 2], [2, 2, 2], [0, 0, 0]),
        ([1, 2, 4, 4, 4], [3, 2, 1, 1, 4], [1, 1, 4], [0, 0, 0]),
        ([2, 1, 3, 4, 3], [2, 1, 3, 3, 3], [1, 1, 1], [1, 1, 1]),
    ] {
        let b = rand(&[ws[0]], &mut rng);
        check("conv3d", vec![rand(&xs, &mut rng), rand(&ws, &mut rng), b], move |g, v| {
            g.conv3d(v[0], v[1], Some(v[2]), stride, pad)
        });
    }
}

#[test]
fn gradcheck_normalization_and_losses() {
    let mut rng = seeded(5);
    for (shape, groups) in [(vec![1, 4, 3, 3], 2), (vec![2, 6, 5], 3), (vec![1, 2, 2, 2, 2], 1)] {
        let c = shape[1];
        check(
            "group_norm",
            vec![rand(&shape, &mut rng), rand(&[c], &mut rng), rand(&[c], &mut rng)],
            move |g, v| g.group_norm(v[0], groups, v[1], v[2], 1e-5),
        );
        let a = rand(&shape, &mut rng);
        let b = rand(&shape, &mut rng);
        let fa = a.clone();
        let fb = b.clone();
        let r = gradcheck(|g, v| g.mse_loss(v[0], v[1]), &[a, b], EPS).unwrap();
        assert!(r.passes(TOL), "mse {:e}", r.worst());
        // L1 away from kinks
        let fb = fb.zip_map(&fa, |y, x| if (x - y).abs() < 1e-3 { y + 0.1 } else { y });
        let r = gradcheck(|g, v| g.l1_loss(v[0], v[1]), &[fa, fb], EPS).unwrap();
        assert!(r.passes(1e-5), "l1 {:e}", r.worst());
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = seeded(6);
    let a = rand(&[4, 3], &mut rng);
    let b = rand(&[3, 2], &mut rng);
    let r = gradcheck(
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            g.sum_all(c)
        },
        &[a, b],
        1e-4,
    )
    .unwrap();
    assert!(r.max_rel_err[0] < 1e-5, "{:?}", r.max_rel_err);
}

#[test]
fn gradcheck_reports_for_reference_functions() {
    let x = rand(&[8], &mut seeded(7));
    let r = gradcheck(
        |g, v| {
            let s = g.square(v[0])?;
            g.sum_all(s)
        },
        std::slice::from_ref(&x),
        1e-4,
    )
    .unwrap();
    assert!(r.worst() < 1e-6);
    let expect = x.map(|v| 2.0 * v);
    assert!(r.analytic[0].max_abs_diff(&expect) < 1e-12);

    let r = gradcheck(|g, _| Ok(g.scalar(3.0)), std::slice::from_ref(&x), 1e-4).unwrap();
    assert!(r.analytic[0].data().iter().all(|&v| v == 0.0));
    assert_eq!(r.worst(), 0.0);

    let r = gradcheck(|_, v| Ok(v[0]), &[x], 1e-4);
    assert!(matches!(r, Err(TensorError::NonScalar(_))));
}

#[test]
fn naive_loop_references() {
    let mut rng = seeded(8);
    let (xa, wa, ba) = (rand(&[2, 3, 6, 5], &mut rng), rand(&[4, 3, 3, 2], &mut rng), rand(&[4], &mut rng));
    let mut g = Graph::new();
    let (x, w, b) = (g.constant(xa.clone()), g.constant(wa.clone()), g.constant(ba.clone()));
    let y = g.conv2d(x, w, Some(b), [2, 1], [1, 0]).unwrap();
    let ys = g.value(y).shape().to_vec();
    assert_eq!(ys, vec![2, 4, 3, 4]);
    for bi in 0..2 {
        for o in 0..4 {
            for i in 0..3 {
                for j in 0..4 {
                    let mut acc = ba.data()[o];
                    for c in 0..3 {
                        for ki in 0..3 {
                            for kj in 0..2 {
                                let (yy, xx) = ((i * 2 + ki) as isize - 1, (j + kj) as isize);
                                if (0..6).contains(&yy) && xx < 5 {
                                    acc += wa.at(&[o, c, ki, kj]) * xa.at(&[bi, c, yy as usize, xx as usize]);
                                }
                            }
                        }
                    }
                    assert!((g.value(y).at(&[bi, o, i, j]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    let (a, bm) = (rand(&[3, 5], &mut rng), rand(&[5, 2], &mut rng));
    let (va, vb) = (g.constant(a.clone()), g.constant(bm.clone()));
    let c = g.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let r: f64 = (0..5).map(|k| a.at(&[i, k]) * bm.at(&[k, j])).sum();
            assert!((g.value(c).at(&[i, j]) - r).abs() < 1e-12);
        }
    }
}

#[test]
fn repeated_backward_accumulates() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Array::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap());
    let y = g.square(x).unwrap();
    let s = g.sum_all(y).unwrap();
    g.backward(s).unwrap();
    let once = g.grad(x).unwrap().clone();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &once.map(|v| 2.0 * v));
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_without_trainable_inputs_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Array::ones(vec![2]));
    let s = g.sum_all(x).unwrap();
    assert!(matches!(g.backward(s), Err(TensorError::NoGraph)));
    let p = g.param(Array::ones(vec![2]));
    assert!(matches!(g.backward(p), Err(TensorError::NonScalar(_))));
}

#[test]
fn non_finite_values_are_surfaced_when_checked() {
    let mut g = Graph::<f64>::new();
    g.set_check_finite(true);
    let x = g.constant(Array::from_f64(vec![1], &[-1.0]).unwrap());
    assert!(matches!(g.log(x), Err(TensorError::NonFinite { op: "log" })));
}

#[test]
fn f32_graphs_work() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Array::from_f64(vec![2], &[1.0, 2.0]).unwrap());
    let y = g.silu(x).unwrap();
    let s = g.sum_all(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().len(), 2);
}

proptest! {
    #[test]
    fn scatter_then_gather_is_identity(n in 1usize..12, width in 1usize..4, seed in 0u64..1000) {
        let mut rng = seeded(seed);
        let out_rows = n + 5;
        let mut perm: Vec<usize> = (0..out_rows).collect();
        for i in (1..out_rows).rev() {
            let j = (rand(&[1], &mut rng).data()[0].abs() * 1e6) as usize % (i + 1);
            perm.swap(i, j);
        }
        let idx = Rc::new(perm[..n].to_vec());
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand(&[n, width], &mut rng));
        let s = g.scatter_add_rows(x, idx.clone(), out_rows).unwrap();
        let back = g.gather_rows(s, idx).unwrap();
        prop_assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 2..20)) {
        let mut g = Graph::<f64>::new();
        let n = vals.len();
        let x = g.constant(Array::new(vec![1, n], vals).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let s: f64 = g.value(y).sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(g.value(y).data().iter().all(|&v| v >= 0.0));
    }
}
