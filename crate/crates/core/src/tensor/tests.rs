use super::*;
use crate::error::Error;
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random values bounded away from zero, for kink-free relu/max checks.
fn rand_tensor_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.1..1.0);
            if rng.random_range(0..2) == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Mean of an elementwise product with fixed weights: turns any tensor
/// into a scalar while keeping the upstream gradient non-uniform.
fn scalarize(g: &mut ValueGraph, id: NodeId, weights: &Tensor) -> crate::Result<NodeId> {
    let w = g.leaf(weights.clone());
    let prod = g.apply(Primitive::Mul, &[id, w])?;
    g.apply(Primitive::MeanReduce, &[prod])
}

#[test]
fn matmul_identity_trivial() {
    let mut g = ValueGraph::new();
    let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let i = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let c = g.apply(Primitive::MatMul, &[a, i]).unwrap();
    assert_eq!(g.tensor(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn relu_trivial() {
    let mut g = ValueGraph::new();
    let x = g.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.5]).unwrap());
    let y = g.apply(Primitive::Relu, &[x]).unwrap();
    assert_eq!(g.tensor(y).data(), &[0.0, 0.0, 2.5]);
}

#[test]
fn logsumexp_large_inputs_stay_finite() {
    let mut g = ValueGraph::new();
    let x = g.leaf(Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
    let y = g.apply(Primitive::LogSumExp, &[x]).unwrap();
    let v = g.scalar(y).unwrap();
    assert!((v - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
}

#[test]
fn backward_of_mean_square_is_two_x_over_n() {
    let mut g = ValueGraph::new();
    let t = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
    let x = g.leaf(t.clone());
    let sq = g.apply(Primitive::Mul, &[x, x]).unwrap();
    let root = g.apply(Primitive::MeanReduce, &[sq]).unwrap();
    let grads = g.backward(root).unwrap();
    let got = grads.wrt(x).unwrap();
    for (gv, xv) in got.data().iter().zip(t.data()) {
        assert!((gv - 2.0 * xv / 4.0).abs() < 1e-12);
    }
}

#[test]
fn shared_input_accumulates_through_both_paths() {
    // z = (x + c) * (x - c) has dz/dx = 2x.
    let mut g = ValueGraph::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let c = g.leaf(Tensor::scalar(1.5));
    let a = g.apply(Primitive::Add, &[x, c]).unwrap();
    let b = g.apply(Primitive::Sub, &[x, c]).unwrap();
    let z = g.apply(Primitive::Mul, &[a, b]).unwrap();
    let grads = g.backward(z).unwrap();
    assert!((grads.wrt(x).unwrap().data()[0] - 6.0).abs() < 1e-12);
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut g = ValueGraph::new();
    let x = g.leaf(Tensor::scalar(1.0));
    let unused = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let root = g.apply(Primitive::Scale { factor: 2.0 }, &[x]).unwrap();
    let grads = g.backward(root).unwrap();
    let z = grads.wrt(unused).unwrap();
    assert_eq!(z.shape(), &[3]);
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = ValueGraph::new();
    let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let y = g.apply(Primitive::Relu, &[x]).unwrap();
    match g.backward(y) {
        Err(Error::NonScalarRoot { shape }) => assert_eq!(shape, vec![2]),
        other => panic!("expected NonScalarRoot, got {other:?}"),
    }
}

#[test]
fn maxpool_tie_breaks_toward_lowest_flat_index() {
    let mut g = ValueGraph::new();
    let x = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
    let y = g.apply(Primitive::MaxPool2, &[x]).unwrap();
    assert_eq!(g.tensor(y).data(), &[1.0]);
    let root = g.apply(Primitive::MeanReduce, &[y]).unwrap();
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn cross_entropy_single_row_equals_lse_minus_logit() {
    let mut r = rng(11);
    for _ in 0..20 {
        let logits = rand_tensor(&mut r, &[1, 5]);
        let y = r.random_range(0..5usize);

        let mut g = ValueGraph::new();
        let x = g.leaf(logits.clone());
        let ce = g
            .apply(Primitive::SoftmaxCrossEntropy { labels: vec![y] }, &[x])
            .unwrap();

        let mut g2 = ValueGraph::new();
        let row = g2.leaf(Tensor::new(vec![5], logits.data().to_vec()).unwrap());
        let lse = g2.apply(Primitive::LogSumExp, &[row]).unwrap();
        let expect = g2.scalar(lse).unwrap() - logits.data()[y];

        assert!((g.scalar(ce).unwrap() - expect).abs() <= 1e-12);
    }
}

#[test]
fn cosine_zero_norm_yields_zero_value_and_gradient() {
    let mut g = ValueGraph::new();
    let a = g.leaf(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
    let b = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let c = g.apply(Primitive::Cosine, &[a, b]).unwrap();
    assert_eq!(g.scalar(c).unwrap(), 0.0);
    let grads = g.backward(c).unwrap();
    assert!(grads.wrt(a).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(grads.wrt(b).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_error_names_primitive_and_shapes() {
    let mut g = ValueGraph::new();
    let a = g.leaf(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap());
    let b = g.leaf(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap());
    let err = g.apply(Primitive::MatMul, &[a, b]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul"), "{msg}");
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn unknown_primitive_is_rejected_by_name() {
    let err = Primitive::from_id("transmogrify", &Attrs::default()).unwrap_err();
    assert!(matches!(err, Error::UnknownPrimitive(ref s) if s == "transmogrify"));
}

#[test]
fn missing_attribute_is_rejected() {
    let err = Primitive::from_id("scale", &Attrs::default()).unwrap_err();
    assert!(err.to_string().contains("factor"));
}

#[test]
fn non_finite_scale_factor_is_rejected() {
    let mut g = ValueGraph::new();
    let x = g.leaf(Tensor::scalar(1.0));
    assert!(g
        .apply(Primitive::Scale { factor: f64::NAN }, &[x])
        .is_err());
}

#[test]
fn stack_rejects_non_scalar_inputs() {
    let mut g = ValueGraph::new();
    let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let err = g.apply(Primitive::Stack, &[x]).unwrap_err();
    assert!(err.to_string().contains("stack"));
}

#[test]
fn tensor_constructor_rejects_bad_shapes() {
    assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    assert!(Tensor::new(vec![2], vec![1.0]).is_err());
}

#[test]
fn foreign_node_id_is_rejected() {
    let mut g = ValueGraph::new();
    let err = g.apply(Primitive::Relu, &[NodeId(3)]).unwrap_err();
    assert!(err.to_string().contains("not on this tape"));
}

#[test]
fn repeated_forward_is_bitwise_deterministic() {
    let run = || {
        let mut r = rng(99);
        let mut g = ValueGraph::new();
        let a = g.leaf(rand_tensor(&mut r, &[4, 6]));
        let b = g.leaf(rand_tensor(&mut r, &[6, 3]));
        let m = g.apply(Primitive::MatMul, &[a, b]).unwrap();
        let s = g
            .apply(
                Primitive::SoftmaxCrossEntropy {
                    labels: vec![0, 2, 1, 0],
                },
                &[m],
            )
            .unwrap();
        g.scalar(s).unwrap()
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

// Finite-difference checks, one per primitive and per differentiable input.

#[test]
fn grad_check_matmul_both_sides() {
    let mut r = rng(21);
    let b_const = rand_tensor(&mut r, &[3, 4]);
    let w = rand_tensor(&mut r, &[2, 4]);
    for _ in 0..3 {
        let point = rand_tensor(&mut r, &[2, 3]);
        let b = b_const.clone();
        let wt = w.clone();
        let worst = grad_check(
            move |g, x| {
                let bb = g.leaf(b.clone());
                let m = g.apply(Primitive::MatMul, &[x, bb])?;
                scalarize(g, m, &wt)
            },
            &point,
            FD_STEP,
        )
        .unwrap();
        assert!(worst <= FD_TOL, "lhs worst {worst}");
    }
    let a_const = rand_tensor(&mut r, &[2, 3]);
    for _ in 0..3 {
        let point = rand_tensor(&mut r, &[3, 4]);
        let a = a_const.clone();
        let wt = w.clone();
        let worst = grad_check(
            move |g, x| {
                let aa = g.leaf(a.clone());
                let m = g.apply(Primitive::MatMul, &[aa, x])?;
                scalarize(g, m, &wt)
            },
            &point,
            FD_STEP,
        )
        .unwrap();
        assert!(worst <= FD_TOL, "rhs worst {worst}");
    }
}

#[test]
fn grad_check_conv2d_both_sides() {
    let mut r = rng(22);
    for pad in [0usize, 1] {
        let weight = rand_tensor(&mut r, &[2, 3, 3, 3]);
        let side_out = 4 + 2 * pad - 2;
        let w = rand_tensor(&mut r, &[1, 2, side_out, side_out]);
        let point = rand_tensor(&mut r, &[1, 3, 4, 4]);
        let (wc, sc) = (weight.clone(), w.clone());
        let worst = grad_check(
            move |g, x| {
                let ww = g.leaf(wc.clone());
                let c = g.apply(Primitive::Conv2d { pad }, &[x, ww])?;
                scalarize(g, c, &sc)
            },
            &point,
            FD_STEP,
        )
        .unwrap();
        assert!(worst <= FD_TOL, "image side pad {pad} worst {worst}");

        let img = rand_tensor(&mut r, &[1, 3, 4, 4]);
        let point = rand_tensor(&mut r, &[2, 3, 3, 3]);
        let (ic, sc) = (img.clone(), w.clone());
        let worst = grad_check(
            move |g, x| {
                let xi = g.leaf(ic.clone());
                let c = g.apply(Primitive::Conv2d { pad }, &[xi, x])?;
                scalarize(g, c, &sc)
            },
            &point,
            FD_STEP,
        )
        .unwrap();
        assert!(worst <= FD_TOL, "weight side pad {pad} worst {worst}");
    }
}

#[test]
fn grad_check_bias_add_both_arms() {
    let mut r = rng(23);
    let w2 = rand_tensor(&mut r, &[3, 4]);
    let bias = rand_tensor(&mut r, &[4]);
    let bc = bias.clone();
    let wc = w2.clone();
    let worst = grad_check(
        move |g, x| {
            let b = g.leaf(bc.clone());
            let s = g.apply(Primitive::BiasAdd, &[x, b])?;
            scalarize(g, s, &wc)
        },
        &rand_tensor(&mut r, &[3, 4]),
        FD_STEP,
    )
    .unwrap();
    assert!(worst <= FD_TOL);

    let input = rand_tensor(&mut r, &[3, 4]);
    let (ic, wc) = (input, w2);
    let worst = grad_check(
        move |g, x| {
            let a = g.leaf(ic.clone());
            let s = g.apply(Primitive::BiasAdd, &[a, x])?;
            scalarize(g, s, &wc)
        },
        &rand_tensor(&mut r, &[4]),
        FD_STEP,
    )
    .unwrap();
    assert!(worst <= FD_TOL);

    let w4 = rand_tensor(&mut r, &[2, 3, 2, 2]);
    let (ic, wc) = (rand_tensor(&mut r, &[2, 3, 2, 2]), w4);
    let worst = grad_check(
        move |g, x| {
            let a = g.leaf(ic.clone());
            let s = g.apply(Primitive::BiasAdd, &[a, x])?;
            scalarize(g, s, &wc)
        },
        &rand_tensor(&mut r, &[3]),
        FD_STEP,
    )
    .unwrap();
    assert!(worst <= FD_TOL);
}

#[test]
fn grad_check_relu_away_from_kink() {
    let mut r = rng(24);
    let w = rand_tensor(&mut r, &[2, 5]);
    for _ in 0..3 {
        let point = rand_tensor_off_kink(&mut r, &[2, 5]);
        let wc = w.clone();
        let worst = grad_check(
            move |g, x| {
                let y = g.apply(Primitive::Relu, &[x])?;
                scalarize(g, y, &wc)
            },
            &point,
            FD_STEP,
        )
        .unwrap();
        assert!(worst <= FD_TOL, "worst {worst}");
    }
}

#[test]
fn grad_check_maxpool_flatten() {
    let mut r = rng(25);
    let w = rand_tensor(&mut r, &[1, 8]);
    for _ in 0..3 {
        let point = rand_tensor(&mut r, &[1, 2, 4, 4]);
        let wc = w.clone();
        let worst = grad_check(
            move |g, x| {
                let p = g.apply(Primitive::MaxPool2, &[x])?;
                let f = g.apply(Primitive::Flatten, &[p])?;
                scalarize(g, f, &wc)
            },
            &point,
            FD_STEP,
        )
        .unwrap();
        assert!(worst <= FD_TOL, "worst {worst}");
    }
}

#[test]
fn grad_check_softmax_cross_entropy() {
    let mut r = rng(26);
    for _ in 0..3 {
        let point = rand_tensor(&mut r, &[4, 5]);
        let labels = vec![0, 3, 2, 4];
        let worst = grad_check(
            move |g, x| g.apply(Primitive::SoftmaxCrossEntropy { labels: labels.clone() }, &[x]),
            &point,
            FD_STEP,
        )
        .unwrap();
        assert!(worst <= FD_TOL, "worst {worst}");
    }
}

#[test]
fn grad_check_logsumexp_ranks() {
    let mut r = rng(27);
    let worst = grad_check(
        |g, x| g.apply(Primitive::LogSumExp, &[x]),
        &rand_tensor(&mut r, &[6]),
        FD_STEP,
    )
    .unwrap();
    assert!(worst <= FD_TOL);

    let w = rand_tensor(&mut r, &[3]);
    let worst = grad_check(
        move |g, x| {
            let l = g.apply(Primitive::LogSumExp, &[x])?;
            scalarize(g, l, &w)
        },
        &rand_tensor(&mut r, &[3, 4]),
        FD_STEP,
    )
    .unwrap();
    assert!(worst <= FD_TOL);
}

#[test]
fn grad_check_cosine_both_sides() {
    let mut r = rng(28);
    let b = rand_tensor_off_kink(&mut r, &[5]);
    for _ in 0..3 {
        let point = rand_tensor_off_kink(&mut r, &[5]);
        let bc = b.clone();
        let worst = grad_check(
            move |g, x| {
                let bb = g.leaf(bc.clone());
                g.apply(Primitive::Cosine, &[x, bb])
            },
            &point,
            FD_STEP,
        )
        .unwrap();
        assert!(worst <= FD_TOL, "lhs worst {worst}");
        let bc = b.clone();
        let worst = grad_check(
            move |g, x| {
                let bb = g.leaf(bc.clone());
                g.apply(Primitive::Cosine, &[bb, x])
            },
            &point,
            FD_STEP,
        )
        .unwrap();
        assert!(worst <= FD_TOL, "rhs worst {worst}");
    }
}

#[test]
fn grad_check_elementwise_and_reduce() {
    let mut r = rng(29);
    let other = rand_tensor(&mut r, &[2, 3]);
    let w = rand_tensor(&mut r, &[2, 3]);
    for p in [Primitive::Add, Primitive::Sub, Primitive::Mul] {
        let (oc, wc) = (other.clone(), w.clone());
        let pc = p.clone();
        let worst = grad_check(
            move |g, x| {
                let o = g.leaf(oc.clone());
                let y = g.apply(pc.clone(), &[x, o])?;
                scalarize(g, y, &wc)
            },
            &rand_tensor(&mut r, &[2, 3]),
            FD_STEP,
        )
        .unwrap();
        assert!(worst <= FD_TOL, "{} worst {worst}", p.name());
    }
    let worst = grad_check(
        |g, x| {
            let y = g.apply(Primitive::Scale { factor: -2.5 }, &[x])?;
            g.apply(Primitive::MeanReduce, &[y])
        },
        &rand_tensor(&mut r, &[7]),
        FD_STEP,
    )
    .unwrap();
    assert!(worst <= FD_TOL);
}

#[test]
fn grad_check_sign_has_zero_gradient() {
    let mut r = rng(30);
    let w = rand_tensor(&mut r, &[4]);
    let point = rand_tensor_off_kink(&mut r, &[4]);
    let worst = grad_check(
        move |g, x| {
            let s = g.apply(Primitive::Sign, &[x])?;
            scalarize(g, s, &w)
        },
        &point,
        FD_STEP,
    )
    .unwrap();
    assert!(worst <= FD_TOL);
}

#[test]
fn grad_check_row_stack_take_drop_max() {
    let mut r = rng(31);
    // Row -> LogSumExp -> Stack composition.
    let w = rand_tensor(&mut r, &[3]);
    let wc = w.clone();
    let worst = grad_check(
        move |g, x| {
            let mut scalars = Vec::new();
            for i in 0..3 {
                let row = g.apply(Primitive::Row { index: i }, &[x])?;
                scalars.push(g.apply(Primitive::LogSumExp, &[row])?);
            }
            let stacked = g.apply(Primitive::Stack, &scalars)?;
            scalarize(g, stacked, &wc)
        },
        &rand_tensor(&mut r, &[3, 4]),
        FD_STEP,
    )
    .unwrap();
    assert!(worst <= FD_TOL, "row/stack worst {worst}");

    let labels = vec![1, 0, 3];
    let wn = rand_tensor(&mut r, &[3]);
    let (lc, wc) = (labels.clone(), wn.clone());
    let worst = grad_check(
        move |g, x| {
            let t = g.apply(Primitive::TakeLabel { labels: lc.clone() }, &[x])?;
            scalarize(g, t, &wc)
        },
        &rand_tensor(&mut r, &[3, 4]),
        FD_STEP,
    )
    .unwrap();
    assert!(worst <= FD_TOL, "take-label worst {worst}");

    let wd = rand_tensor(&mut r, &[3, 3]);
    let (lc, wc) = (labels.clone(), wd);
    let worst = grad_check(
        move |g, x| {
            let t = g.apply(Primitive::DropLabel { labels: lc.clone() }, &[x])?;
            scalarize(g, t, &wc)
        },
        &rand_tensor(&mut r, &[3, 4]),
        FD_STEP,
    )
    .unwrap();
    assert!(worst <= FD_TOL, "drop-label worst {worst}");

    let wm = rand_tensor(&mut r, &[3]);
    let worst = grad_check(
        move |g, x| {
            let t = g.apply(Primitive::MaxLastAxis, &[x])?;
            scalarize(g, t, &wm)
        },
        &rand_tensor(&mut r, &[3, 4]),
        FD_STEP,
    )
    .unwrap();
    assert!(worst <= FD_TOL, "max worst {worst}");
}

proptest! {
    #[test]
    fn logsumexp_is_shift_invariant(
        xs in prop::collection::vec(-40.0f64..40.0, 1..8),
        c in -25.0f64..25.0,
    ) {
        let n = xs.len();
        let mut g = ValueGraph::new();
        let a = g.leaf(Tensor::new(vec![n], xs.clone()).unwrap());
        let l1 = g.apply(Primitive::LogSumExp, &[a]).unwrap();
        let shifted: Vec<f64> = xs.iter().map(|v| v + c).collect();
        let b = g.leaf(Tensor::new(vec![n], shifted).unwrap());
        let l2 = g.apply(Primitive::LogSumExp, &[b]).unwrap();
        let (v1, v2) = (g.scalar(l1).unwrap(), g.scalar(l2).unwrap());
        prop_assert!((v2 - (v1 + c)).abs() <= 1e-9);
    }

    #[test]
    fn gradient_is_additive_over_sum_of_roots(
        xs in prop::collection::vec(-5.0f64..5.0, 2..6),
    ) {
        let n = xs.len();
        let t = Tensor::new(vec![n], xs).unwrap();

        let grad_of = |build: fn(&mut ValueGraph, NodeId) -> NodeId, t: &Tensor| {
            let mut g = ValueGraph::new();
            let x = g.leaf(t.clone());
            let root = build(&mut g, x);
            g.backward(root).unwrap().wrt(x).unwrap().clone()
        };

        let f = |g: &mut ValueGraph, x: NodeId| g.apply(Primitive::MeanReduce, &[x]).unwrap();
        let h = |g: &mut ValueGraph, x: NodeId| {
            let sq = g.apply(Primitive::Mul, &[x, x]).unwrap();
            g.apply(Primitive::MeanReduce, &[sq]).unwrap()
        };
        let fh = |g: &mut ValueGraph, x: NodeId| {
            let a = g.apply(Primitive::MeanReduce, &[x]).unwrap();
            let sq = g.apply(Primitive::Mul, &[x, x]).unwrap();
            let b = g.apply(Primitive::MeanReduce, &[sq]).unwrap();
            g.apply(Primitive::Add, &[a, b]).unwrap()
        };

        let gf = grad_of(f, &t);
        let gh = grad_of(h, &t);
        let gfh = grad_of(fh, &t);
        for i in 0..n {
            prop_assert!((gfh.data()[i] - (gf.data()[i] + gh.data()[i])).abs() <= 1e-12);
        }
    }
}
