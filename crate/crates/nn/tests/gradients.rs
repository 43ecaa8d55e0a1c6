//! Finite-difference oracle coverage for every differentiable op, plus the
//! tape-level contracts (zero gradients, non-differentiable paths,
//! determinism, linearity).

use murmur_nn::{evaluate, grad_check, Init, NnError, ParameterSet, Tape, Tensor};
use rand::Rng as _;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-4;

fn params_with(names: &[(&str, Vec<usize>)], seed: u64) -> ParameterSet {
    let mut p = ParameterSet::new(seed);
    for (name, shape) in names {
        let fan = *shape.last().unwrap_or(&1);
        p.create(name, shape.clone(), Init::FanIn(fan)).unwrap();
    }
    p
}

/// Reduce any node to a scalar by a fixed random weighting, so that the
/// checked loss is sensitive to every output element.
fn weighted(tape: &mut Tape, x: usize, seed: u64) -> usize {
    let shape = tape.value(x).shape().to_vec();
    let numel = tape.value(x).numel();
    let mut rng = murmur_nn::rng::rng_from(seed);
    let w: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c = tape.constant(Tensor::new(shape, w).unwrap()).unwrap();
    let m = tape.mul(x, c).unwrap();
    tape.sum_all(m).unwrap()
}

#[test]
fn identity_affine_passes_gradient_through() {
    // y = x @ I + 0 with x = (1, 2): y = (1, 2) and dL/dx = dL/dy.
    let mut p = ParameterSet::new(0);
    p.create("x", vec![1, 2], Init::Zeros).unwrap();
    p.get_mut("x").unwrap().data_mut().copy_from_slice(&[1.0, 2.0]);

    let eval = evaluate(&p, |tape, binder| {
        let x = binder.param(tape, "x")?;
        let w = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0])?)?;
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]))?;
        let y = tape.affine(x, w, b)?;
        // L = 3*y0 + 5*y1
        let c = tape.constant(Tensor::matrix(1, 2, vec![3.0, 5.0])?)?;
        let m = tape.mul(y, c)?;
        tape.sum_all(m)
    })
    .unwrap();
    assert_eq!(eval.loss(), 3.0 * 1.0 + 5.0 * 2.0);
    let grads = eval.gradients().unwrap();
    assert_eq!(grads["x"].data(), &[3.0, 5.0]);
}

#[test]
fn unused_parameter_gets_exact_zero_gradient() {
    let p = params_with(&[("used", vec![3]), ("unused", vec![4])], 1);
    let eval = evaluate(&p, |tape, binder| {
        let u = binder.param(tape, "used")?;
        let _ = binder.param(tape, "unused")?;
        tape.sum_all(u)
    })
    .unwrap();
    let grads = eval.gradients().unwrap();
    assert!(grads["unused"].data().iter().all(|&v| v == 0.0));
    assert!(grads["used"].data().iter().all(|&v| v == 1.0));
}

#[test]
fn three_layer_random_graph_matches_finite_differences() {
    let p = params_with(
        &[
            ("w1", vec![4, 5]),
            ("b1", vec![5]),
            ("w2", vec![5, 3]),
            ("b2", vec![3]),
            ("w3", vec![3, 2]),
            ("b3", vec![2]),
        ],
        42,
    );
    let report = grad_check(&p, STEP, |tape, binder| {
        let mut rng = murmur_nn::rng::rng_from(7);
        let x = tape.constant(Tensor::matrix(
            2,
            4,
            (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?)?;
        let w1 = binder.param(tape, "w1")?;
        let b1 = binder.param(tape, "b1")?;
        let w2 = binder.param(tape, "w2")?;
        let b2 = binder.param(tape, "b2")?;
        let w3 = binder.param(tape, "w3")?;
        let b3 = binder.param(tape, "b3")?;
        let h1 = tape.affine(x, w1, b1)?;
        let h1 = tape.tanh(h1)?;
        let h2 = tape.affine(h1, w2, b2)?;
        let h2 = tape.gelu(h2)?;
        let h3 = tape.affine(h2, w3, b3)?;
        let sm = tape.log_softmax_rows(h3)?;
        tape.mean_all(sm)
    })
    .unwrap();
    assert!(
        report.max_rel_err < TOL,
        "max rel err {} at {:?}",
        report.max_rel_err,
        report.worst_param
    );
}

#[test]
fn linear_graph_gradient_check_is_essentially_exact() {
    let p = params_with(&[("w", vec![3, 3]), ("b", vec![3])], 5);
    let report = grad_check(&p, STEP, |tape, binder| {
        let x = tape.constant(Tensor::matrix(2, 3, vec![0.3, -1.2, 0.7, 1.1, 0.4, -0.6])?)?;
        let w = binder.param(tape, "w")?;
        let b = binder.param(tape, "b")?;
        let y = tape.affine(x, w, b)?;
        tape.sum_all(y)
    })
    .unwrap();
    assert!(
        report.max_rel_err < 1e-10,
        "linear graph err {}",
        report.max_rel_err
    );
}

#[test]
fn softmax_cross_entropy_matches_finite_differences() {
    let p = params_with(&[("logits", vec![3, 5])], 9);
    let report = grad_check(&p, STEP, |tape, binder| {
        let logits = binder.param(tape, "logits")?;
        let lp = tape.log_softmax_rows(logits)?;
        // NLL of classes 2, 0, 4
        let t0 = tape.pick(lp, 2)?;
        let t1 = tape.pick(lp, 5)?;
        let t2 = tape.pick(lp, 14)?;
        let s = tape.stack_scalars(&[t0, t1, t2])?;
        let m = tape.mean_all(s)?;
        tape.scale(m, -1.0)
    })
    .unwrap();
    assert!(report.max_rel_err < TOL, "err {}", report.max_rel_err);
}

#[test]
fn hard_argmax_on_checked_path_is_reported_not_silently_zero() {
    let p = params_with(&[("x", vec![2, 3])], 3);
    let eval = evaluate(&p, |tape, binder| {
        let x = binder.param(tape, "x")?;
        let h = tape.argmax_one_hot_rows(x)?;
        tape.sum_all(h)
    })
    .unwrap();
    match eval.gradients() {
        Err(NnError::NonDifferentiable { op }) => assert_eq!(op, "argmax_one_hot_rows"),
        other => panic!("expected NonDifferentiable, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn argmax_off_the_gradient_path_is_fine() {
    let p = params_with(&[("x", vec![2, 3])], 3);
    let eval = evaluate(&p, |tape, binder| {
        let x = binder.param(tape, "x")?;
        let c = tape.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.])?)?;
        let _hard = tape.argmax_one_hot_rows(c)?; // constant path, ignored
        tape.sum_all(x)
    })
    .unwrap();
    assert!(eval.gradients().is_ok());
}

#[test]
fn every_op_passes_a_randomized_gradient_check() {
    // One compact graph per op; all checked at 1e-4.
    type Builder = fn(&mut Tape, &mut murmur_nn::Binder) -> murmur_nn::Result<usize>;
    let cases: Vec<(&str, Vec<(&str, Vec<usize>)>, Builder)> = vec![
        ("add", vec![("a", vec![2, 3]), ("b", vec![2, 3])], |t, bi| {
            let a = bi.param(t, "a")?;
            let b = bi.param(t, "b")?;
            let y = t.add(a, b)?;
            Ok(weighted(t, y, 100))
        }),
        ("sub", vec![("a", vec![2, 3]), ("b", vec![2, 3])], |t, bi| {
            let a = bi.param(t, "a")?;
            let b = bi.param(t, "b")?;
            let y = t.sub(a, b)?;
            Ok(weighted(t, y, 101))
        }),
        ("mul", vec![("a", vec![2, 3]), ("b", vec![2, 3])], |t, bi| {
            let a = bi.param(t, "a")?;
            let b = bi.param(t, "b")?;
            let y = t.mul(a, b)?;
            Ok(weighted(t, y, 102))
        }),
        ("scale_add_scalar", vec![("a", vec![4])], |t, bi| {
            let a = bi.param(t, "a")?;
            let y = t.scale(a, -2.5)?;
            let y = t.add_scalar(y, 0.7)?;
            Ok(weighted(t, y, 103))
        }),
        (
            "matmul",
            vec![("a", vec![3, 4]), ("b", vec![4, 2])],
            |t, bi| {
                let a = bi.param(t, "a")?;
                let b = bi.param(t, "b")?;
                let y = t.matmul(a, b)?;
                Ok(weighted(t, y, 104))
            },
        ),
        ("transpose", vec![("a", vec![3, 2])], |t, bi| {
            let a = bi.param(t, "a")?;
            let y = t.transpose(a)?;
            Ok(weighted(t, y, 105))
        }),
        (
            "add_row",
            vec![("a", vec![3, 4]), ("r", vec![4])],
            |t, bi| {
                let a = bi.param(t, "a")?;
                let r = bi.param(t, "r")?;
                let y = t.add_row(a, r)?;
                Ok(weighted(t, y, 106))
            },
        ),
        (
            "conv1d",
            vec![("x", vec![9, 2]), ("k", vec![3, 2, 4])],
            |t, bi| {
                let x = bi.param(t, "x")?;
                let k = bi.param(t, "k")?;
                let y = t.conv1d(x, k, 2)?;
                Ok(weighted(t, y, 107))
            },
        ),
        ("gelu", vec![("a", vec![6])], |t, bi| {
            let a = bi.param(t, "a")?;
            let y = t.gelu(a)?;
            Ok(weighted(t, y, 108))
        }),
        ("tanh", vec![("a", vec![6])], |t, bi| {
            let a = bi.param(t, "a")?;
            let y = t.tanh(a)?;
            Ok(weighted(t, y, 109))
        }),
        ("softmax_rows", vec![("a", vec![3, 5])], |t, bi| {
            let a = bi.param(t, "a")?;
            let y = t.softmax_rows(a, None)?;
            Ok(weighted(t, y, 110))
        }),
        ("softmax_rows_causal", vec![("a", vec![4, 4])], |t, bi| {
            let a = bi.param(t, "a")?;
            let y = t.softmax_rows(a, Some(vec![1, 2, 3, 4]))?;
            Ok(weighted(t, y, 111))
        }),
        ("log_softmax_rows", vec![("a", vec![3, 5])], |t, bi| {
            let a = bi.param(t, "a")?;
            let y = t.log_softmax_rows(a)?;
            Ok(weighted(t, y, 112))
        }),
        (
            "layer_norm_rows",
            vec![("a", vec![3, 6]), ("g", vec![6]), ("b", vec![6])],
            |t, bi| {
                let a = bi.param(t, "a")?;
                let g = bi.param(t, "g")?;
                let b = bi.param(t, "b")?;
                let y = t.layer_norm_rows(a, g, b, 1e-5)?;
                Ok(weighted(t, y, 113))
            },
        ),
        (
            "concat_slice_cols",
            vec![("a", vec![2, 3]), ("b", vec![2, 2])],
            |t, bi| {
                let a = bi.param(t, "a")?;
                let b = bi.param(t, "b")?;
                let y = t.concat_cols(&[a, b])?;
                let z = t.slice_cols(y, 1, 3)?;
                Ok(weighted(t, z, 114))
            },
        ),
        (
            "stack_rows",
            vec![("a", vec![4]), ("b", vec![4])],
            |t, bi| {
                let a = bi.param(t, "a")?;
                let b = bi.param(t, "b")?;
                let y = t.stack_rows(&[a, b])?;
                Ok(weighted(t, y, 115))
            },
        ),
        ("mean_rows_pick_row", vec![("a", vec![3, 4])], |t, bi| {
            let a = bi.param(t, "a")?;
            let m = t.mean_rows(a)?;
            let r = t.row(a, 1)?;
            let s1 = weighted(t, m, 116);
            let s2 = weighted(t, r, 117);
            let p = t.pick(a, 5)?;
            let st = t.stack_scalars(&[s1, s2, p])?;
            t.sum_all(st)
        }),
        (
            "gather_rows",
            vec![("table", vec![5, 3])],
            |t, bi| {
                let table = bi.param(t, "table")?;
                let y = t.gather_rows(table, &[0, 2, 2, 4])?;
                Ok(weighted(t, y, 118))
            },
        ),
        (
            "replace_rows",
            vec![("x", vec![4, 3]), ("r", vec![3])],
            |t, bi| {
                let x = bi.param(t, "x")?;
                let r = bi.param(t, "r")?;
                let y = t.replace_rows(x, r, &[true, false, true, false])?;
                Ok(weighted(t, y, 119))
            },
        ),
        (
            "cosine_sim",
            vec![("a", vec![5]), ("b", vec![5])],
            |t, bi| {
                let a = bi.param(t, "a")?;
                let b = bi.param(t, "b")?;
                t.cosine_sim(a, b)
            },
        ),
        (
            // The straight-through estimator's soft path is checked via the
            // softmax cases above; the hard forward only admits a finite
            // difference check on the codebook side.
            "st_select_codebook",
            vec![("codebook", vec![4, 3])],
            |t, bi| {
                let codebook = bi.param(t, "codebook")?;
                let soft = t.constant(Tensor::vector(vec![0.1, 0.6, 0.2, 0.1]))?;
                let q = t.st_select(soft, codebook)?;
                Ok(weighted(t, q, 120))
            },
        ),
        ("ln", vec![("a", vec![4])], |t, bi| {
            let a = bi.param(t, "a")?;
            // keep strictly positive
            let y = t.mul(a, a)?;
            let y = t.add_scalar(y, 0.5)?;
            let y = t.ln(y)?;
            Ok(weighted(t, y, 121))
        }),
    ];

    for (name, shapes, build) in cases {
        let p = params_with(&shapes, 1234 ^ name.len() as u64);
        let report = grad_check(&p, STEP, build)
            .unwrap_or_else(|e| panic!("{}: grad check failed to run: {}", name, e));
        assert!(
            report.max_rel_err < TOL,
            "{}: max rel err {} at {:?}",
            name,
            report.max_rel_err,
            report.worst_param
        );
    }
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut p = ParameterSet::new(0);
    p.create("a", vec![4], Init::Zeros).unwrap();
    p.get_mut("a")
        .unwrap()
        .data_mut()
        .copy_from_slice(&[1.5, -0.5, 0.3, -2.0]);
    let report = grad_check(&p, STEP, |t, bi| {
        let a = bi.param(t, "a")?;
        let y = t.relu(a)?;
        Ok(weighted(t, y, 122))
    })
    .unwrap();
    assert!(report.max_rel_err < TOL);
}

#[test]
fn shape_mismatch_names_the_op_and_shapes() {
    let p = params_with(&[("a", vec![2, 3]), ("b", vec![3, 3])], 0);
    let err = match evaluate(&p, |tape, binder| {
        let a = binder.param(tape, "a")?;
        let b = binder.param(tape, "b")?;
        tape.add(a, b)
    }) {
        Err(e) => e,
        Ok(_) => panic!("expected shape mismatch"),
    };
    let msg = err.to_string();
    assert!(msg.contains("add"), "{}", msg);
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 3]"), "{}", msg);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let p = params_with(&[("a", vec![2, 2])], 0);
    let eval = evaluate(&p, |tape, binder| binder.param(tape, "a")).unwrap();
    assert!(matches!(
        eval.tape.backward(eval.output),
        Err(NnError::NonScalarLoss { .. })
    ));
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let p = params_with(&[("w", vec![6, 6]), ("b", vec![6])], 77);
        let eval = evaluate(&p, |tape, binder| {
            let x = tape.constant(Tensor::matrix(
                4,
                6,
                (0..24).map(|i| ((i * 31 % 17) as f64 - 8.0) / 8.0).collect(),
            )?)?;
            let w = binder.param(tape, "w")?;
            let b = binder.param(tape, "b")?;
            let h = tape.affine(x, w, b)?;
            let h = tape.gelu(h)?;
            let s = tape.softmax_rows(h, None)?;
            tape.mean_all(s)
        })
        .unwrap();
        let loss = eval.loss();
        let grads = eval.gradients().unwrap();
        (loss, grads["w"].data().to_vec())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}

#[test]
fn gradient_of_summed_losses_is_sum_of_gradients() {
    let p = params_with(&[("w", vec![3, 3])], 13);
    let loss_a = |t: &mut Tape, bi: &mut murmur_nn::Binder| -> murmur_nn::Result<usize> {
        let w = bi.param(t, "w")?;
        let y = t.tanh(w)?;
        t.sum_all(y)
    };
    let loss_b = |t: &mut Tape, bi: &mut murmur_nn::Binder| -> murmur_nn::Result<usize> {
        let w = bi.param(t, "w")?;
        let y = t.mul(w, w)?;
        t.mean_all(y)
    };
    let ga = evaluate(&p, loss_a).unwrap().gradients().unwrap();
    let gb = evaluate(&p, loss_b).unwrap().gradients().unwrap();
    let gsum = evaluate(&p, |t, bi| {
        let a = loss_a(t, bi)?;
        let b = loss_b(t, bi)?;
        t.add(a, b)
    })
    .unwrap()
    .gradients()
    .unwrap();
    for ((x, y), z) in ga["w"]
        .data()
        .iter()
        .zip(gb["w"].data())
        .zip(gsum["w"].data())
    {
        assert!((x + y - z).abs() < 1e-12);
    }
}

#[test]
fn non_finite_intermediate_identifies_the_op() {
    let mut p = ParameterSet::new(0);
    p.create("a", vec![2], Init::Zeros).unwrap();
    p.get_mut("a").unwrap().data_mut().copy_from_slice(&[0.0, 1.0]);
    let err = match evaluate(&p, |tape, binder| {
        let a = binder.param(tape, "a")?;
        tape.ln(a) // ln(0) = -inf
    }) {
        Err(e) => e,
        Ok(_) => panic!("expected non-finite error"),
    };
    match err {
        NnError::NonFinite { op } => assert_eq!(op, "ln"),
        other => panic!("expected NonFinite, got {}", other),
    }
}
