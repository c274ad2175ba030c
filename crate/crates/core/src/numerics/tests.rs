use proptest::prelude::*;

use super::*;
use crate::testutil::{grad_check, rng, weighted_sum};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn attn_inputs(d: usize, d_int: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    vec![
        Tensor::randn(&[d, d_int], 0.3, &mut r),
        Tensor::randn(&[d_int], 0.1, &mut r),
        Tensor::randn(&[d, d_int], 0.3, &mut r),
        Tensor::randn(&[d_int], 0.1, &mut r),
        Tensor::randn(&[d, d_int], 0.3, &mut r),
        Tensor::randn(&[d_int], 0.1, &mut r),
        Tensor::randn(&[d_int, d], 0.3, &mut r),
        Tensor::randn(&[d], 0.1, &mut r),
    ]
}

fn weights(v: &[Var]) -> AttentionWeights {
    AttentionWeights {
        q_w: v[0],
        q_b: v[1],
        k_w: v[2],
        k_b: v[3],
        v_w: v[4],
        v_b: v[5],
        out_w: v[6],
        out_b: v[7],
    }
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut tape = Tape::new();
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng(1));
    let i = tape.constant(Tensor::eye(3));
    let xv = tape.constant(x.clone());
    let y = tape.matmul(i, xv).unwrap();
    assert_eq!(tape.value(y), &x);

    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let b = tape.constant(t(&[2, 1], &[1., 1.]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3., 7.]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng(7);
    let a = Tensor::randn(&[4, 5], 1.0, &mut r);
    let b = Tensor::randn(&[5, 2], 1.0, &mut r);
    let err = grad_check(&[a.clone(), b.clone()], |tp, v| {
        let y = tp.matmul(v[0], v[1])?;
        tp.sum(y)
    });
    assert!(err < 1e-6, "{err}");
    let bt = b.transpose();
    let err = grad_check(&[a, bt], |tp, v| {
        let y = tp.matmul_t(v[0], v[1])?;
        weighted_sum(tp, y, 3)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_cases() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0., 0.]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(t(&[2], &[1000., 0.]));
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);

    let x = Tensor::randn(&[7], 2.0, &mut rng(2));
    let err = grad_check(&[x], |tp, v| {
        let y = tp.softmax(v[0], 0)?;
        weighted_sum(tp, y, 5)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_non_last_axis_sums_to_one() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[3, 4, 2], 3.0, &mut rng(4)));
    let y = tape.softmax(x, 1).unwrap();
    let v = tape.value(y);
    for o in 0..3 {
        for i in 0..2 {
            let s: f64 = (0..4).map(|j| v.get(&[o, j, i])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    let x = Tensor::randn(&[3, 4, 2], 1.0, &mut rng(5));
    let err = grad_check(&[x], |tp, v| {
        let y = tp.softmax(v[0], 1)?;
        weighted_sum(tp, y, 6)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn layer_norm_cases() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::ones(&[4]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let x = tape.constant(Tensor::full(&[1, 4], 3.5));
    let y = tape.layer_norm(x, g, b, LN_EPS).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[1, 2], &[1., 3.]));
    let y = tape.layer_norm(x, g, b, 0.0).unwrap();
    assert_eq!(tape.value(y).data(), &[-1., 1.]);

    let mut r = rng(8);
    let inputs = [
        Tensor::randn(&[3, 8], 1.0, &mut r),
        Tensor::randn(&[8], 1.0, &mut r),
        Tensor::randn(&[8], 1.0, &mut r),
    ];
    let err = grad_check(&inputs, |tp, v| {
        let y = tp.layer_norm(v[0], v[1], v[2], LN_EPS)?;
        weighted_sum(tp, y, 9)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn gelu_cases() {
    assert_eq!(gelu(0.0), 0.0);
    assert!((gelu(20.0) - 20.0).abs() < 1e-12);
    assert!(gelu(-20.0).abs() < 1e-12);
    let x = Tensor::randn(&[10], 2.0, &mut rng(10));
    let err = grad_check(&[x], |tp, v| {
        let y = tp.gelu(v[0])?;
        weighted_sum(tp, y, 11)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn mha_requires_divisible_internal_width() {
    let mut tape = Tape::new();
    let vars: Vec<Var> = attn_inputs(6, 6, 1).into_iter().map(|x| tape.constant(x)).collect();
    let x = tape.constant(Tensor::zeros(&[2, 6]));
    let err = mha(&mut tape, &weights(&vars), x, x, x, 4, None).unwrap_err();
    assert!(matches!(err, crate::Error::Config(_)));
}

#[test]
fn mha_single_key_ignores_query() {
    let mut tape = Tape::new();
    let vars: Vec<Var> = attn_inputs(4, 4, 2).into_iter().map(|x| tape.constant(x)).collect();
    let w = weights(&vars);
    let key = tape.constant(Tensor::randn(&[1, 4], 1.0, &mut rng(3)));
    let q1 = tape.constant(Tensor::randn(&[1, 4], 1.0, &mut rng(4)));
    let q2 = tape.constant(Tensor::randn(&[1, 4], 5.0, &mut rng(5)));
    let a = mha(&mut tape, &w, q1, key, key, 1, None).unwrap();
    let b = mha(&mut tape, &w, q2, key, key, 1, None).unwrap();
    let v = linear(&mut tape, key, w.v_w, w.v_b).unwrap();
    let expect = linear(&mut tape, v, w.out_w, w.out_b).unwrap();
    assert!(tape.value(a).max_abs_diff(tape.value(expect)) < 1e-12);
    assert!(tape.value(b).max_abs_diff(tape.value(expect)) < 1e-12);
}

#[test]
fn mha_selects_matching_key() {
    // Identity projections with a large query scale act like a low temperature.
    let d = 4;
    let mut tape = Tape::new();
    let eye = || Tensor::eye(4);
    let zero = || Tensor::zeros(&[4]);
    let ws = [eye(), zero(), eye(), zero(), eye(), zero(), eye(), zero()];
    let vars: Vec<Var> = ws.into_iter().map(|x| tape.constant(x)).collect();
    let keys = tape.constant(t(&[2, d], &[1., 0., 0., 0., 0., 1., 0., 0.]));
    let values = tape.constant(t(&[2, d], &[1., 2., 3., 4., -4., -3., -2., -1.]));
    let q = tape.constant(t(&[1, d], &[0., 200., 0., 0.]));
    let out = mha(&mut tape, &weights(&vars), q, keys, values, 1, None).unwrap();
    let got = tape.value(out).data();
    for (a, b) in got.iter().zip(&[-4., -3., -2., -1.]) {
        assert!((a - b).abs() < 1e-9, "{got:?}");
    }
}

#[test]
fn mha_gradient_all_projections() {
    let mut inputs = attn_inputs(8, 4, 12);
    let mut r = rng(13);
    inputs.push(Tensor::randn(&[3, 8], 1.0, &mut r));
    inputs.push(Tensor::randn(&[4, 8], 1.0, &mut r));
    inputs.push(Tensor::randn(&[4, 8], 1.0, &mut r));
    let err = grad_check(&inputs, |tp, v| {
        let y = mha(tp, &weights(v), v[8], v[9], v[10], 2, None)?;
        weighted_sum(tp, y, 14)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn backward_simple_losses() {
    let mut tape = Tape::new();
    let x0 = Tensor::randn(&[2, 3], 1.0, &mut rng(15));
    let x = tape.leaf(x0.clone(), true);
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), Tensor::ones(&[2, 3]));

    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    for (g, x) in g.data().iter().zip(x0.data()) {
        assert_eq!(*g, 2.0 * x);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(tape.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(Tensor::full(&[1, 2], 1.0));
    assert!(matches!(tape.layer_norm(x, g, b, 0.0), Err(crate::Error::NonFinite(_))));
}

#[test]
fn structural_ops_gradients() {
    let mut r = rng(16);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[2, 4], 1.0, &mut r);
    let c = Tensor::randn(&[3, 2], 1.0, &mut r);
    let bias = Tensor::randn(&[4], 1.0, &mut r);
    let err = grad_check(&[a, b, c, bias], |tp, v| {
        let rows = tp.concat_rows(&[v[0], v[1]])?;
        let top = tp.slice_rows(rows, 1, 3)?;
        let cols = tp.concat_cols(&[top, v[2]])?;
        let mid = tp.slice_cols(cols, 2, 3)?;
        let tr = tp.transpose(mid)?;
        let flat = tp.reshape(tr, &[9])?;
        let back = tp.reshape(flat, &[3, 3])?;
        let biased = tp.add_row(v[0], v[3])?;
        let g = tp.gather_rows(biased, &[2, 0, 2])?;
        let gs = tp.slice_cols(g, 0, 3)?;
        let both = tp.sub(back, gs)?;
        let ls = tp.log_softmax(both)?;
        let sc = tp.scale(ls, 0.3)?;
        weighted_sum(tp, sc, 17)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn seeded_forward_is_bit_identical() {
    let run = || {
        let mut tape = Tape::new();
        let vars: Vec<Var> = attn_inputs(8, 8, 20).into_iter().map(|x| tape.constant(x)).collect();
        let x = tape.constant(Tensor::randn(&[5, 8], 1.0, &mut rng(21)));
        let y = mha(&mut tape, &weights(&vars), x, x, x, 2, None).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop_composite_gradients(seed in 0u64..10_000, m in 1usize..4, k in 1usize..5, n in 2usize..5) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut r);
        let w = Tensor::randn(&[k, n], 1.0, &mut r);
        let g = Tensor::randn(&[n], 1.0, &mut r);
        let b = Tensor::randn(&[n], 1.0, &mut r);
        let err = grad_check(&[a, w, g, b], |tp, v| {
            let y = tp.matmul(v[0], v[1])?;
            let y = tp.layer_norm(y, v[2], v[3], LN_EPS)?;
            let y = tp.gelu(y)?;
            let y = tp.softmax(y, 1)?;
            weighted_sum(tp, y, seed + 1)
        });
        prop_assert!(err < 1e-4, "rel err {}", err);
    }

    #[test]
    fn prop_softmax_and_norm_rows(seed in 0u64..10_000, rows in 1usize..5, d in 2usize..9) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[rows, d], 4.0, &mut rng(seed)));
        let s = tape.softmax(x, 1).unwrap();
        for row in tape.value(s).data().chunks(d) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
        let g = tape.constant(Tensor::ones(&[d]));
        let b = tape.constant(Tensor::zeros(&[d]));
        let y = tape.layer_norm(x, g, b, LN_EPS).unwrap();
        for row in tape.value(y).data().chunks(d) {
            prop_assert!((row.iter().sum::<f64>() / d as f64).abs() < 1e-10);
        }
    }
}
