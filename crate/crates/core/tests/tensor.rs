use std::sync::Arc;

use pgen::tensor::{AttnMask, Tape, Tensor, TensorError};

fn t(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[&[1.0, 2.0], &[3.0, 4.0]]), false);
    let i = tape.leaf(t(&[&[1.0, 0.0], &[0.0, 1.0]]), false);
    let ai = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(ai), tape.value(a));
    let ones = tape.leaf(t(&[&[1.0], &[1.0]]), false);
    let p = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.value(p).data(), [3.0, 7.0]);
    assert_eq!(tape.value(p).shape(), [2, 1]);
    let bad = tape.leaf(Tensor::zeros(&[3, 1]), false);
    assert!(matches!(tape.matmul(a, bad), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn softmax_symmetric_and_stable() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::zeros(&[1, 4]), false);
    let s = tape.softmax(z);
    assert_eq!(tape.value(s).data(), [0.25; 4]);
    let big = tape.leaf(t(&[&[1000.0, 0.0]]), false);
    let s = tape.softmax(big);
    let d = tape.value(s).data();
    assert!(d.iter().all(|x| x.is_finite()));
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300);
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[&[0.3, -1.2, 2.0], &[1.0, 1.0, -4.0]]), true);
    let s = tape.softmax(x);
    let l = tape.sum(s);
    let g = tape.backward(l).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn layer_norm_cases() {
    let mut tape = Tape::new();
    let ones = tape.leaf(Tensor::full(&[2], 1.0), false);
    let zeros = tape.leaf(Tensor::zeros(&[2]), false);
    let c = tape.leaf(t(&[&[3.0, 3.0]]), false);
    let o = tape.layer_norm(c, ones, zeros, 1e-5).unwrap();
    assert_eq!(tape.value(o).data(), [0.0, 0.0]);

    let x = tape.leaf(t(&[&[1.0, -1.0]]), false);
    let o = tape.layer_norm(x, ones, zeros, 1e-12).unwrap();
    let d = tape.value(o).data();
    assert!((d[0] - 1.0).abs() < 1e-9 && (d[1] + 1.0).abs() < 1e-9);

    let bias = tape.leaf(Tensor::vector(vec![0.5, -2.0]), false);
    let o = tape.layer_norm(x, zeros, bias, 1e-5).unwrap();
    assert_eq!(tape.value(o).data(), [0.5, -2.0]);
}

#[test]
fn cross_entropy_uniform_is_ln_v() {
    for eps in [0.0, 0.1, 0.5] {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[3, 4]), false);
        let loss = tape.cross_entropy(l, &[0, 2, 3], eps, 99).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_all_ignored() {
    let mut tape = Tape::new();
    let l = tape.leaf(t(&[&[1.0, 2.0, 0.0], &[0.0, 5.0, 1.0]]), true);
    let loss = tape.cross_entropy(l, &[0, 0], 0.1, 0).unwrap();
    assert_eq!(tape.value(loss).item(), 0.0);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(l).map_or(true, |g| g.data().iter().all(|&v| v == 0.0)));
}

/// Smoothed cross entropy from the definition, one row.
fn smoothed_ce(logits: &[f64], target: usize, eps: f64) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
    let v = logits.len();
    logits
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let q = if i == target { 1.0 - eps } else { eps / (v - 1) as f64 };
            -q * (l - z)
        })
        .sum()
}

#[test]
fn smoothing_penalises_confident_correct_prediction() {
    let row = [8.0, 0.0, 0.0, 0.0];
    let mut values = Vec::new();
    for eps in [0.0, 0.1] {
        let mut tape = Tape::new();
        let l = tape.leaf(t(&[&row]), false);
        let loss = tape.cross_entropy(l, &[0], eps, 99).unwrap();
        let got = tape.value(loss).item();
        assert!((got - smoothed_ce(&row, 0, eps)).abs() < 1e-12);
        values.push(got);
    }
    assert!(values[1] > values[0]);
}

#[test]
fn backward_simple_cases() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 3]), true);
    let l = tape.sum(x);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), [1.0; 6]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), [2.0, 4.0]);
}

#[test]
fn backward_needs_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
}

#[test]
fn inference_tape_refuses_backward() {
    let mut tape = Tape::inference();
    let x = tape.leaf(Tensor::zeros(&[2]), true);
    let l = tape.sum(x);
    assert!(matches!(tape.backward(l), Err(TensorError::GradDisabled)));
}

#[test]
fn causal_mask_blocks_future_keys() {
    let mut tape = Tape::new();
    let scores = tape.leaf(Tensor::zeros(&[2, 3, 3]), false);
    let mask = Arc::new(AttnMask::causal(&[3], 3));
    let m = tape.mask_fill(scores, &mask, 2).unwrap();
    let p = tape.softmax(m);
    let d = tape.value(p).data();
    for h in 0..2 {
        for q in 0..3 {
            for k in 0..3 {
                let v = d[h * 9 + q * 3 + k];
                if k > q {
                    assert_eq!(v, 0.0);
                } else {
                    assert!((v - 1.0 / (q + 1) as f64).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn rank_above_three_rejected() {
    assert!(matches!(Tensor::new(&[1, 1, 1, 1], vec![0.0]), Err(TensorError::RankTooHigh(4))));
    assert!(matches!(Tensor::new(&[2, 2], vec![0.0]), Err(TensorError::DataLength { .. })));
}
