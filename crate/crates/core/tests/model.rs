use pgen::model::{ModelError, SeqModel, Transformer, TransformerConfig, Variant};
use pgen::pipeline::{TokenMatrix, BOS, MASK, PAD};
use pgen::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const V: usize = 12;

fn config(seed: u64) -> TransformerConfig {
    TransformerConfig {
        vocab_size: V,
        d_model: 16,
        n_heads: 2,
        enc_layers: 2,
        dec_layers: 2,
        d_ff: 24,
        max_positions: 10,
        dropout: 0.0,
        seed,
    }
}

fn ar() -> Transformer {
    Transformer::new(config(1), Variant::Autoregressive).unwrap()
}

fn nat(delta: usize) -> Transformer {
    Transformer::new(config(2), Variant::Parallel { length_delta: delta }).unwrap()
}

fn ar_logits(m: &Transformer, srcs: &[Vec<u32>], tgts: &[Vec<u32>]) -> (Vec<usize>, Vec<f64>) {
    let mut tape = Tape::inference();
    let v = m.params().bind(&mut tape);
    let out = m
        .ar_forward(&mut tape, &v, &TokenMatrix::from_seqs(srcs, PAD), &TokenMatrix::from_seqs(tgts, PAD), None)
        .unwrap();
    (tape.value(out).shape().to_vec(), tape.value(out).data().to_vec())
}

fn nat_logits(m: &Transformer, srcs: &[Vec<u32>], dec: &[Vec<u32>]) -> (Vec<usize>, Vec<f64>) {
    let mut tape = Tape::inference();
    let v = m.params().bind(&mut tape);
    let (out, _) = m
        .nat_forward(&mut tape, &v, &TokenMatrix::from_seqs(srcs, PAD), &TokenMatrix::from_seqs(dec, PAD), None)
        .unwrap();
    (tape.value(out).shape().to_vec(), tape.value(out).data().to_vec())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn ar_output_shape() {
    let (shape, _) = ar_logits(&ar(), &[vec![5, 6, 7], vec![8]], &[vec![BOS, 5], vec![BOS, 6, 7, 8]]);
    assert_eq!(shape, [2, 4, V]);
}

#[test]
fn ar_padding_does_not_leak() {
    let m = ar();
    let (src, tgt) = (vec![5, 6], vec![BOS, 7, 8]);
    let (_, alone) = ar_logits(&m, &[src.clone()], &[tgt.clone()]);
    let (_, batched) = ar_logits(&m, &[src, vec![9, 9, 9, 9, 9]], &[tgt, vec![BOS, 5, 5, 5, 5, 5]]);
    // first row of the batch, non-pad positions only
    let w = 6 * V;
    assert!(max_diff(&alone, &batched[..3 * V]) < 1e-12);
    assert_eq!(batched.len(), 2 * w);
}

#[test]
fn ar_is_causal() {
    let m = ar();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let src: Vec<u32> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(5..V as u32)).collect();
        let len = rng.gen_range(2..8);
        let mut tgt: Vec<u32> = vec![BOS];
        tgt.extend((1..len).map(|_| rng.gen_range(5..V as u32)));
        let j = rng.gen_range(1..len);
        let mut changed = tgt.clone();
        changed[j] = if tgt[j] == 5 { 6 } else { 5 };
        let (_, a) = ar_logits(&m, &[src.clone()], &[tgt]);
        let (_, b) = ar_logits(&m, &[src], &[changed]);
        assert_eq!(&a[..j * V], &b[..j * V], "rows before {j} moved");
        assert!(max_diff(&a[j * V..(j + 1) * V], &b[j * V..(j + 1) * V]) > 0.0);
    }
}

#[test]
fn incremental_step_matches_last_row() {
    let m = ar();
    let src = vec![5, 9, 7];
    let tgt = vec![BOS, 8];
    let (_, full) = ar_logits(&m, &[src.clone()], &[tgt.clone()]);
    let enc = m.encode_source(&src).unwrap();
    let mut state = m.start_decoding();
    assert_eq!(state.position(), 0);
    let mut last = Vec::new();
    for &tok in &tgt {
        last = m.ar_decode_step(&enc, &mut state, tok).unwrap();
    }
    assert!(max_diff(&last, &full[V..]) <= 1e-5);
}

#[test]
fn stepping_past_max_positions_fails() {
    let m = ar();
    let enc = m.encode_source(&[5]).unwrap();
    let mut state = m.start_decoding();
    for _ in 0..10 {
        m.ar_decode_step(&enc, &mut state, 5).unwrap();
    }
    assert!(matches!(m.ar_decode_step(&enc, &mut state, 5), Err(ModelError::PositionOverflow { .. })));
}

#[test]
fn nat_shape_and_source_padding() {
    let m = nat(3);
    let dec = vec![vec![MASK; 4], vec![MASK; 4]];
    let (shape, a) = nat_logits(&m, &[vec![5, 6], vec![7, 8, 9, 10]], &dec);
    assert_eq!(shape, [2, 4, V]);
    // same first row with a differently padded companion
    let (_, b) = nat_logits(&m, &[vec![5, 6], vec![7]], &dec);
    assert!(max_diff(&a[..4 * V], &b[..4 * V]) < 1e-12);
}

#[test]
fn nat_positions_see_every_source_token() {
    let m = nat(3);
    let src = vec![5, 6, 7, 8];
    let dec = vec![vec![MASK; 3]];
    let (_, base) = nat_logits(&m, &[src.clone()], &dec);
    for i in 0..src.len() {
        let mut s = src.clone();
        s[i] = 11;
        let (_, moved) = nat_logits(&m, &[s], &dec);
        for p in 0..3 {
            assert!(max_diff(&base[p * V..(p + 1) * V], &moved[p * V..(p + 1) * V]) > 0.0);
        }
    }
}

#[test]
fn length_distribution_sums_to_one() {
    let m = nat(3);
    let p = m.predict_length(&m.encode_source(&[5, 6, 7]).unwrap()).unwrap();
    assert_eq!(p.len(), 7);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    let m0 = nat(0);
    assert_eq!(m0.predict_length(&m0.encode_source(&[5]).unwrap()).unwrap(), [1.0]);
}

#[test]
fn wrong_variant_is_refused() {
    let a = ar();
    let n = nat(2);
    assert!(matches!(n.ar_decode_step(&n.encode_source(&[5]).unwrap(), &mut n.start_decoding(), BOS), Err(ModelError::Unsupported(_))));
    let mut tape = Tape::inference();
    let v = a.params().bind(&mut tape);
    let s = TokenMatrix::from_seqs(&[vec![5u32]], PAD);
    assert!(a.nat_forward(&mut tape, &v, &s, &s, None).is_err());
}

#[test]
fn out_of_vocab_ids_rejected() {
    let m = ar();
    assert!(matches!(m.encode_source(&[V as u32]), Err(ModelError::TokenOutOfRange { .. })));
}

#[test]
fn same_seed_same_parameters() {
    assert_eq!(ar().params(), ar().params());
    let other = Transformer::new(config(9), Variant::Autoregressive).unwrap();
    assert_ne!(ar().params(), other.params());
}
