use pgen::search::{
    beam_decode, greedy_decode, length_candidates, mask_predict, npd_decode, remask_count, Hypothesis, ParallelModel,
    SearchError, StepModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EOS: u32 = 3;

/// Next-token log-probs from a hash of the prefix.
struct Random {
    seed: u64,
    vocab: usize,
}

impl StepModel for Random {
    type State = Vec<u32>;
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn initial(&self) -> Vec<u32> {
        Vec::new()
    }
    fn step(&self, state: &mut Vec<u32>, token: u32) -> Result<Vec<f64>, SearchError> {
        state.push(token);
        let mut h = self.seed ^ 0xcbf2_9ce4_8422_2325;
        for &t in state.iter() {
            h = (h ^ u64::from(t)).wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let p: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(0.05..1.0)).collect();
        let z: f64 = p.iter().sum();
        Ok(p.iter().map(|x| (x / z).ln()).collect())
    }
}

/// Emits `seq` then eos with probability `conf` at each step.
struct Script {
    seq: Vec<u32>,
    conf: f64,
    vocab: usize,
}

impl StepModel for Script {
    type State = usize;
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn initial(&self) -> usize {
        0
    }
    fn step(&self, pos: &mut usize, _token: u32) -> Result<Vec<f64>, SearchError> {
        let want = self.seq.get(*pos).copied().unwrap_or(EOS);
        *pos += 1;
        let rest = (1.0 - self.conf) / (self.vocab - 1) as f64;
        Ok((0..self.vocab as u32).map(|v| if v == want { self.conf.ln() } else { rest.ln() }).collect())
    }
}

#[test]
fn greedy_stops_at_eos() {
    let m = Script { seq: vec![], conf: 0.9, vocab: 6 };
    let h = greedy_decode(&m, 10).unwrap();
    assert!(h.tokens.is_empty() && h.finished);
    let m = Script { seq: vec![5, 4, 5], conf: 0.9, vocab: 6 };
    assert_eq!(greedy_decode(&m, 10).unwrap().tokens, [5, 4, 5]);
}

#[test]
fn greedy_truncates_at_max_len() {
    let m = Script { seq: vec![5; 100], conf: 0.9, vocab: 6 };
    let h = greedy_decode(&m, 7).unwrap();
    assert_eq!(h.tokens.len(), 7);
    assert!(!h.finished);
}

#[test]
fn unit_beam_is_greedy() {
    for seed in 0..30 {
        let m = Random { seed, vocab: 6 };
        assert_eq!(beam_decode(&m, 1, 6, 0.0).unwrap(), greedy_decode(&m, 6).unwrap(), "seed {seed}");
    }
}

/// Best normalised score over every sequence of at most `max_len` steps.
fn exhaustive(m: &Random, max_len: usize, alpha: f64) -> f64 {
    fn walk(m: &Random, fed: &[u32], score: f64, max_len: usize, alpha: f64, best: &mut f64) {
        let tokens = fed.len() - 1;
        let mut state = fed[..tokens].to_vec();
        let lp = m.step(&mut state, fed[tokens]).unwrap();
        let closed = Hypothesis { tokens: vec![0; tokens], score: score + lp[EOS as usize], finished: true };
        *best = best.max(closed.normalized(alpha));
        for v in (0..m.vocab as u32).filter(|&v| v != EOS) {
            let s = score + lp[v as usize];
            if tokens + 1 == max_len {
                let open = Hypothesis { tokens: vec![0; max_len], score: s, finished: false };
                *best = best.max(open.normalized(alpha));
            } else {
                let mut next = fed.to_vec();
                next.push(v);
                walk(m, &next, s, max_len, alpha, best);
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    walk(m, &[m.bos()], 0.0, max_len, alpha, &mut best);
    best
}

#[test]
fn full_width_beam_is_exact_and_dominates_narrow_beams() {
    for seed in 0..15 {
        let m = Random { seed, vocab: 4 };
        for alpha in [0.0, 0.6] {
            let exact = exhaustive(&m, 3, alpha);
            let full = beam_decode(&m, 64, 3, alpha).unwrap().normalized(alpha);
            if alpha == 0.0 {
                assert!((full - exact).abs() < 1e-12, "seed {seed}");
            }
            for k in [1, 2, 3] {
                let narrow = beam_decode(&m, k, 3, alpha).unwrap().normalized(alpha);
                assert!(narrow <= exact + 1e-12);
            }
        }
    }
}

/// Prefers stopping immediately but keeps a confident long continuation.
struct ShortBias;

impl StepModel for ShortBias {
    type State = usize;
    fn vocab_size(&self) -> usize {
        6
    }
    fn initial(&self) -> usize {
        0
    }
    fn step(&self, pos: &mut usize, _t: u32) -> Result<Vec<f64>, SearchError> {
        *pos += 1;
        let p = if *pos == 1 {
            [0.01, 0.01, 0.01, 0.55, 0.01, 0.41]
        } else if *pos < 5 {
            [0.001, 0.001, 0.001, 0.001, 0.001, 0.995]
        } else {
            [0.001, 0.001, 0.001, 0.995, 0.001, 0.001]
        };
        Ok(p.iter().map(|x: &f64| x.ln()).collect())
    }
}

#[test]
fn length_penalty_favours_longer_output() {
    let short = beam_decode(&ShortBias, 4, 8, 0.0).unwrap();
    let long = beam_decode(&ShortBias, 4, 8, 2.0).unwrap();
    assert!(short.tokens.is_empty());
    assert!(long.tokens.len() >= short.tokens.len());
    assert_eq!(long.tokens, [5, 5, 5, 5]);
}

#[test]
fn remask_schedule() {
    assert_eq!(remask_count(10, 10, 10).unwrap(), 0);
    assert_eq!(remask_count(10, 1, 10).unwrap(), 9);
    assert_eq!(remask_count(7, 2, 3).unwrap(), 2);
    assert!(remask_count(7, 0, 3).is_err());
    assert!(remask_count(7, 4, 3).is_err());
}

/// Position-wise distributions fixed per position, ignoring the input.
struct Fixed {
    table: Vec<Vec<f64>>,
    src_len: usize,
    lengths: Vec<f64>,
}

impl ParallelModel for Fixed {
    fn vocab_size(&self) -> usize {
        self.table[0].len()
    }
    fn predict(&self, dec_in: &[u32]) -> Result<Vec<f64>, SearchError> {
        Ok((0..dec_in.len()).flat_map(|i| self.table[i % self.table.len()].clone()).collect())
    }
    fn src_len(&self) -> usize {
        self.src_len
    }
    fn length_probs(&self) -> Result<Vec<f64>, SearchError> {
        Ok(self.lengths.clone())
    }
}

fn random_fixed(seed: u64) -> Fixed {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = (0..5)
        .map(|_| {
            let p: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
            let z: f64 = p.iter().sum();
            p.iter().map(|x| x / z).collect()
        })
        .collect();
    Fixed { table, src_len: 4, lengths: vec![0.1, 0.2, 0.4, 0.2, 0.1] }
}

#[test]
fn single_iteration_is_argmax() {
    let m = random_fixed(1);
    let out = mask_predict(&m, 5, 1).unwrap();
    for (i, &t) in out.tokens.iter().enumerate() {
        let row = &m.table[i];
        let best = (0..8).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
        assert_eq!(t as usize, best);
    }
    assert_eq!(out.remasked, 0);
}

#[test]
fn input_independent_model_is_a_fixed_point() {
    let m = random_fixed(2);
    let one = mask_predict(&m, 5, 1).unwrap().tokens;
    for t in 2..8 {
        assert_eq!(mask_predict(&m, 5, t).unwrap().tokens, one);
    }
}

#[test]
fn length_candidates_clamp_and_order() {
    assert_eq!(length_candidates(&[0.1, 0.6, 0.3], 5, 2), [5, 6]);
    // offsets below zero clamp to length 1; duplicates are skipped
    assert_eq!(length_candidates(&[0.5, 0.3, 0.1, 0.05, 0.04], 1, 3), [1, 2, 3]);
}

#[test]
fn npd_single_candidate_is_mask_predict() {
    let m = random_fixed(3);
    let argmax_len = 4;
    assert_eq!(npd_decode(&m, 1, 3, 50).unwrap(), mask_predict(&m, argmax_len, 3).unwrap());
}

#[test]
fn npd_keeps_best_rescored_candidate() {
    let m = random_fixed(4);
    let got = npd_decode(&m, 5, 2, 50).unwrap();
    for len in length_candidates(&m.lengths, m.src_len, 5) {
        assert!(got.mean_log_prob() >= mask_predict(&m, len, 2).unwrap().mean_log_prob());
    }
}

/// Confident only at the gold length 3.
struct GoldAtThree;

impl ParallelModel for GoldAtThree {
    fn vocab_size(&self) -> usize {
        6
    }
    fn predict(&self, dec_in: &[u32]) -> Result<Vec<f64>, SearchError> {
        let gold = [5u32, 4, 5];
        let conf = if dec_in.len() == 3 { 0.95 } else { 0.4 };
        Ok((0..dec_in.len())
            .flat_map(|i| {
                let want = gold[i % 3];
                (0..6u32).map(move |v| if v == want { conf } else { (1.0 - conf) / 5.0 })
            })
            .collect())
    }
    fn src_len(&self) -> usize {
        3
    }
    fn length_probs(&self) -> Result<Vec<f64>, SearchError> {
        Ok(vec![0.1, 0.3, 0.25, 0.35, 0.0])
    }
}

#[test]
fn npd_selects_gold_among_candidates() {
    let out = npd_decode(&GoldAtThree, 3, 2, 50).unwrap();
    assert_eq!(out.tokens, [5, 4, 5]);
}
