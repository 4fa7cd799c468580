use std::sync::Arc;

use pgen::batching::{DataLoader, SequentialSampler, ShuffleSampler};
use pgen::criterion::CrossEntropy;
use pgen::eval::{Polarity, ScoreBoard};
use pgen::model::{LinearModel, SeqModel};
use pgen::pipeline::{with_bos_eos, ProcessedSample};
use pgen::tensor::Tensor;
use pgen::trainer::{
    adam_step, rate, AdamConfig, AdamState, Checkpoint, Schedule, StopReason, Trainer, TrainerConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn adam_zero_gradient_keeps_params() {
    let mut p = vec![Tensor::vector(vec![1.0, -3.0])];
    let g = vec![Tensor::zeros(&[2])];
    let mut st = AdamState::default();
    adam_step(&mut p, &g, &mut st, 0.1, AdamConfig::default()).unwrap();
    assert_eq!(p[0].data(), [1.0, -3.0]);
    assert_eq!(st.t, 1);
}

#[test]
fn adam_first_step_closed_form() {
    let mut p = vec![Tensor::scalar(1.0)];
    let g = vec![Tensor::scalar(2.0)];
    let mut st = AdamState::default();
    adam_step(&mut p, &g, &mut st, 0.1, AdamConfig::default()).unwrap();
    // bias-corrected m̂ = 2, v̂ = 4
    let expected = 1.0 - 0.1 * (2.0 / (2.0 + 1e-9));
    assert!((p[0].item() - expected).abs() < 1e-15);
    assert!((p[0].item() - 0.9).abs() < 1e-9);
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut p = vec![Tensor::vector(vec![0.3, 0.1, -0.7])];
        let mut st = AdamState::default();
        for i in 0..5 {
            let g = vec![Tensor::vector(vec![0.1 * i as f64, -0.2, 0.05])];
            adam_step(&mut p, &g, &mut st, 0.01, AdamConfig::default()).unwrap();
        }
        (p, st)
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_rejects_mismatched_grads() {
    let mut p = vec![Tensor::zeros(&[2])];
    let mut st = AdamState::default();
    assert!(adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st, 0.1, AdamConfig::default()).is_err());
    assert!(adam_step(&mut p, &[], &mut st, 0.1, AdamConfig::default()).is_err());
}

#[test]
fn schedule_examples() {
    let noam = Schedule::Noam { d_model: 64, warmup: 100, factor: 1.0 };
    assert!((rate(&noam, 100) - 0.0125).abs() < 1e-15);
    let lin = Schedule::Linear { start: 0.5, end: 0.3, total: Some(100) };
    assert!((rate(&lin, 50) - 0.4).abs() < 1e-15);
    assert_eq!(rate(&lin, 500), 0.3);
    for s in [0, 1, 10_000] {
        assert_eq!(rate(&Schedule::Constant(0.7), s), 0.7);
    }
}

fn samples(n: usize, seed: u64) -> Arc<Vec<ProcessedSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Arc::new(
        (0..n)
            .map(|_| {
                let s: Vec<u32> = (0..rng.gen_range(2..6)).map(|_| rng.gen_range(5..12)).collect();
                ProcessedSample::new(s.clone(), Some(with_bos_eos(&s)))
            })
            .collect(),
    )
}

fn trainer(cfg: TrainerConfig, lr: Schedule) -> Trainer {
    let loader = DataLoader::new(samples(40, 1), Box::new(ShuffleSampler { batch_size: 8, seed: 3 })).unwrap();
    Trainer::new(
        Box::new(LinearModel::new(12, 7).unwrap()),
        Box::new(CrossEntropy { epsilon: 0.1 }),
        Box::new(loader),
        lr,
        cfg,
    )
}

#[test]
fn applied_rate_follows_schedule() {
    let lr = Schedule::Noam { d_model: 16, warmup: 4, factor: 2.0 };
    let mut t = trainer(TrainerConfig { max_steps: 12, eval_interval: 0, ..Default::default() }, lr.clone());
    t.train().unwrap();
    let want: Vec<f64> = (1..=12).map(|s| rate(&lr, s)).collect();
    assert_eq!(t.lr_trace(), want.as_slice());
}

#[test]
fn patience_counts_non_improving_evals() {
    let scores = std::sync::Mutex::new(vec![0.9, 0.8, 0.7, 0.6, 0.5].into_iter());
    let hook = Box::new(move |_: &dyn SeqModel| {
        let mut b = ScoreBoard::new();
        b.insert("valid", "bleu", scores.lock().unwrap().next().unwrap());
        Ok(b)
    });
    let cfg = TrainerConfig { max_steps: 100, eval_interval: 2, patience: Some(2), ..Default::default() };
    let mut t = trainer(cfg, Schedule::Constant(1e-3)).with_evaluator(hook, Polarity::HigherIsBetter);
    let out = t.train().unwrap();
    assert_eq!(out.stop, StopReason::EarlyStop);
    // evals at 2 (best), 4 and 6 (worse twice)
    assert_eq!(out.steps, 6);
    assert_eq!(out.best_step, Some(2));
    assert_eq!(t.state().bad_evals, 2);
}

#[test]
fn saves_checkpoints_and_selection() {
    let dir = tempfile::tempdir().unwrap();
    let scores = std::sync::Mutex::new(vec![0.1, 0.4, 0.3, 0.2].into_iter());
    let hook = Box::new(move |_: &dyn SeqModel| {
        let mut b = ScoreBoard::new();
        b.insert("valid", "bleu", scores.lock().unwrap().next().unwrap());
        Ok(b)
    });
    let cfg = TrainerConfig {
        max_steps: 8,
        eval_interval: 2,
        avg_k: 2,
        save_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let mut t = trainer(cfg, Schedule::Constant(1e-2)).with_evaluator(hook, Polarity::HigherIsBetter);
    let out = t.train().unwrap();
    assert_eq!(out.checkpoints.len(), 4);
    assert_eq!(out.best_step, Some(4));
    let best = Checkpoint::load(out.best.unwrap().to_str().unwrap()).unwrap();
    assert_eq!(best.state.step, 4);
    let c2 = Checkpoint::load(out.checkpoints[0].to_str().unwrap()).unwrap();
    let avg = Checkpoint::load(out.best_avg.unwrap().to_str().unwrap()).unwrap();
    for ((_, a), ((_, x), (_, y))) in avg.params.iter().zip(c2.params.iter().zip(&best.params)) {
        for ((m, p), q) in a.data().iter().zip(x.data()).zip(y.data()) {
            // stored as f32 on disk
            assert_eq!(*m, ((p + q) / 2.0) as f32 as f64);
        }
    }
}

#[test]
fn resume_from_saved_file_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = |max_steps| TrainerConfig {
        max_steps,
        eval_interval: 5,
        save_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let lr = Schedule::Noam { d_model: 16, warmup: 3, factor: 1.0 };
    let mut straight = trainer(cfg(13), lr.clone());
    straight.train().unwrap();
    let saved = dir.path().join("ckpt.step5.bin");
    let mut resumed = trainer(cfg(13), lr);
    resumed.resume_from(saved.to_str().unwrap()).unwrap();
    assert_eq!(resumed.state().step, 5);
    resumed.train().unwrap();
    assert_eq!(straight.model().params(), resumed.model().params());
}

#[test]
fn accumulation_matches_larger_batch() {
    let data = Arc::new(
        (0..24u32)
            .map(|i| {
                let s = vec![5 + i % 7, 5 + (i * 3) % 7, 5 + (i * 5) % 7];
                ProcessedSample::new(s.clone(), Some(with_bos_eos(&s)))
            })
            .collect::<Vec<_>>(),
    );
    let run = |batch_size, accumulate| {
        let loader = DataLoader::new(Arc::clone(&data), Box::new(SequentialSampler { batch_size })).unwrap();
        let cfg = TrainerConfig { max_steps: 5, accumulate, clip_norm: None, eval_interval: 0, ..Default::default() };
        let mut t = Trainer::new(
            Box::new(LinearModel::new(12, 2).unwrap()),
            Box::new(CrossEntropy { epsilon: 0.0 }),
            Box::new(loader),
            Schedule::Constant(0.03),
            cfg,
        );
        t.train().unwrap();
        t.into_model()
    };
    let a = run(3, 2);
    let b = run(6, 1);
    let fresh = LinearModel::new(12, 2).unwrap();
    for ((x, y), z) in a.params().tensors().iter().zip(b.params().tensors()).zip(fresh.params().tensors()) {
        assert!(x.max_abs_diff(y).unwrap() <= 1e-10);
        assert!(x.max_abs_diff(z).unwrap() > 0.0);
    }
}
