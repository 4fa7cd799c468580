//! The training loop: gradient accumulation, clipping, scheduled Adam,
//! periodic evaluation with model selection, early stopping, checkpoints
//! and bit-exact resumption.

mod adam;
mod checkpoint;
mod schedule;

pub use adam::{adam_step, clip_global_norm, AdamConfig};
pub use checkpoint::{checkpoint_name, AdamState, Checkpoint, CheckpointError, EvalRecord, RngState, TrainState, MAGIC};
pub use schedule::{rate, Schedule, ScheduleError};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::batching::{BatchError, BatchSource};
use crate::config::{ConfigError, Section};
use crate::criterion::{Criterion, CriterionError, LossCtx};
use crate::eval::{self, parse_assess_by, pick_best, EvalError, Polarity, ScoreBoard};
use crate::io::{AsyncFileWriter, IoError};
use crate::model::{ModelError, SeqModel};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("the training data yields no batches")]
    EmptyData,
    #[error("loss became non-finite at step {step}")]
    Diverged { step: u64 },
    #[error(transparent)]
    Criterion(#[from] CriterionError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub max_steps: u64,
    /// Micro-batches per update.
    pub accumulate: usize,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Updates between evaluations; the last step is always evaluated.
    pub eval_interval: u64,
    /// Evaluations without improvement before stopping.
    pub patience: Option<u32>,
    pub save_dir: Option<PathBuf>,
    /// `(dataset, metric)` used for model selection; `None` uses the mean.
    pub assess_by: Option<(String, String)>,
    pub avg_k: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub log_interval: u64,
    /// Checkpoint to continue from.
    pub resume: Option<String>,
    /// Constant learning rate used when no rate scheduler is configured.
    pub lr: Option<f64>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            max_steps: 1000,
            accumulate: 1,
            clip_norm: Some(1.0),
            eval_interval: 100,
            patience: None,
            save_dir: None,
            assess_by: None,
            avg_k: 5,
            seed: 0,
            adam: AdamConfig::default(),
            log_interval: 50,
            resume: None,
            lr: None,
        }
    }
}

impl TrainerConfig {
    /// Reads the `trainer` section; `seed` comes from the caller.
    pub fn from_section(s: &Section<'_>, seed: u64) -> Result<Self, TrainError> {
        let d = Self::default();
        let clip = s.f64_or("clip_norm", 1.0)?;
        let accumulate = s.usize_or("accumulate", d.accumulate)?;
        if accumulate == 0 {
            return Err(ConfigError::Invalid {
                path: s.key_path("accumulate"),
                msg: "must be at least 1".into(),
            }
            .into());
        }
        let assess_by = match s.opt_str("assess_by")? {
            Some(a) => Some(parse_assess_by(a).map_err(|e| ConfigError::Invalid {
                path: s.key_path("assess_by"),
                msg: e.to_string(),
            })?),
            None => None,
        };
        Ok(Self {
            max_steps: s.opt_u64("max_steps")?.unwrap_or(d.max_steps),
            accumulate,
            clip_norm: (clip > 0.0).then_some(clip),
            eval_interval: s.opt_u64("eval_interval")?.unwrap_or(d.eval_interval),
            patience: s.opt_u64("patience")?.map(|p| p as u32),
            save_dir: s.opt_str("save_dir")?.map(PathBuf::from),
            assess_by,
            avg_k: s.usize_or("avg_k", d.avg_k)?.max(1),
            seed,
            adam: AdamConfig {
                beta1: s.f64_or("beta1", d.adam.beta1)?,
                beta2: s.f64_or("beta2", d.adam.beta2)?,
                eps: s.f64_or("eps", d.adam.eps)?,
            },
            log_interval: s.opt_u64("log_interval")?.unwrap_or(d.log_interval),
            resume: s.opt_str("resume")?.map(str::to_string),
            lr: s.opt_f64("lr")?,
        })
    }
}

/// Scores a model; the trainer calls it at every evaluation point.
pub type EvalHook = Box<dyn FnMut(&dyn SeqModel) -> Result<ScoreBoard, EvalError> + Send>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxSteps,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: u64,
    pub stop: StopReason,
    pub best_step: Option<u64>,
    pub best_score: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub best: Option<PathBuf>,
    pub best_avg: Option<PathBuf>,
}

pub struct Trainer {
    model: Box<dyn SeqModel>,
    criterion: Box<dyn Criterion>,
    loader: Box<dyn BatchSource>,
    lr: Schedule,
    cfg: TrainerConfig,
    state: TrainState,
    rng: ChaCha8Rng,
    eval: Option<(EvalHook, Polarity)>,
    lr_trace: Vec<f64>,
    writer: AsyncFileWriter,
    checkpoints: Vec<PathBuf>,
    started: bool,
    loss_sum: f64,
    loss_count: u64,
}

impl Trainer {
    pub fn new(
        model: Box<dyn SeqModel>,
        mut criterion: Box<dyn Criterion>,
        loader: Box<dyn BatchSource>,
        mut lr: Schedule,
        cfg: TrainerConfig,
    ) -> Self {
        criterion.resolve(cfg.max_steps);
        lr.resolve(cfg.max_steps);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self {
            state: TrainState::new(&rng),
            model,
            criterion,
            loader,
            lr,
            cfg,
            rng,
            eval: None,
            lr_trace: Vec::new(),
            writer: AsyncFileWriter::new(),
            checkpoints: Vec::new(),
            started: false,
            loss_sum: 0.0,
            loss_count: 0,
        }
    }

    /// Installs the evaluation hook and the direction of its scores.
    pub fn with_evaluator(mut self, hook: EvalHook, polarity: Polarity) -> Self {
        self.eval = Some((hook, polarity));
        self
    }

    pub fn model(&self) -> &dyn SeqModel {
        &*self.model
    }

    pub fn into_model(self) -> Box<dyn SeqModel> {
        self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    /// Learning rate applied at each update so far, in order.
    pub fn lr_trace(&self) -> &[f64] {
        &self.lr_trace
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = self.state.clone();
        state.rng = RngState::capture(&self.rng);
        Checkpoint {
            params: self.model.params().entries(),
            state,
        }
    }

    /// Restores parameters, optimizer state, randomness and data position.
    pub fn resume(&mut self, ckpt: Checkpoint) -> Result<(), TrainError> {
        self.model.params_mut().assign(&ckpt.params)?;
        self.rng = ckpt.state.rng.restore();
        self.state = ckpt.state;
        self.started = false;
        Ok(())
    }

    pub fn resume_from(&mut self, uri: &str) -> Result<(), TrainError> {
        self.resume(Checkpoint::load(uri)?)
    }

    fn start(&mut self) -> Result<(), TrainError> {
        self.loader.start_epoch(self.state.epoch)?;
        for _ in 0..self.state.batches_in_epoch {
            if self.loader.next_batch()?.is_none() {
                return Err(TrainError::EmptyData);
            }
        }
        self.started = true;
        Ok(())
    }

    fn next_batch(&mut self) -> Result<crate::pipeline::Batch, TrainError> {
        if let Some(b) = self.loader.next_batch()? {
            self.state.batches_in_epoch += 1;
            return Ok(b);
        }
        self.state.epoch += 1;
        self.state.batches_in_epoch = 0;
        self.loader.start_epoch(self.state.epoch)?;
        match self.loader.next_batch()? {
            Some(b) => {
                self.state.batches_in_epoch = 1;
                Ok(b)
            }
            None => Err(TrainError::EmptyData),
        }
    }

    /// One optimizer update over `accumulate` micro-batches; returns the
    /// mean micro-batch loss.
    pub fn step(&mut self) -> Result<f64, TrainError> {
        if !self.started {
            self.start()?;
        }
        let step = self.state.step + 1;
        let k = self.cfg.accumulate;
        let mut grads: Vec<Tensor> = self.model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut loss_total = 0.0;
        for _ in 0..k {
            let batch = self.next_batch()?;
            let mut tape = Tape::new();
            let vars = self.model.params().bind(&mut tape);
            let mut ctx = LossCtx {
                rng: &mut self.rng,
                step,
                train: true,
            };
            let loss = self.criterion.forward_loss(&*self.model, &mut tape, &vars, &batch, &mut ctx)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            loss_total += value;
            let mut g = tape.backward(loss)?;
            for (acc, &v) in grads.iter_mut().zip(&vars) {
                if let Some(t) = g.take(v) {
                    acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b / k as f64);
                }
            }
        }
        if let Some(max) = self.cfg.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        let lr = rate(&self.lr, step);
        adam_step(self.model.params_mut().tensors_mut(), &grads, &mut self.state.adam, lr, self.cfg.adam)?;
        self.model.params_mut().round_to_f32();
        self.state.step = step;
        self.lr_trace.push(lr);
        let loss = loss_total / k as f64;
        self.loss_sum += loss;
        self.loss_count += 1;
        if self.cfg.log_interval > 0 && step % self.cfg.log_interval == 0 {
            log::info!("step {step} loss {loss:.4} lr {lr:.3e}");
        }
        Ok(loss)
    }

    fn assess(&mut self) -> Result<(f64, BTreeMap<String, f64>, Polarity), TrainError> {
        let train_loss = if self.loss_count > 0 {
            self.loss_sum / self.loss_count as f64
        } else {
            0.0
        };
        self.loss_sum = 0.0;
        self.loss_count = 0;
        let Some((hook, polarity)) = self.eval.as_mut() else {
            let scores = BTreeMap::from([("train.loss".to_string(), train_loss)]);
            return Ok((train_loss, scores, Polarity::LowerIsBetter));
        };
        let board = hook(&*self.model)?;
        let scores: BTreeMap<String, f64> = board.entries().map(|(k, v)| (k.to_string(), v)).collect();
        let score = match &self.cfg.assess_by {
            Some((d, m)) => board
                .get(d, m)
                .ok_or_else(|| EvalError::MissingScore(format!("{d}.{m}")))?,
            None => board.overall(),
        };
        Ok((score, scores, *polarity))
    }

    /// Evaluates, updates best/patience and writes a checkpoint. Returns
    /// true when patience is exhausted.
    fn evaluate_and_save(&mut self) -> Result<bool, TrainError> {
        let (score, scores, polarity) = self.assess()?;
        let step = self.state.step;
        log::info!("eval at step {step}: score {score:.4}");
        match self.state.best_score {
            Some(best) if polarity.better(score, best) => self.state.bad_evals = 0,
            Some(_) => self.state.bad_evals += 1,
            None => {}
        }
        if self.state.best_score.map_or(true, |b| polarity.at_least(score, b)) {
            self.state.best_score = Some(score);
            self.state.best_step = Some(step);
        }
        self.state.history.push(EvalRecord { step, score, scores });
        if let Some(dir) = self.cfg.save_dir.clone() {
            let path = dir.join(checkpoint_name(step));
            self.writer.submit(&path, self.checkpoint().encode()?)?;
            self.checkpoints.push(path);
        }
        Ok(matches!(self.cfg.patience, Some(p) if self.state.bad_evals >= p))
    }

    pub fn train(&mut self) -> Result<TrainOutcome, TrainError> {
        let mut stop = StopReason::MaxSteps;
        if let Some(dir) = &self.cfg.save_dir {
            std::fs::create_dir_all(dir).map_err(|e| IoError::from_io(&dir.display().to_string(), e))?;
        }
        while self.state.step < self.cfg.max_steps {
            self.step()?;
            let s = self.state.step;
            let due = (self.cfg.eval_interval > 0 && s % self.cfg.eval_interval == 0) || s == self.cfg.max_steps;
            if due && self.evaluate_and_save()? {
                stop = StopReason::EarlyStop;
                break;
            }
        }
        self.writer.flush_barrier()?;
        let (best, best_avg) = match self.cfg.save_dir.clone() {
            Some(dir) if !self.state.history.is_empty() => self.write_selection(&dir)?,
            _ => (None, None),
        };
        Ok(TrainOutcome {
            steps: self.state.step,
            stop,
            best_step: self.state.best_step,
            best_score: self.state.best_score,
            checkpoints: self.checkpoints.clone(),
            best,
            best_avg,
        })
    }

    fn polarity(&self) -> Polarity {
        match &self.eval {
            Some((_, p)) => *p,
            None => Polarity::LowerIsBetter,
        }
    }

    /// Writes `ckpt.best.bin` and `ckpt.best_avg.bin` from the saved history.
    fn write_selection(&mut self, dir: &Path) -> Result<(Option<PathBuf>, Option<PathBuf>), TrainError> {
        let history = &self.state.history;
        let scores: Vec<f64> = history.iter().map(|r| r.score).collect();
        let polarity = self.polarity();
        let best = pick_best(&scores, polarity).ok_or(EvalError::Empty)?;
        let start = (best + 1).saturating_sub(self.cfg.avg_k);
        let mut window = Vec::with_capacity(best + 1 - start);
        for rec in &history[start..=best] {
            let path = dir.join(checkpoint_name(rec.step));
            let uri = path.to_string_lossy();
            window.push((Checkpoint::load(&uri)?, rec.score));
        }
        let sel = eval::select_and_average(&window, self.cfg.avg_k, polarity)?;
        let best_path = dir.join("ckpt.best.bin");
        let avg_path = dir.join("ckpt.best_avg.bin");
        self.writer.submit(&best_path, window[sel.best].0.encode()?)?;
        self.writer.submit(&avg_path, sel.best_avg.encode()?)?;
        self.writer.flush_barrier()?;
        Ok((Some(best_path), Some(avg_path)))
    }
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("model", &self.model)
            .field("criterion", &self.criterion)
            .field("cfg", &self.cfg)
            .field("step", &self.state.step)
            .finish_non_exhaustive()
    }
}
