//! Training objectives: label-smoothed cross-entropy, the glancing objective
//! for parallel decoders, a length-prediction loss and weighted multi-task
//! combinations of these.

use std::fmt;

use rand::seq::index::sample;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{strip_bos_eos, ModelError, SeqModel, Transformer};
use crate::pipeline::{Batch, TokenMatrix, PAD};
use crate::tensor::{kernels, Tape, TensorError, Var};
use crate::trainer::{rate, Schedule};

#[derive(Debug, Error)]
pub enum CriterionError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("multi-task criterion needs at least one task")]
    EmptyList,
    #[error("criterion `{0}` needs a parallel (non-autoregressive) transformer")]
    NotParallel(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-call state handed to a criterion by the trainer.
pub struct LossCtx<'a> {
    /// Drives glancing selection and dropout.
    pub rng: &'a mut ChaCha8Rng,
    /// 1-based update step, for scheduled hyper-parameters.
    pub step: u64,
    /// Enables dropout.
    pub train: bool,
}

impl LossCtx<'_> {
    fn drop_rng(&mut self) -> Option<&mut dyn RngCore> {
        if self.train {
            Some(&mut *self.rng)
        } else {
            None
        }
    }
}

pub trait Criterion: Send + Sync + fmt::Debug {
    /// Scalar loss recorded on `tape`; `vars` are the model's bound params.
    fn forward_loss(
        &self,
        model: &dyn SeqModel,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Batch,
        ctx: &mut LossCtx<'_>,
    ) -> Result<Var, CriterionError>;

    /// Lets open-ended schedules span the run.
    fn resolve(&mut self, _max_steps: u64) {}
}

/// `N_g = floor(ratio · d_H)`, with the Hamming distance taken over
/// positions where `target` is not pad.
pub fn glance_count(first_pass: &[u32], target: &[u32], ratio: f64) -> Result<usize, CriterionError> {
    if first_pass.len() != target.len() {
        return Err(CriterionError::LengthMismatch {
            left: first_pass.len(),
            right: target.len(),
        });
    }
    let dist = first_pass
        .iter()
        .zip(target)
        .filter(|(p, t)| **t != PAD && p != t)
        .count();
    Ok((ratio * dist as f64).floor() as usize)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlanceOutcome {
    pub reveal_mask: Vec<bool>,
    pub revealed_count: usize,
    pub first_pass_prediction: Vec<u32>,
}

/// Chooses `glance_count` positions uniformly without replacement among the
/// non-pad positions of `target`.
pub fn glance(first_pass: &[u32], target: &[u32], ratio: f64, rng: &mut dyn RngCore) -> Result<GlanceOutcome, CriterionError> {
    let n = glance_count(first_pass, target, ratio)?;
    let candidates: Vec<usize> = (0..target.len()).filter(|&i| target[i] != PAD).collect();
    let mut reveal_mask = vec![false; target.len()];
    let n = n.min(candidates.len());
    for k in sample(rng, candidates.len(), n) {
        reveal_mask[candidates[k]] = true;
    }
    Ok(GlanceOutcome {
        reveal_mask,
        revealed_count: n,
        first_pass_prediction: first_pass.to_vec(),
    })
}

fn parallel<'m>(model: &'m dyn SeqModel, who: &'static str) -> Result<&'m Transformer, CriterionError> {
    model
        .as_transformer()
        .filter(|t| t.is_parallel())
        .ok_or(CriterionError::NotParallel(who))
}

/// Argmax ids `[rows, cols]` from logits `[rows, cols, V]`.
fn argmax_ids(logits: &[f64], rows: usize, cols: usize, vocab: usize) -> Vec<Vec<u32>> {
    (0..rows)
        .map(|r| {
            (0..cols)
                .map(|c| {
                    let at = (r * cols + c) * vocab;
                    kernels::argmax(&logits[at..at + vocab]) as u32
                })
                .collect()
        })
        .collect()
}

/// Three-stage glancing objective: predict every position in one parallel
/// pass without gradient, reveal `glance_count` gold tokens in the decoder
/// input, then score the remaining non-pad positions.
pub fn glancing_loss(
    model: &Transformer,
    tape: &mut Tape,
    vars: &[Var],
    batch: &Batch,
    ratio: f64,
    epsilon: f64,
    ctx: &mut LossCtx<'_>,
) -> Result<(Var, Vec<GlanceOutcome>), CriterionError> {
    if !model.is_parallel() {
        return Err(CriterionError::NotParallel("glancing"));
    }
    let tgt = batch.tgt.as_ref().ok_or(ModelError::MissingTarget)?;
    let (placeholders, content) = Transformer::nat_inputs(tgt);
    let (rows, cols) = (placeholders.rows, placeholders.cols);

    let first_pass = {
        let mut probe = Tape::inference();
        let pv = model.params().bind(&mut probe);
        let (logits, _) = model.nat_forward(&mut probe, &pv, &batch.src, &placeholders, None)?;
        argmax_ids(probe.value(logits).data(), rows, cols, model.config().vocab_size)
    };

    let mut inputs = Vec::with_capacity(rows);
    let mut targets = vec![PAD as usize; rows * cols];
    let mut outcomes = Vec::with_capacity(rows);
    for r in 0..rows {
        let gold = &content[r];
        let guess = &first_pass[r][..gold.len()];
        let outcome = glance(guess, gold, ratio, &mut *ctx.rng)?;
        let mut input = placeholders.seq(r).to_vec();
        for (i, &tok) in gold.iter().enumerate() {
            if outcome.reveal_mask[i] {
                input[i] = tok;
            } else {
                targets[r * cols + i] = tok as usize;
            }
        }
        inputs.push(input);
        outcomes.push(outcome);
    }
    let dec_in = TokenMatrix::from_seqs(&inputs, PAD);
    let (logits, _) = model.nat_forward(tape, vars, &batch.src, &dec_in, ctx.drop_rng())?;
    let loss = tape.cross_entropy(logits, &targets, epsilon, PAD as usize)?;
    Ok((loss, outcomes))
}

/// `Σ wᵢ·lossᵢ`.
pub fn multi_task_combine(tape: &mut Tape, losses: &[Var], weights: &[f64]) -> Result<Var, CriterionError> {
    if losses.is_empty() {
        return Err(CriterionError::EmptyList);
    }
    if losses.len() != weights.len() {
        return Err(CriterionError::LengthMismatch {
            left: losses.len(),
            right: weights.len(),
        });
    }
    let terms: Vec<(Var, f64)> = losses.iter().copied().zip(weights.iter().copied()).collect();
    Ok(tape.weighted_sum(&terms)?)
}

/// Index of `tgt_len - src_len` among the `2Δ+1` length classes, clamped.
pub fn length_class(src_len: usize, tgt_len: usize, delta: usize) -> usize {
    let off = tgt_len as i64 - src_len as i64 + delta as i64;
    off.clamp(0, 2 * delta as i64) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub epsilon: f64,
}

impl Criterion for CrossEntropy {
    fn forward_loss(
        &self,
        model: &dyn SeqModel,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Batch,
        ctx: &mut LossCtx<'_>,
    ) -> Result<Var, CriterionError> {
        let (logits, targets) = model.teacher_forced(tape, vars, batch, ctx.drop_rng())?;
        Ok(tape.cross_entropy(logits, &targets, self.epsilon, PAD as usize)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Glancing {
    pub epsilon: f64,
    /// Glancing ratio λ as a function of the update step.
    pub ratio: Schedule,
}

impl Criterion for Glancing {
    fn forward_loss(
        &self,
        model: &dyn SeqModel,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Batch,
        ctx: &mut LossCtx<'_>,
    ) -> Result<Var, CriterionError> {
        let model = parallel(model, "glancing")?;
        let lambda = rate(&self.ratio, ctx.step).clamp(0.0, 1.0);
        glancing_loss(model, tape, vars, batch, lambda, self.epsilon, ctx).map(|(l, _)| l)
    }

    fn resolve(&mut self, max_steps: u64) {
        self.ratio.resolve(max_steps);
    }
}

/// Cross-entropy of the length head against the gold length offset.
#[derive(Debug, Clone, PartialEq)]
pub struct NatLength;

impl Criterion for NatLength {
    fn forward_loss(
        &self,
        model: &dyn SeqModel,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Batch,
        ctx: &mut LossCtx<'_>,
    ) -> Result<Var, CriterionError> {
        let model = parallel(model, "nat_length")?;
        let tgt = batch.tgt.as_ref().ok_or(ModelError::MissingTarget)?;
        let delta = model.length_delta();
        let classes: Vec<usize> = (0..tgt.rows)
            .map(|r| length_class(batch.src.lengths[r], strip_bos_eos(tgt.seq(r)).len(), delta))
            .collect();
        let enc = model.encode(tape, vars, &batch.src, &mut ctx.drop_rng())?;
        let logits = model.length_logits(tape, vars, enc, &batch.src.lengths)?;
        Ok(tape.cross_entropy(logits, &classes, 0.0, usize::MAX)?)
    }
}

#[derive(Debug)]
pub struct MultiTask {
    tasks: Vec<(Box<dyn Criterion>, f64)>,
}

impl MultiTask {
    pub fn new(tasks: Vec<Box<dyn Criterion>>, weights: Vec<f64>) -> Result<Self, CriterionError> {
        if tasks.is_empty() {
            return Err(CriterionError::EmptyList);
        }
        if tasks.len() != weights.len() {
            return Err(CriterionError::LengthMismatch {
                left: tasks.len(),
                right: weights.len(),
            });
        }
        Ok(Self {
            tasks: tasks.into_iter().zip(weights).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

impl Criterion for MultiTask {
    fn forward_loss(
        &self,
        model: &dyn SeqModel,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Batch,
        ctx: &mut LossCtx<'_>,
    ) -> Result<Var, CriterionError> {
        let mut losses = Vec::with_capacity(self.tasks.len());
        let mut weights = Vec::with_capacity(self.tasks.len());
        for (task, w) in &self.tasks {
            losses.push(task.forward_loss(model, tape, vars, batch, ctx)?);
            weights.push(*w);
        }
        multi_task_combine(tape, &losses, &weights)
    }

    fn resolve(&mut self, max_steps: u64) {
        self.tasks.iter_mut().for_each(|(t, _)| t.resolve(max_steps));
    }
}
