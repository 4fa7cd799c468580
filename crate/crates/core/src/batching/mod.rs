//! Samplers (which indices form a batch) and loaders (which emit batches).

mod loader;
mod stream;

pub use loader::{BatchSource, DataLoader};
pub use stream::{shard_stream, PrefetchLoader, Processor, Sharded, ShuffleBuffer, StreamingLoader};

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::DataError;
use crate::pipeline::PipelineError;

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("sample {index} has length {length}, above the token budget {max_tokens}")]
    SampleTooLong { index: usize, length: usize, max_tokens: usize },
    #[error("worker {worker} is out of range for {num_workers} shards")]
    BadShard { worker: usize, num_workers: usize },
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("shuffle buffer capacity must be at least 1")]
    ZeroCapacity,
    #[error("prefetch worker stopped unexpectedly")]
    WorkerPanicked,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Ordered index batches covering every index exactly once.
pub type Plan = Vec<Vec<usize>>;

pub fn sequential_plan(n: usize, batch_size: usize) -> Result<Plan, BatchError> {
    if batch_size == 0 {
        return Err(BatchError::ZeroBatchSize);
    }
    Ok((0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

pub fn shuffle_plan(n: usize, batch_size: usize, seed: u64) -> Result<Plan, BatchError> {
    if batch_size == 0 {
        return Err(BatchError::ZeroBatchSize);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stable sort by length, then greedy packing under
/// `batch_size × longest ≤ max_tokens`. Batches come out shortest first.
pub fn token_budget_plan(lengths: &[usize], max_tokens: usize) -> Result<Plan, BatchError> {
    if let Some((index, &length)) = lengths.iter().enumerate().find(|(_, &l)| l > max_tokens) {
        return Err(BatchError::SampleTooLong {
            index,
            length,
            max_tokens,
        });
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| lengths[i]);
    let mut plan = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let l = lengths[i];
        let new_longest = longest.max(l);
        if !cur.is_empty() && (cur.len() + 1) * new_longest > max_tokens {
            plan.push(std::mem::take(&mut cur));
            longest = l;
        } else {
            longest = new_longest;
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        plan.push(cur);
    }
    Ok(plan)
}

/// Permutes batch order, leaving batch contents alone.
pub fn shuffle_batches(mut plan: Plan, seed: u64) -> Plan {
    plan.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    plan
}

/// Turns per-sample lengths into a plan. `round` distinguishes successive
/// calls (an epoch index, or a draw from the streaming loader).
pub trait Sampler: Send + Sync + fmt::Debug {
    fn plan(&self, lengths: &[usize], round: u64) -> Result<Plan, BatchError>;
}

#[derive(Debug, Clone)]
pub struct SequentialSampler {
    pub batch_size: usize,
}

impl Sampler for SequentialSampler {
    fn plan(&self, lengths: &[usize], _round: u64) -> Result<Plan, BatchError> {
        sequential_plan(lengths.len(), self.batch_size)
    }
}

#[derive(Debug, Clone)]
pub struct ShuffleSampler {
    pub batch_size: usize,
    pub seed: u64,
}

impl Sampler for ShuffleSampler {
    fn plan(&self, lengths: &[usize], round: u64) -> Result<Plan, BatchError> {
        shuffle_plan(lengths.len(), self.batch_size, self.seed.wrapping_add(round))
    }
}

#[derive(Debug, Clone)]
pub struct TokenBudgetSampler {
    pub max_tokens: usize,
    /// When set, batch order is shuffled with `seed + round`.
    pub seed: Option<u64>,
}

impl Sampler for TokenBudgetSampler {
    fn plan(&self, lengths: &[usize], round: u64) -> Result<Plan, BatchError> {
        let plan = token_budget_plan(lengths, self.max_tokens)?;
        Ok(match self.seed {
            Some(s) => shuffle_batches(plan, s.wrapping_add(round)),
            None => plan,
        })
    }
}
