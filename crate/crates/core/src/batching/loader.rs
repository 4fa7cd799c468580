use std::sync::Arc;

use super::{BatchError, Plan, Sampler};
use crate::pipeline::{collate, Batch, ProcessedSample, PAD};

/// Anything the trainer can pull batches from, epoch by epoch.
pub trait BatchSource: Send {
    /// Next batch of the current epoch; `None` once the epoch is exhausted.
    fn next_batch(&mut self) -> Result<Option<Batch>, BatchError>;
    /// Rewinds to the start of `epoch`.
    fn start_epoch(&mut self, epoch: u64) -> Result<(), BatchError>;
}

/// Loader over processed samples held in memory.
#[derive(Debug)]
pub struct DataLoader {
    samples: Arc<Vec<ProcessedSample>>,
    lengths: Vec<usize>,
    sampler: Box<dyn Sampler>,
    plan: Plan,
    cursor: usize,
}

impl DataLoader {
    pub fn new(samples: Arc<Vec<ProcessedSample>>, sampler: Box<dyn Sampler>) -> Result<Self, BatchError> {
        let lengths = samples.iter().map(ProcessedSample::length).collect();
        let mut loader = Self {
            samples,
            lengths,
            sampler,
            plan: Vec::new(),
            cursor: 0,
        };
        loader.start_epoch(0)?;
        Ok(loader)
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }
}

impl BatchSource for DataLoader {
    fn next_batch(&mut self) -> Result<Option<Batch>, BatchError> {
        let Some(idx) = self.plan.get(self.cursor) else {
            return Ok(None);
        };
        self.cursor += 1;
        let picked = idx.iter().map(|&i| self.samples[i].clone()).collect();
        Ok(Some(collate(picked, PAD)?))
    }

    fn start_epoch(&mut self, epoch: u64) -> Result<(), BatchError> {
        self.plan = self.sampler.plan(&self.lengths, epoch)?;
        self.cursor = 0;
        Ok(())
    }
}
