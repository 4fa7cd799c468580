//! Inference wrapper: search over a model, then detokenize on the host.

use std::sync::Arc;

use thiserror::Error;

use crate::exec::{map_ordered, ExecMode};
use crate::io::{AsyncWriter, IoError};
use crate::model::SeqModel;
use crate::pipeline::{Batch, Tokenizer};
use crate::search::{Search, SearchError};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone)]
pub struct Generator {
    search: Arc<dyn Search>,
    tokenizer: Arc<Tokenizer>,
    mode: ExecMode,
}

impl Generator {
    pub fn new(search: Arc<dyn Search>, tokenizer: Arc<Tokenizer>) -> Self {
        Self {
            search,
            tokenizer,
            mode: ExecMode::default(),
        }
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn search(&self) -> &dyn Search {
        &*self.search
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// Raw search output ids, one list per source, in input order.
    pub fn decode_ids(&self, model: &dyn SeqModel, srcs: &[Vec<u32>]) -> Result<Vec<Vec<u32>>, GeneratorError> {
        map_ordered(self.mode, srcs, |src| self.search.decode(model, src))
            .into_iter()
            .map(|r| r.map_err(GeneratorError::from))
            .collect()
    }

    /// Detokenized outputs, one per source.
    pub fn generate(&self, model: &dyn SeqModel, srcs: &[Vec<u32>]) -> Result<Vec<String>, GeneratorError> {
        Ok(self
            .decode_ids(model, srcs)?
            .iter()
            .map(|ids| self.tokenizer.decode(ids))
            .collect())
    }

    pub fn generate_batch(&self, model: &dyn SeqModel, batch: &Batch) -> Result<Vec<String>, GeneratorError> {
        let srcs: Vec<Vec<u32>> = (0..batch.src.rows).map(|r| batch.src.seq(r).to_vec()).collect();
        self.generate(model, &srcs)
    }
}

/// Writes one line per output, in order, through the asynchronous writer.
pub fn write_outputs(uri: &str, lines: &[String]) -> Result<(), IoError> {
    let mut w = AsyncWriter::create(uri)?;
    for line in lines {
        w.submit_write(format!("{line}\n"))?;
    }
    w.flush_barrier()?;
    w.close()
}
