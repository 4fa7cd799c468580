use std::any::Any;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::transformer::padded_targets;
use super::{DropRng, ModelError, ParamStore, SeqModel};
use crate::pipeline::{Batch, PAD};
use crate::tensor::{Tape, Tensor, Var};

/// Bigram model: next-token logits are one table row plus a bias. The loss
/// gradient is a plain sum over tokens, which makes it the reference model
/// for gradient-accumulation checks.
#[derive(Debug, Clone)]
pub struct LinearModel {
    store: ParamStore,
    table: usize,
    bias: usize,
    vocab: usize,
}

impl LinearModel {
    pub fn new(vocab: usize, seed: u64) -> Result<Self, ModelError> {
        if vocab < crate::pipeline::NUM_RESERVED {
            return Err(ModelError::Config("vocab_size must cover the 5 reserved ids".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (vocab as f64).sqrt();
        let data = (0..vocab * vocab).map(|_| rng.gen_range(-bound..bound) as f32 as f64).collect();
        let mut store = ParamStore::new();
        let table = store.add("bigram.0.table", Tensor::new(&[vocab, vocab], data)?)?;
        let bias = store.add("bigram.0.bias", Tensor::zeros(&[vocab]))?;
        Ok(Self {
            store,
            table,
            bias,
            vocab,
        })
    }
}

impl SeqModel for LinearModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn teacher_forced(&self, tape: &mut Tape, v: &[Var], batch: &Batch, _rng: DropRng<'_>) -> Result<(Var, Vec<usize>), ModelError> {
        let tgt = batch.tgt.as_ref().ok_or(ModelError::MissingTarget)?;
        let cols = tgt.cols.saturating_sub(1);
        let mut ids = vec![PAD as usize; tgt.rows * cols];
        let mut outputs = Vec::with_capacity(tgt.rows);
        for r in 0..tgt.rows {
            let seq = tgt.seq(r);
            for (c, &t) in seq.iter().take(seq.len().saturating_sub(1)).enumerate() {
                if t as usize >= self.vocab {
                    return Err(ModelError::TokenOutOfRange { id: t, vocab: self.vocab });
                }
                ids[r * cols + c] = t as usize;
            }
            outputs.push(seq.get(1..).unwrap_or(&[]).to_vec());
        }
        let rows = tape.gather(v[self.table], &ids, &[tgt.rows, cols])?;
        let logits = tape.add_row(rows, v[self.bias])?;
        Ok((logits, padded_targets(&outputs, cols)))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
