//! Binary checkpoint format.
//!
//! Layout, all integers little-endian `u32`:
//! `PGEN1`, entry count, then per entry the name length and UTF-8 name, the
//! rank, each dim and the `f32` values; finally a length-prefixed JSON
//! training state.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, IoError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"PGEN1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error("training state: {0}")]
    State(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Position of the trainer's random stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// First and second moments per parameter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    /// The model-selection score.
    pub score: f64,
    /// Every `dataset.metric` entry of the evaluation.
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer updates taken.
    pub step: u64,
    pub epoch: u64,
    /// Batches drawn from the current epoch, for replay on resume.
    pub batches_in_epoch: u64,
    pub adam: AdamState,
    pub rng: RngState,
    pub best_score: Option<f64>,
    pub best_step: Option<u64>,
    /// Evaluations since the last improvement.
    pub bad_evals: u32,
    pub history: Vec<EvalRecord>,
}

impl TrainState {
    pub fn new(rng: &ChaCha8Rng) -> Self {
        Self {
            step: 0,
            epoch: 0,
            batches_in_epoch: 0,
            adam: AdamState::default(),
            rng: RngState::capture(rng),
            best_score: None,
            best_step: None,
            bad_evals: 0,
            history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub state: TrainState,
}

/// `ckpt.step<N>.bin`.
pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt.step{step}.bin")
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), CheckpointError> {
    let v = u32::try_from(v).map_err(|_| CheckpointError::Corrupt(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let scalars: usize = self.params.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(16 + scalars * 4);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.params.len())?;
        for (name, t) in &self.params {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let state = serde_json::to_vec(&self.state)?;
        put_u32(&mut out, state.len())?;
        out.extend_from_slice(&state);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let count = r.u32()?;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| CheckpointError::Corrupt(format!("`{name}` is too large")))?;
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(r.at))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            params.push((name, t));
        }
        let len = r.u32()?;
        let state = serde_json::from_slice(r.take(len)?)?;
        if r.at != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self { params, state })
    }

    pub fn save(&self, uri: &str) -> Result<(), CheckpointError> {
        Ok(io::write_bytes(uri, &self.encode()?)?)
    }

    pub fn load(uri: &str) -> Result<Self, CheckpointError> {
        Self::decode(&io::read_bytes(uri)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.at))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        let mut state = TrainState::new(&rng);
        state.step = 3;
        state.adam.t = 3;
        state.adam.m = vec![vec![0.1, 1.0 / 3.0]];
        state.adam.v = vec![vec![1e-300, 2.5]];
        Checkpoint {
            params: vec![
                ("a.0.w".into(), Tensor::new(&[2, 1], vec![0.5, -1.25]).unwrap()),
                ("a.0.b".into(), Tensor::scalar(3.0)),
            ],
            state,
        }
    }

    #[test]
    fn round_trips_exactly() {
        let c = sample();
        let bytes = c.encode().unwrap();
        assert_eq!(&bytes[..5], b"PGEN1");
        assert_eq!(&bytes[5..9], 2u32.to_le_bytes());
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), c);
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        a.next_u32();
        let mut b = RngState::capture(&a).restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().encode().unwrap();
        assert!(matches!(Checkpoint::decode(b"PGEN2xxxx"), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&extra), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn name_format() {
        assert_eq!(checkpoint_name(120), "ckpt.step120.bin");
    }
}
