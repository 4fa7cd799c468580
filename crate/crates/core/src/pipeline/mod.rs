//! Data processing: tokenisation, numericalisation, and batch assembly.
//!
//! [`data_collate`] runs once per sample ahead of training (offline);
//! [`collate`] pads a group of processed samples into a [`Batch`] whenever a
//! loader emits one (online).

mod bpe;
mod vocab;

pub use bpe::{bpe_decode, bpe_train, BpeModel, END_OF_WORD};
pub use vocab::{build_vocab, Vocabulary, BOS, EOS, MASK, NUM_RESERVED, PAD, RESERVED_TOKENS, UNK};

use thiserror::Error;

use crate::data::{DataError, ProbeGuard, Sample};
use crate::io::{self, IoError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot train BPE on an empty corpus")]
    EmptyCorpus,
    #[error("malformed file: {0}")]
    BadFile(String),
    #[error("sample has no field `{0}`")]
    MissingField(String),
    #[error("cannot collate an empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Io(#[from] IoError),
}

impl From<DataError> for PipelineError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::MissingField(f) => PipelineError::MissingField(f),
            DataError::Io(io) => PipelineError::Io(io),
            other => PipelineError::BadFile(other.to_string()),
        }
    }
}

/// BPE segmentation plus the id table.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Tokenizer {
    pub bpe: BpeModel,
    pub vocab: Vocabulary,
}

impl Tokenizer {
    pub fn new(bpe: BpeModel, vocab: Vocabulary) -> Self {
        Self { bpe, vocab }
    }

    pub fn load(bpe_uri: &str, vocab_uri: &str) -> Result<Self, PipelineError> {
        Ok(Self {
            bpe: BpeModel::from_text(&io::read_to_string(bpe_uri)?)?,
            vocab: Vocabulary::from_text(&io::read_to_string(vocab_uri)?)?,
        })
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.bpe.encode(text).iter().map(|t| self.vocab.lookup(t)).collect()
    }

    /// Drops reserved ids, maps the rest to symbols, and joins words.
    pub fn decode(&self, ids: &[u32]) -> String {
        let symbols: Vec<&str> = ids
            .iter()
            .filter(|&&id| !Vocabulary::is_reserved(id))
            .filter_map(|&id| self.vocab.token(id))
            .collect();
        bpe_decode(&symbols)
    }
}

/// Which sample fields feed the source and target sides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub src: String,
    pub tgt: String,
    /// When false a missing target field is tolerated (inference).
    pub require_tgt: bool,
}

impl FieldSpec {
    pub fn training(src: &str, tgt: &str) -> Self {
        Self {
            src: src.to_string(),
            tgt: tgt.to_string(),
            require_tgt: true,
        }
    }

    pub fn inference(src: &str, tgt: &str) -> Self {
        Self {
            require_tgt: false,
            ..Self::training(src, tgt)
        }
    }
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self::training("src", "tgt")
    }
}

/// A numericalised sample; the target carries bos/eos.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProcessedSample {
    pub src: Vec<u32>,
    pub tgt: Option<Vec<u32>>,
    pub(crate) probe: Option<ProbeGuard>,
}

impl ProcessedSample {
    pub fn new(src: Vec<u32>, tgt: Option<Vec<u32>>) -> Self {
        Self { src, tgt, probe: None }
    }

    /// Cost length used by token-budget batching.
    pub fn length(&self) -> usize {
        self.src.len().max(self.tgt.as_ref().map_or(0, Vec::len))
    }
}

/// Wraps target ids in bos/eos.
pub fn with_bos_eos(ids: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len() + 2);
    out.push(BOS);
    out.extend_from_slice(ids);
    out.push(EOS);
    out
}

pub fn data_collate(mut sample: Sample, tokenizer: &Tokenizer, spec: &FieldSpec) -> Result<ProcessedSample, PipelineError> {
    let src = tokenizer.encode(&sample.text(&spec.src)?);
    let tgt = match sample.get(&spec.tgt) {
        Some(v) => Some(with_bos_eos(&tokenizer.encode(&v.to_string()))),
        None if spec.require_tgt => return Err(PipelineError::MissingField(spec.tgt.clone())),
        None => None,
    };
    Ok(ProcessedSample {
        src,
        tgt,
        probe: sample.take_probe(),
    })
}

/// Row-major id matrix padded to its longest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u32>,
    pub lengths: Vec<usize>,
}

impl TokenMatrix {
    pub fn from_seqs<S: AsRef<[u32]>>(seqs: &[S], pad: u32) -> Self {
        let cols = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut data = vec![pad; seqs.len() * cols];
        let mut lengths = Vec::with_capacity(seqs.len());
        for (r, s) in seqs.iter().enumerate() {
            let s = s.as_ref();
            data[r * cols..r * cols + s.len()].copy_from_slice(s);
            lengths.push(s.len());
        }
        Self {
            rows: seqs.len(),
            cols,
            data,
            lengths,
        }
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Unpadded prefix of row `r`.
    pub fn seq(&self, r: usize) -> &[u32] {
        &self.row(r)[..self.lengths[r]]
    }

    /// True where the position holds a real token.
    pub fn is_token(&self, r: usize, c: usize) -> bool {
        c < self.lengths[r]
    }

    pub fn num_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub src: TokenMatrix,
    pub tgt: Option<TokenMatrix>,
    pub(crate) probes: Vec<ProbeGuard>,
}

impl Batch {
    pub fn new(src: TokenMatrix, tgt: Option<TokenMatrix>) -> Self {
        Self {
            src,
            tgt,
            probes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.src.rows
    }

    pub fn is_empty(&self) -> bool {
        self.src.rows == 0
    }

    /// Padded area `rows × max length` over both sides.
    pub fn cost(&self) -> usize {
        let width = self.src.cols.max(self.tgt.as_ref().map_or(0, |t| t.cols));
        self.len() * width
    }

    /// Rows `idx` as a new batch, re-padded to their own maximum.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let src: Vec<&[u32]> = idx.iter().map(|&i| self.src.seq(i)).collect();
        let tgt = self
            .tgt
            .as_ref()
            .map(|t| TokenMatrix::from_seqs(&idx.iter().map(|&i| t.seq(i)).collect::<Vec<_>>(), PAD));
        Batch::new(TokenMatrix::from_seqs(&src, PAD), tgt)
    }
}

/// Pads samples to the per-batch maximum on each side.
pub fn collate(samples: Vec<ProcessedSample>, pad_id: u32) -> Result<Batch, PipelineError> {
    if samples.is_empty() {
        return Err(PipelineError::EmptyBatch);
    }
    let src: Vec<&[u32]> = samples.iter().map(|s| s.src.as_slice()).collect();
    let src = TokenMatrix::from_seqs(&src, pad_id);
    let tgt = if samples.iter().all(|s| s.tgt.is_some()) {
        let t: Vec<&[u32]> = samples.iter().map(|s| s.tgt.as_deref().unwrap_or(&[])).collect();
        Some(TokenMatrix::from_seqs(&t, pad_id))
    } else {
        None
    };
    let probes = samples.into_iter().filter_map(|s| s.probe).collect();
    Ok(Batch { src, tgt, probes })
}
