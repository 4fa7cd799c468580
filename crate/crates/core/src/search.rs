//! Decoding algorithms. The core routines are generic over two small model
//! views so they can be checked against toy models: [`StepModel`] for
//! left-to-right decoding and [`ParallelModel`] for iterative refinement.

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

use crate::model::{DecodeState, EncodedSource, ModelError, SeqModel, Transformer};
use crate::pipeline::{BOS, EOS, MASK};
use crate::tensor::kernels;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("iteration {t} outside 1..={total}")]
    BadIteration { t: usize, total: usize },
    #[error("search `{search}` cannot drive this model: {reason}")]
    WrongModel { search: &'static str, reason: String },
    #[error("invalid search setting: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Left-to-right view of a model: feed one token, get next-token log-probs.
pub trait StepModel {
    type State: Clone;
    fn vocab_size(&self) -> usize;
    fn bos(&self) -> u32 {
        BOS
    }
    fn eos(&self) -> u32 {
        EOS
    }
    fn initial(&self) -> Self::State;
    /// Consumes `token` and returns log-probabilities `[V]` for the next one.
    fn step(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>, SearchError>;
}

/// Parallel view of a model conditioned on one source.
pub trait ParallelModel {
    fn vocab_size(&self) -> usize;
    fn mask_id(&self) -> u32 {
        MASK
    }
    /// Per-position probabilities `[L·V]` for decoder input `dec_in`.
    fn predict(&self, dec_in: &[u32]) -> Result<Vec<f64>, SearchError>;
    fn src_len(&self) -> usize;
    /// Distribution over length offsets `-Δ..=Δ`.
    fn length_probs(&self) -> Result<Vec<f64>, SearchError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Sum of log-probabilities of every emitted token, eos included.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Number of decoding steps taken: the tokens plus a final eos.
    pub fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    /// `score / steps^α`.
    pub fn normalized(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            return self.score;
        }
        self.score / (self.steps().max(1) as f64).powf(alpha)
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    kernels::log_softmax_row(logits, &mut out);
    out
}

pub fn greedy_decode<M: StepModel>(model: &M, max_len: usize) -> Result<Hypothesis, SearchError> {
    let mut state = model.initial();
    let mut token = model.bos();
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    };
    for _ in 0..max_len {
        let lp = model.step(&mut state, token)?;
        let best = kernels::argmax(&lp) as u32;
        hyp.score += lp[best as usize];
        if best == model.eos() {
            hyp.finished = true;
            break;
        }
        hyp.tokens.push(best);
        token = best;
    }
    Ok(hyp)
}

/// Higher normalised score first, then the lexicographically smaller tokens.
fn rank(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    b.normalized(alpha)
        .total_cmp(&a.normalized(alpha))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

pub fn beam_decode<M: StepModel>(model: &M, beam: usize, max_len: usize, alpha: f64) -> Result<Hypothesis, SearchError> {
    if beam == 0 {
        return Err(SearchError::Config("beam must be at least 1".into()));
    }
    let eos = model.eos();
    let mut state = model.initial();
    let first = model.step(&mut state, model.bos())?;
    // live entries: hypothesis, state after its last token, next-token log-probs
    let mut live = vec![(
        Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            finished: false,
        },
        state,
        first,
    )];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for depth in 0..max_len {
        let mut cands: Vec<(Hypothesis, usize)> = Vec::with_capacity(live.len() * model.vocab_size());
        for (i, (h, _, lp)) in live.iter().enumerate() {
            for (v, &l) in lp.iter().enumerate() {
                let v = v as u32;
                let mut tokens = h.tokens.clone();
                let done = v == eos;
                if !done {
                    tokens.push(v);
                }
                cands.push((
                    Hypothesis {
                        tokens,
                        score: h.score + l,
                        finished: done,
                    },
                    i,
                ));
            }
        }
        cands.sort_by(|a, b| rank(&a.0, &b.0, 0.0).then_with(|| a.0.finished.cmp(&b.0.finished)));
        cands.truncate(beam);
        let mut next = Vec::with_capacity(beam);
        for (h, parent) in cands {
            if h.finished {
                finished.push(h);
            } else if depth + 1 < max_len {
                let mut st = live[parent].1.clone();
                let lp = model.step(&mut st, *h.tokens.last().expect("live hypotheses are non-empty"))?;
                next.push((h, st, lp));
            } else {
                finished.push(h);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    let mut pool = finished;
    pool.extend(live.into_iter().map(|(h, _, _)| h));
    pool.sort_by(|a, b| rank(a, b, alpha));
    Ok(pool.into_iter().next().unwrap_or(Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    }))
}

/// Positions to re-mask before iteration `t + 1`: `floor(L·(T−t)/T)`.
pub fn remask_count(len: usize, t: usize, total: usize) -> Result<usize, SearchError> {
    if t == 0 || t > total {
        return Err(SearchError::BadIteration { t, total });
    }
    Ok(len * (total - t) / total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub tokens: Vec<u32>,
    /// Probability of each token when it was last predicted.
    pub confidence: Vec<f64>,
    /// Positions re-masked over iterations `2..=T`.
    pub remasked: usize,
}

impl Refined {
    /// Mean log-probability of the tokens.
    pub fn mean_log_prob(&self) -> f64 {
        if self.confidence.is_empty() {
            return 0.0;
        }
        self.confidence.iter().map(|p| p.ln()).sum::<f64>() / self.confidence.len() as f64
    }
}

fn fill<M: ParallelModel>(model: &M, input: &[u32], at: &[usize], out: &mut Refined) -> Result<(), SearchError> {
    let probs = model.predict(input)?;
    let v = model.vocab_size();
    for &i in at {
        let row = &probs[i * v..(i + 1) * v];
        let best = kernels::argmax(row);
        out.tokens[i] = best as u32;
        out.confidence[i] = row[best];
    }
    Ok(())
}

pub fn mask_predict<M: ParallelModel>(model: &M, len: usize, iterations: usize) -> Result<Refined, SearchError> {
    if iterations == 0 {
        return Err(SearchError::BadIteration { t: 0, total: 0 });
    }
    let mask = model.mask_id();
    let mut out = Refined {
        tokens: vec![mask; len],
        confidence: vec![0.0; len],
        remasked: 0,
    };
    let all: Vec<usize> = (0..len).collect();
    fill(model, &out.tokens.clone(), &all, &mut out)?;
    for t in 2..=iterations {
        let n = remask_count(len, t - 1, iterations)?;
        if n == 0 {
            continue;
        }
        let mut order = all.clone();
        order.sort_by(|&a, &b| out.confidence[a].total_cmp(&out.confidence[b]).then(a.cmp(&b)));
        order.truncate(n);
        order.sort_unstable();
        let mut input = out.tokens.clone();
        for &i in &order {
            input[i] = mask;
        }
        fill(model, &input, &order, &mut out)?;
        out.remasked += n;
    }
    Ok(out)
}

/// Candidate lengths from the `beam` most likely offsets, most likely first;
/// equal probabilities favour the shorter length.
pub fn length_candidates(probs: &[f64], src_len: usize, beam: usize) -> Vec<usize> {
    let delta = probs.len() / 2;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = Vec::with_capacity(beam);
    for i in order {
        if out.len() == beam {
            break;
        }
        let len = (src_len as i64 + i as i64 - delta as i64).max(1) as usize;
        if !out.contains(&len) {
            out.push(len);
        }
    }
    out
}

/// Mask-predict over several candidate lengths, keeping the candidate with
/// the highest mean log-probability (ties go to the shorter one).
pub fn npd_decode<M: ParallelModel>(model: &M, length_beam: usize, iterations: usize, max_len: usize) -> Result<Refined, SearchError> {
    if length_beam == 0 {
        return Err(SearchError::Config("length_beam must be at least 1".into()));
    }
    let lengths = length_candidates(&model.length_probs()?, model.src_len(), length_beam);
    let mut best: Option<Refined> = None;
    for len in lengths {
        let cand = mask_predict(model, len.min(max_len.max(1)), iterations)?;
        let better = match &best {
            None => true,
            Some(b) => match cand.mean_log_prob().total_cmp(&b.mean_log_prob()) {
                Ordering::Greater => true,
                Ordering::Equal => cand.tokens.len() < b.tokens.len(),
                Ordering::Less => false,
            },
        };
        if better {
            best = Some(cand);
        }
    }
    Ok(best.expect("at least one length candidate"))
}

/// Autoregressive transformer bound to one encoded source.
pub struct ArSource<'a> {
    pub model: &'a Transformer,
    pub source: EncodedSource,
}

impl StepModel for ArSource<'_> {
    type State = DecodeState;

    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn initial(&self) -> DecodeState {
        self.model.start_decoding()
    }

    fn step(&self, state: &mut DecodeState, token: u32) -> Result<Vec<f64>, SearchError> {
        Ok(log_softmax(&self.model.ar_decode_step(&self.source, state, token)?))
    }
}

/// Parallel transformer bound to one encoded source.
pub struct NatSource<'a> {
    pub model: &'a Transformer,
    pub source: EncodedSource,
}

impl ParallelModel for NatSource<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn predict(&self, dec_in: &[u32]) -> Result<Vec<f64>, SearchError> {
        let mut logits = self.model.nat_logits(&self.source, dec_in)?;
        let v = self.vocab_size();
        logits.chunks_exact_mut(v).for_each(kernels::softmax_row);
        Ok(logits)
    }

    fn src_len(&self) -> usize {
        self.source.len()
    }

    fn length_probs(&self) -> Result<Vec<f64>, SearchError> {
        Ok(self.model.predict_length(&self.source)?)
    }
}

/// A configured decoding strategy.
pub trait Search: Send + Sync + fmt::Debug {
    fn decode(&self, model: &dyn SeqModel, src: &[u32]) -> Result<Vec<u32>, SearchError>;
}

fn transformer<'m>(model: &'m dyn SeqModel, search: &'static str, parallel: bool) -> Result<&'m Transformer, SearchError> {
    let t = model.as_transformer().ok_or_else(|| SearchError::WrongModel {
        search,
        reason: "not a transformer".into(),
    })?;
    if t.is_parallel() != parallel {
        let want = if parallel { "parallel" } else { "autoregressive" };
        return Err(SearchError::WrongModel {
            search,
            reason: format!("needs an {want} model"),
        });
    }
    Ok(t)
}

fn ar_source<'m>(model: &'m dyn SeqModel, src: &[u32], search: &'static str) -> Result<(ArSource<'m>, usize), SearchError> {
    let t = transformer(model, search, false)?;
    let view = ArSource {
        model: t,
        source: t.encode_source(src)?,
    };
    Ok((view, t.config().max_positions))
}

fn nat_source<'m>(model: &'m dyn SeqModel, src: &[u32], search: &'static str) -> Result<(NatSource<'m>, usize), SearchError> {
    let t = transformer(model, search, true)?;
    let view = NatSource {
        model: t,
        source: t.encode_source(src)?,
    };
    Ok((view, t.config().max_positions))
}

fn at_least_one(name: &str, v: usize) -> Result<usize, SearchError> {
    if v == 0 {
        return Err(SearchError::Config(format!("{name} must be at least 1")));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Greedy {
    pub max_len: usize,
}

impl Greedy {
    pub fn new(max_len: usize) -> Result<Self, SearchError> {
        Ok(Self {
            max_len: at_least_one("max_len", max_len)?,
        })
    }
}

impl Search for Greedy {
    fn decode(&self, model: &dyn SeqModel, src: &[u32]) -> Result<Vec<u32>, SearchError> {
        let (view, max_pos) = ar_source(model, src, "greedy")?;
        Ok(greedy_decode(&view, self.max_len.min(max_pos))?.tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub beam: usize,
    pub max_len: usize,
    pub lenpen: f64,
}

impl Beam {
    pub fn new(beam: usize, max_len: usize, lenpen: f64) -> Result<Self, SearchError> {
        Ok(Self {
            beam: at_least_one("beam", beam)?,
            max_len: at_least_one("max_len", max_len)?,
            lenpen,
        })
    }
}

impl Search for Beam {
    fn decode(&self, model: &dyn SeqModel, src: &[u32]) -> Result<Vec<u32>, SearchError> {
        let (view, max_pos) = ar_source(model, src, "beam")?;
        Ok(beam_decode(&view, self.beam, self.max_len.min(max_pos), self.lenpen)?.tokens)
    }
}

/// Mask-predict at the single most likely length.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPredict {
    pub iterations: usize,
    pub max_len: usize,
}

impl MaskPredict {
    pub fn new(iterations: usize, max_len: usize) -> Result<Self, SearchError> {
        Ok(Self {
            iterations: at_least_one("iterations", iterations)?,
            max_len: at_least_one("max_len", max_len)?,
        })
    }
}

impl Search for MaskPredict {
    fn decode(&self, model: &dyn SeqModel, src: &[u32]) -> Result<Vec<u32>, SearchError> {
        let (view, max_pos) = nat_source(model, src, "mask_predict")?;
        Ok(npd_decode(&view, 1, self.iterations, self.max_len.min(max_pos))?.tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Npd {
    pub length_beam: usize,
    pub iterations: usize,
    pub max_len: usize,
}

impl Npd {
    pub fn new(length_beam: usize, iterations: usize, max_len: usize) -> Result<Self, SearchError> {
        Ok(Self {
            length_beam: at_least_one("length_beam", length_beam)?,
            iterations: at_least_one("iterations", iterations)?,
            max_len: at_least_one("max_len", max_len)?,
        })
    }
}

impl Search for Npd {
    fn decode(&self, model: &dyn SeqModel, src: &[u32]) -> Result<Vec<u32>, SearchError> {
        let (view, max_pos) = nat_source(model, src, "npd")?;
        Ok(npd_decode(&view, self.length_beam, self.iterations, self.max_len.min(max_pos))?.tokens)
    }
}
