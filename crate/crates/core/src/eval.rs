//! Metrics, the dataset × metric evaluator, and checkpoint selection.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use indexmap::IndexMap;
use thiserror::Error;

use crate::generator::{Generator, GeneratorError};
use crate::model::SeqModel;
use crate::tensor::Tensor;
use crate::trainer::Checkpoint;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("nothing to score")]
    Empty,
    #[error("assess_by must look like DATASET.METRIC, got `{0}`")]
    FormatError(String),
    #[error("score `{0}` was not produced by the evaluator")]
    MissingScore(String),
    #[error("checkpoints disagree: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    HigherIsBetter,
    LowerIsBetter,
}

impl Polarity {
    /// True when `a` is at least as good as `b`.
    pub fn at_least(self, a: f64, b: f64) -> bool {
        match self {
            Polarity::HigherIsBetter => a >= b,
            Polarity::LowerIsBetter => a <= b,
        }
    }

    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Polarity::HigherIsBetter => a > b,
            Polarity::LowerIsBetter => a < b,
        }
    }
}

/// Direction of a metric by name; unknown metrics count as higher-is-better.
pub fn polarity(metric: &str) -> Polarity {
    match metric {
        "loss" => Polarity::LowerIsBetter,
        _ => Polarity::HigherIsBetter,
    }
}

fn check_lengths(hyps: usize, refs: usize) -> Result<(), EvalError> {
    if hyps != refs {
        return Err(EvalError::LengthMismatch { hyps, refs });
    }
    if hyps == 0 {
        return Err(EvalError::Empty);
    }
    Ok(())
}

fn ngram_counts<'t>(tokens: &'t [&str], n: usize) -> HashMap<&'t [&'t str], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU in `[0, 1]` over whitespace tokens, without smoothing.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R], max_n: usize) -> Result<f64, EvalError> {
    check_lengths(hyps.len(), refs.len())?;
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if hyp_len == 0 || matches.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    Ok(bp * log_p.exp())
}

pub fn accuracy<T: PartialEq>(pred: &[T], gold: &[T]) -> Result<f64, EvalError> {
    check_lengths(pred.len(), gold.len())?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Multiset-overlap F1.
pub fn f1<T: Eq + Hash>(pred: &[T], gold: &[T]) -> f64 {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for g in gold {
        *counts.entry(g).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for p in pred {
        if let Some(c) = counts.get_mut(p) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// A corpus-level score of detokenized outputs against references.
pub trait Metric: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn score(&self, hyps: &[String], refs: &[String]) -> Result<f64, EvalError>;
    fn polarity(&self) -> Polarity {
        polarity(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bleu {
    pub max_n: usize,
}

impl Metric for Bleu {
    fn name(&self) -> &str {
        "bleu"
    }

    fn score(&self, hyps: &[String], refs: &[String]) -> Result<f64, EvalError> {
        bleu(hyps, refs, self.max_n)
    }
}

/// Exact-match rate of whole outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Accuracy;

impl Metric for Accuracy {
    fn name(&self) -> &str {
        "accuracy"
    }

    fn score(&self, hyps: &[String], refs: &[String]) -> Result<f64, EvalError> {
        let h: Vec<&str> = hyps.iter().map(|s| s.trim()).collect();
        let r: Vec<&str> = refs.iter().map(|s| s.trim()).collect();
        accuracy(&h, &r)
    }
}

/// Token F1 per output, averaged over the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct F1;

impl Metric for F1 {
    fn name(&self) -> &str {
        "f1"
    }

    fn score(&self, hyps: &[String], refs: &[String]) -> Result<f64, EvalError> {
        check_lengths(hyps.len(), refs.len())?;
        let total: f64 = hyps
            .iter()
            .zip(refs)
            .map(|(h, r)| {
                let h: Vec<&str> = h.split_whitespace().collect();
                let r: Vec<&str> = r.split_whitespace().collect();
                f1(&h, &r)
            })
            .sum();
        Ok(total / hyps.len() as f64)
    }
}

/// Scores for every `dataset.metric` pair plus their arithmetic mean.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreBoard {
    scores: IndexMap<String, f64>,
}

impl ScoreBoard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, dataset: &str, metric: &str, score: f64) {
        self.scores.insert(format!("{dataset}.{metric}"), score);
    }

    pub fn get(&self, dataset: &str, metric: &str) -> Option<f64> {
        self.scores.get(&format!("{dataset}.{metric}")).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, f64)> {
        self.scores.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn overall(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        self.scores.values().sum::<f64>() / self.scores.len() as f64
    }

    pub fn to_json(&self) -> serde_json::Value {
        let scores: serde_json::Map<String, serde_json::Value> =
            self.scores.iter().map(|(k, &v)| (k.clone(), v.into())).collect();
        serde_json::json!({ "scores": scores, "overall": self.overall() })
    }
}

/// Inputs and references of one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub name: String,
    pub srcs: Vec<Vec<u32>>,
    pub refs: Vec<String>,
}

/// Decodes each dataset once and scores it with every metric.
pub fn evaluate<F>(datasets: &[EvalSet], metrics: &[Box<dyn Metric>], mut decode: F) -> Result<ScoreBoard, EvalError>
where
    F: FnMut(&EvalSet) -> Result<Vec<String>, EvalError>,
{
    if datasets.is_empty() || metrics.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut board = ScoreBoard::new();
    for set in datasets {
        let hyps = decode(set)?;
        for m in metrics {
            board.insert(&set.name, m.name(), m.score(&hyps, &set.refs)?);
        }
    }
    Ok(board)
}

#[derive(Debug)]
pub struct Evaluator {
    pub generator: Generator,
    pub datasets: Vec<EvalSet>,
    pub metrics: Vec<Box<dyn Metric>>,
}

impl Evaluator {
    pub fn evaluate(&self, model: &dyn SeqModel) -> Result<ScoreBoard, EvalError> {
        evaluate(&self.datasets, &self.metrics, |set| Ok(self.generator.generate(model, &set.srcs)?))
    }

    /// Polarity of the metric named in `dataset.metric`, or of the mean.
    pub fn polarity_of(&self, key: Option<&(String, String)>) -> Polarity {
        match key {
            Some((_, metric)) => self
                .metrics
                .iter()
                .find(|m| m.name() == metric)
                .map_or_else(|| polarity(metric), |m| m.polarity()),
            None => Polarity::HigherIsBetter,
        }
    }
}

pub fn parse_assess_by(s: &str) -> Result<(String, String), EvalError> {
    let mut parts = s.split('.');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(d), Some(m), None) if !d.is_empty() && !m.is_empty() => Ok((d.to_string(), m.to_string())),
        _ => Err(EvalError::FormatError(s.to_string())),
    }
}

/// Index of the best score; ties go to the later entry.
pub fn pick_best(scores: &[f64], polarity: Polarity) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.map_or(true, |b| polarity.at_least(s, scores[b])) {
            best = Some(i);
        }
    }
    best
}

/// Element-wise mean of parameter sets with identical names and shapes.
pub fn average_params(sets: &[&[(String, Tensor)]]) -> Result<Vec<(String, Tensor)>, EvalError> {
    let first = *sets.first().ok_or(EvalError::Empty)?;
    let mut sums: Vec<(String, Tensor)> = first.to_vec();
    for set in &sets[1..] {
        if set.len() != sums.len() {
            return Err(EvalError::ParamMismatch(format!("{} vs {} tensors", set.len(), sums.len())));
        }
        for ((name, acc), (n2, t)) in sums.iter_mut().zip(set.iter()) {
            if name != n2 || acc.shape() != t.shape() {
                return Err(EvalError::ParamMismatch(format!("`{name}` vs `{n2}`")));
            }
            acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
        }
    }
    let k = sets.len() as f64;
    for (_, t) in &mut sums {
        t.data_mut().iter_mut().for_each(|x| *x /= k);
    }
    Ok(sums)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Index of the best entry in the history.
    pub best: usize,
    /// Mean of the window of `k` entries ending at `best`, with best's state.
    pub best_avg: Checkpoint,
}

/// Picks the best checkpoint and averages the `k` checkpoints ending at it.
pub fn select_and_average(history: &[(Checkpoint, f64)], k: usize, polarity: Polarity) -> Result<Selection, EvalError> {
    let scores: Vec<f64> = history.iter().map(|(_, s)| *s).collect();
    let best = pick_best(&scores, polarity).ok_or(EvalError::Empty)?;
    let start = (best + 1).saturating_sub(k.max(1));
    let window: Vec<&[(String, Tensor)]> = history[start..=best].iter().map(|(c, _)| c.params.as_slice()).collect();
    Ok(Selection {
        best,
        best_avg: Checkpoint {
            params: average_params(&window)?,
            state: history[best].0.state.clone(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_examples() {
        let s = ["a b c d e".to_string()];
        assert_eq!(bleu(&s, &s, 4).unwrap(), 1.0);
        assert_eq!(bleu(&["the the the the"], &["the cat sat down"], 4).unwrap(), 0.0);
        assert!(matches!(bleu(&["a"], &["a", "b"], 4), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(bleu::<&str, &str>(&[], &[], 4), Err(EvalError::Empty)));
    }

    #[test]
    fn accuracy_and_f1_examples() {
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert_eq!(accuracy(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert_eq!(f1(&["a", "b"], &["b", "c"]), 0.5);
        assert_eq!(f1(&["a"], &["a"]), 1.0);
        assert_eq!(f1::<&str>(&[], &["a"]), 0.0);
        assert_eq!(f1::<&str>(&[], &[]), 1.0);
    }

    #[test]
    fn assess_by_needs_one_dot() {
        assert_eq!(parse_assess_by("valid.bleu").unwrap(), ("valid".into(), "bleu".into()));
        assert!(parse_assess_by("valid").is_err());
        assert!(parse_assess_by("a.b.c").is_err());
        assert!(parse_assess_by(".bleu").is_err());
    }

    #[test]
    fn scoreboard_json_shape() {
        let mut b = ScoreBoard::new();
        for (i, s) in [0.2, 0.4, 0.6, 0.8].into_iter().enumerate() {
            b.insert(&format!("d{}", i / 2), &format!("m{}", i % 2), s);
        }
        assert!((b.overall() - 0.5).abs() < 1e-15);
        let j = b.to_json();
        assert_eq!(j["scores"]["d1.m0"], 0.6);
        assert!(j["overall"].is_number());
    }

    #[test]
    fn best_ties_go_later() {
        assert_eq!(pick_best(&[0.1, 0.3, 0.3, 0.2], Polarity::HigherIsBetter), Some(2));
        assert_eq!(pick_best(&[0.5, 0.1, 0.1], Polarity::LowerIsBetter), Some(2));
        assert_eq!(pick_best(&[], Polarity::LowerIsBetter), None);
    }
}
