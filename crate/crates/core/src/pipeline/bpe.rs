//! Byte-pair encoding with an end-of-word marker on the last symbol.

use std::collections::{BTreeMap, HashMap};

use super::PipelineError;

pub const END_OF_WORD: &str = "</w>";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len().saturating_sub(1);
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == last {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merge_word(symbols: &mut Vec<String>, a: &str, b: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == a && symbols[i + 1] == b {
            let joined = format!("{a}{b}");
            symbols[i] = joined;
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

/// Learns up to `num_merges` merges from whitespace-split words.
///
/// Each round merges the most frequent adjacent pair; equal counts go to the
/// lexicographically smaller pair. Training stops early once no pair is left.
pub fn bpe_train<'a, I>(words: I, num_merges: usize) -> Result<BpeModel, PipelineError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for w in words {
        for piece in w.split_whitespace() {
            *counts.entry(piece).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    let mut vocab: Vec<(Vec<String>, u64)> = counts.into_iter().map(|(w, c)| (word_symbols(w), c)).collect();
    let mut merges = Vec::with_capacity(num_merges);
    for _ in 0..num_merges {
        let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, c) in &vocab {
            for win in symbols.windows(2) {
                *pairs.entry((win[0].as_str(), win[1].as_str())).or_default() += c;
            }
        }
        let best = pairs
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((a, b), _)) = best else { break };
        let (a, b) = (a.to_string(), b.to_string());
        for (symbols, _) in &mut vocab {
            merge_word(symbols, &a, &b);
        }
        merges.push((a, b));
    }
    Ok(BpeModel::from_merges(merges))
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, m) in merges.iter().enumerate() {
            ranks.entry(m.clone()).or_insert(i);
        }
        Self { merges, ranks }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Segments one word by repeatedly applying the earliest-learned merge.
    pub fn encode_word(&self, word: &str) -> Vec<String> {
        let mut symbols = word_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            merge_word(&mut symbols, a, b);
        }
        symbols
    }

    pub fn encode(&self, text: &str) -> Vec<String> {
        text.split_whitespace().flat_map(|w| self.encode_word(w)).collect()
    }

    /// `#merges:<N>` followed by one space-separated pair per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("#merges:{}\n", self.merges.len());
        for (a, b) in &self.merges {
            out.push_str(a);
            out.push(' ');
            out.push_str(b);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, PipelineError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| PipelineError::BadFile("empty BPE model file".into()))?;
        let n: usize = header
            .strip_prefix("#merges:")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| PipelineError::BadFile(format!("bad BPE header `{header}`")))?;
        let mut merges = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => merges.push((a.to_string(), b.to_string())),
                _ => return Err(PipelineError::BadFile(format!("bad merge on line {}: `{line}`", i + 2))),
            }
        }
        if merges.len() != n {
            return Err(PipelineError::BadFile(format!("header announces {n} merges, found {}", merges.len())));
        }
        Ok(Self::from_merges(merges))
    }
}

/// Joins symbols, turning each end-of-word marker into a space.
pub fn bpe_decode<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        out.push_str(t.as_ref());
    }
    out.replace(END_OF_WORD, " ").trim_end_matches(' ').to_string()
}
