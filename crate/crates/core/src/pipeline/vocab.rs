use std::collections::HashMap;

use super::PipelineError;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_RESERVED: usize = 5;

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<s>", "</s>", "<mask>"];

/// Token ↔ id bijection with the reserved ids fixed at 0..5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_counted(Vec::new())
    }
}

impl Vocabulary {
    /// Reserved tokens followed by `entries` in the given order.
    fn from_counted(entries: Vec<(String, u64)>) -> Self {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; NUM_RESERVED];
        for (t, c) in entries {
            tokens.push(t);
            counts.push(c);
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, counts, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or the unk id.
    pub fn lookup(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    pub fn is_reserved(id: u32) -> bool {
        (id as usize) < NUM_RESERVED
    }

    /// `<token>\t<count>` per line, reserved tokens first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            out.push_str(t);
            out.push('\t');
            out.push_str(&c.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, PipelineError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, count) = line
                .rsplit_once('\t')
                .ok_or_else(|| PipelineError::BadFile(format!("vocabulary line {} lacks a tab", i + 1)))?;
            let count: u64 = count
                .parse()
                .map_err(|_| PipelineError::BadFile(format!("vocabulary line {}: bad count `{count}`", i + 1)))?;
            if i < NUM_RESERVED {
                if tok != RESERVED_TOKENS[i] {
                    return Err(PipelineError::BadFile(format!(
                        "vocabulary line {} must be `{}`, found `{tok}`",
                        i + 1,
                        RESERVED_TOKENS[i]
                    )));
                }
                continue;
            }
            entries.push((tok.to_string(), count));
        }
        if text.lines().count() < NUM_RESERVED {
            return Err(PipelineError::BadFile("vocabulary misses reserved tokens".into()));
        }
        let vocab = Self::from_counted(entries);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(PipelineError::BadFile("vocabulary has duplicate tokens".into()));
        }
        Ok(vocab)
    }
}

/// Reserved ids, then tokens by descending count (ties lexicographic);
/// tokens seen fewer than `min_count` times are dropped.
pub fn build_vocab<I, S>(tokens: I, min_count: u64) -> Vocabulary
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts: HashMap<String, u64> = HashMap::new();
    for t in tokens {
        let t = t.as_ref();
        if RESERVED_TOKENS.contains(&t) {
            continue;
        }
        *counts.entry(t.to_string()).or_default() += 1;
    }
    let mut entries: Vec<(String, u64)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    entries.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
    Vocabulary::from_counted(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_rule() {
        let v = build_vocab(["b", "a", "a", "a"], 1);
        assert_eq!(v.len(), 7);
        assert_eq!(v.lookup("<pad>"), PAD);
        assert_eq!(v.lookup("<mask>"), MASK);
        assert_eq!(v.lookup("a"), 5);
        assert_eq!(v.lookup("b"), 6);
    }

    #[test]
    fn min_count_drops_rare_tokens() {
        let v = build_vocab(["b", "a", "a", "a"], 2);
        assert!(!v.contains("b"));
        assert_eq!(v.lookup("b"), UNK);
    }

    #[test]
    fn empty_stream_gives_reserved_only() {
        let v = build_vocab(Vec::<String>::new(), 1);
        assert_eq!(v.len(), NUM_RESERVED);
    }

    #[test]
    fn file_round_trip() {
        let v = build_vocab(["x", "y", "y", "z\tq"], 1);
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_text("a\t1\n").is_err());
    }
}
