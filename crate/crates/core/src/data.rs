//! Datasets: raw files organised into field-name → value samples.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use indexmap::IndexMap;
use thiserror::Error;

use crate::io::{self, IoError, LineReader};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("parallel files differ in length: {src} source lines vs {tgt} target lines")]
    LengthMismatch { src: usize, tgt: usize },
    #[error("{uri}:{line}: {msg}")]
    Parse { uri: String, line: usize, msg: String },
    #[error("sample has no field `{0}`")]
    MissingField(String),
    #[error("unknown on_error policy `{0}`; expected abort or skip")]
    BadPolicy(String),
}

impl DataError {
    pub fn line(&self) -> Option<usize> {
        match self {
            DataError::Parse { line, .. } => Some(*line),
            DataError::Io(IoError::InvalidUtf8 { line, .. }) => Some(*line),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Str(String),
    Int(i64),
    Float(f64),
    List(Vec<String>),
}

impl fmt::Display for FieldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldValue::Str(s) => f.write_str(s),
            FieldValue::Int(i) => write!(f, "{i}"),
            FieldValue::Float(x) => write!(f, "{x}"),
            FieldValue::List(items) => f.write_str(&items.join(" ")),
        }
    }
}

/// Counts live tracked items and remembers the peak.
#[derive(Debug, Clone, Default)]
pub struct ResidencyProbe {
    inner: Arc<ProbeCounters>,
}

#[derive(Debug, Default)]
struct ProbeCounters {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl ResidencyProbe {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn guard(&self) -> ProbeGuard {
        let now = self.inner.current.fetch_add(1, Ordering::AcqRel) + 1;
        self.inner.peak.fetch_max(now, Ordering::AcqRel);
        ProbeGuard {
            counters: self.inner.clone(),
        }
    }

    pub fn current(&self) -> usize {
        self.inner.current.load(Ordering::Acquire)
    }

    pub fn peak(&self) -> usize {
        self.inner.peak.load(Ordering::Acquire)
    }
}

/// One tracked item; dropping it decrements the probe.
pub struct ProbeGuard {
    counters: Arc<ProbeCounters>,
}

impl Clone for ProbeGuard {
    fn clone(&self) -> Self {
        ResidencyProbe {
            inner: self.counters.clone(),
        }
        .guard()
    }
}

impl Drop for ProbeGuard {
    fn drop(&mut self) {
        self.counters.current.fetch_sub(1, Ordering::AcqRel);
    }
}

impl fmt::Debug for ProbeGuard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ProbeGuard")
    }
}

// Instrumentation never affects value equality.
impl PartialEq for ProbeGuard {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// Ordered field-name → value record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sample {
    fields: IndexMap<String, FieldValue>,
    pub(crate) probe: Option<ProbeGuard>,
}

impl Sample {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: FieldValue) -> Self {
        self.insert(name, value);
        self
    }

    pub fn insert(&mut self, name: &str, value: FieldValue) {
        self.fields.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&FieldValue> {
        self.fields.get(name)
    }

    /// Field rendered as text (lists joined by spaces).
    pub fn text(&self, name: &str) -> Result<String, DataError> {
        self.get(name)
            .map(ToString::to_string)
            .ok_or_else(|| DataError::MissingField(name.to_string()))
    }

    pub fn fields(&self) -> impl Iterator<Item = (&str, &FieldValue)> {
        self.fields.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Detaches the residency guard, if any.
    pub(crate) fn take_probe(&mut self) -> Option<ProbeGuard> {
        self.probe.take()
    }
}

/// Pairs line i of `src_uri` with line i of `tgt_uri`.
pub fn load_parallel(src_uri: &str, tgt_uri: &str, src_field: &str, tgt_field: &str) -> Result<Vec<Sample>, DataError> {
    let src = io::read_lines(src_uri)?;
    let tgt = io::read_lines(tgt_uri)?;
    if src.len() != tgt.len() {
        return Err(DataError::LengthMismatch {
            src: src.len(),
            tgt: tgt.len(),
        });
    }
    Ok(src
        .into_iter()
        .zip(tgt)
        .map(|(s, t)| {
            Sample::new()
                .with(src_field, FieldValue::Str(s))
                .with(tgt_field, FieldValue::Str(t))
        })
        .collect())
}

/// One sample per line with a single text field.
pub fn load_text(uri: &str, field: &str) -> Result<Vec<Sample>, DataError> {
    Ok(io::read_lines(uri)?
        .into_iter()
        .map(|l| Sample::new().with(field, FieldValue::Str(l)))
        .collect())
}

pub fn load_jsonl(uri: &str) -> Result<Vec<Sample>, DataError> {
    let mut out = Vec::new();
    for (i, line) in io::open_line_reader(uri)?.enumerate() {
        out.push(parse_json_line(&line?).map_err(|msg| DataError::Parse {
            uri: uri.to_string(),
            line: i + 1,
            msg,
        })?);
    }
    Ok(out)
}

/// Parses one flat JSON object.
pub fn parse_json_line(line: &str) -> Result<Sample, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let serde_json::Value::Object(map) = value else {
        return Err("expected a JSON object".into());
    };
    if map.is_empty() {
        return Err("sample has no fields".into());
    }
    let mut sample = Sample::new();
    for (k, v) in map {
        let field = match v {
            serde_json::Value::String(s) => FieldValue::Str(s),
            serde_json::Value::Number(n) => match n.as_i64() {
                Some(i) => FieldValue::Int(i),
                None => FieldValue::Float(n.as_f64().ok_or("number out of range")?),
            },
            serde_json::Value::Array(items) => FieldValue::List(
                items
                    .into_iter()
                    .map(|item| match item {
                        serde_json::Value::String(s) => Ok(s),
                        _ => Err(format!("field `{k}`: lists may only hold strings")),
                    })
                    .collect::<Result<_, _>>()?,
            ),
            _ => return Err(format!("field `{k}` is not a string, number or string list")),
        };
        sample.insert(&k, field);
    }
    Ok(sample)
}

pub type LineParser = Arc<dyn Fn(&str) -> Result<Sample, String> + Send + Sync>;

/// Parser for `src<TAB>tgt` lines.
pub fn tsv_parser(src_field: &str, tgt_field: &str) -> LineParser {
    let (s, t) = (src_field.to_string(), tgt_field.to_string());
    Arc::new(move |line| {
        let (a, b) = line.split_once('\t').ok_or("expected two tab-separated columns")?;
        if b.contains('\t') {
            return Err("expected two tab-separated columns".into());
        }
        Ok(Sample::new()
            .with(&s, FieldValue::Str(a.to_string()))
            .with(&t, FieldValue::Str(b.to_string())))
    })
}

pub fn text_parser(field: &str) -> LineParser {
    let f = field.to_string();
    Arc::new(move |line| Ok(Sample::new().with(&f, FieldValue::Str(line.to_string()))))
}

pub fn jsonl_parser() -> LineParser {
    Arc::new(parse_json_line)
}

/// What a loader does with a sample that fails to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OnError {
    #[default]
    Abort,
    Skip,
}

impl std::str::FromStr for OnError {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "abort" => Ok(OnError::Abort),
            "skip" => Ok(OnError::Skip),
            other => Err(DataError::BadPolicy(other.to_string())),
        }
    }
}

/// A resettable source of samples read one at a time.
pub trait SampleStream: Send {
    /// `Ok(None)` signals the end of the pass and repeats until `reset`.
    fn next_sample(&mut self) -> Result<Option<Sample>, DataError>;
    fn reset(&mut self) -> Result<(), DataError>;
}

/// Line-by-line dataset holding at most one sample at a time.
pub struct StreamingDataset {
    reader: LineReader,
    parser: LineParser,
    exhausted: bool,
    probe: Option<ResidencyProbe>,
}

impl fmt::Debug for StreamingDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StreamingDataset")
            .field("uri", &self.reader.uri())
            .field("position", &self.reader.position())
            .field("exhausted", &self.exhausted)
            .finish()
    }
}

pub fn stream_open(uri: &str, parser: LineParser) -> Result<StreamingDataset, DataError> {
    Ok(StreamingDataset {
        reader: io::open_line_reader(uri)?,
        parser,
        exhausted: false,
        probe: None,
    })
}

impl StreamingDataset {
    /// Attaches a probe; every sample produced afterwards is tracked until dropped.
    pub fn with_probe(mut self, probe: ResidencyProbe) -> Self {
        self.probe = Some(probe);
        self
    }

    pub fn is_exhausted(&self) -> bool {
        self.exhausted
    }
}

impl SampleStream for StreamingDataset {
    fn next_sample(&mut self) -> Result<Option<Sample>, DataError> {
        if self.exhausted {
            return Ok(None);
        }
        match self.reader.next_line() {
            None => {
                self.exhausted = true;
                Ok(None)
            }
            Some(Err(e)) => Err(e.into()),
            Some(Ok(line)) => {
                let mut sample = (self.parser)(&line).map_err(|msg| DataError::Parse {
                    uri: self.reader.uri().to_string(),
                    line: self.reader.line_number(),
                    msg,
                })?;
                sample.probe = self.probe.as_ref().map(ResidencyProbe::guard);
                Ok(Some(sample))
            }
        }
    }

    fn reset(&mut self) -> Result<(), DataError> {
        self.reader.reset()?;
        self.exhausted = false;
        Ok(())
    }
}

/// In-memory samples replayed as a stream.
#[derive(Debug, Clone)]
pub struct VecStream {
    samples: Arc<Vec<Sample>>,
    pos: usize,
}

impl VecStream {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self {
            samples: Arc::new(samples),
            pos: 0,
        }
    }
}

impl SampleStream for VecStream {
    fn next_sample(&mut self) -> Result<Option<Sample>, DataError> {
        let s = self.samples.get(self.pos).cloned();
        if s.is_some() {
            self.pos += 1;
        }
        Ok(s)
    }

    fn reset(&mut self) -> Result<(), DataError> {
        self.pos = 0;
        Ok(())
    }
}

/// Two line-aligned files read in lockstep, one sample per line pair.
pub struct ParallelStream {
    src: LineReader,
    tgt: LineReader,
    fields: (String, String),
    count: usize,
    probe: Option<ResidencyProbe>,
}

impl fmt::Debug for ParallelStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParallelStream")
            .field("src", &self.src.uri())
            .field("tgt", &self.tgt.uri())
            .field("count", &self.count)
            .finish()
    }
}

pub fn stream_parallel(src_uri: &str, tgt_uri: &str, src_field: &str, tgt_field: &str) -> Result<ParallelStream, DataError> {
    Ok(ParallelStream {
        src: io::open_line_reader(src_uri)?,
        tgt: io::open_line_reader(tgt_uri)?,
        fields: (src_field.to_string(), tgt_field.to_string()),
        count: 0,
        probe: None,
    })
}

impl ParallelStream {
    pub fn with_probe(mut self, probe: ResidencyProbe) -> Self {
        self.probe = Some(probe);
        self
    }
}

impl SampleStream for ParallelStream {
    fn next_sample(&mut self) -> Result<Option<Sample>, DataError> {
        match (self.src.next_line(), self.tgt.next_line()) {
            (None, None) => Ok(None),
            (Some(s), Some(t)) => {
                self.count += 1;
                let mut sample = Sample::new()
                    .with(&self.fields.0, FieldValue::Str(s?))
                    .with(&self.fields.1, FieldValue::Str(t?));
                sample.probe = self.probe.as_ref().map(ResidencyProbe::guard);
                Ok(Some(sample))
            }
            (Some(_), None) => Err(DataError::LengthMismatch {
                src: self.count + 1,
                tgt: self.count,
            }),
            (None, Some(_)) => Err(DataError::LengthMismatch {
                src: self.count,
                tgt: self.count + 1,
            }),
        }
    }

    fn reset(&mut self) -> Result<(), DataError> {
        self.src.reset()?;
        self.tgt.reset()?;
        self.count = 0;
        Ok(())
    }
}
