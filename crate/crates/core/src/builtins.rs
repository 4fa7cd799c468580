//! Built-in plugins for all thirteen kinds and the typed values their
//! factories produce.

use std::sync::Arc;

use crate::batching::{Sampler, SequentialSampler, ShuffleSampler, TokenBudgetSampler};
use crate::config::{derive_seed, ConfigError, Section, Value};
use crate::criterion::{CrossEntropy, Criterion, Glancing, MultiTask, NatLength};
use crate::data::{self, DataError, SampleStream, Sample};
use crate::eval::{Accuracy, Bleu, Metric, F1};
use crate::model::{LinearModel, SeqModel, Transformer, TransformerConfig, Variant};
use crate::registry::{BuildContext, FactoryError, Instance, Kind, Registry, RegistryError};
use crate::search::{Beam, Greedy, MaskPredict, Npd, Search};
use crate::trainer::{AdamConfig, Schedule, ScheduleError, TrainError, TrainerConfig};

fn other(e: impl std::fmt::Display) -> FactoryError {
    FactoryError::Other(e.to_string())
}

fn invalid(s: &Section<'_>, key: &str, msg: &str) -> FactoryError {
    FactoryError::Config(ConfigError::Invalid {
        path: s.key_path(key),
        msg: msg.to_string(),
    })
}

impl From<ScheduleError> for FactoryError {
    fn from(e: ScheduleError) -> Self {
        match e {
            ScheduleError::Config(c) => FactoryError::Config(c),
            other => FactoryError::Other(other.to_string()),
        }
    }
}

impl From<TrainError> for FactoryError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => FactoryError::Config(c),
            other => FactoryError::Other(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataFormat {
    /// Two line-aligned files.
    Parallel { src: String, tgt: String },
    /// One `src<TAB>tgt` pair per line.
    Tsv { path: String },
    /// One source per line, no target.
    Text { path: String },
    Jsonl { path: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetConfig {
    pub format: DataFormat,
    pub src_field: String,
    pub tgt_field: String,
    /// Read lazily through a shuffle buffer instead of loading up front.
    pub streaming: bool,
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Vec<Sample>, DataError> {
        match &self.format {
            DataFormat::Parallel { src, tgt } => data::load_parallel(src, tgt, &self.src_field, &self.tgt_field),
            DataFormat::Text { path } => data::load_text(path, &self.src_field),
            DataFormat::Jsonl { path } => data::load_jsonl(path),
            DataFormat::Tsv { .. } => {
                let mut stream = self.open_stream()?;
                let mut out = Vec::new();
                while let Some(s) = stream.next_sample()? {
                    out.push(s);
                }
                Ok(out)
            }
        }
    }

    pub fn open_stream(&self) -> Result<Box<dyn SampleStream>, DataError> {
        Ok(match &self.format {
            DataFormat::Parallel { src, tgt } => {
                Box::new(data::stream_parallel(src, tgt, &self.src_field, &self.tgt_field)?)
            }
            DataFormat::Tsv { path } => Box::new(data::stream_open(path, data::tsv_parser(&self.src_field, &self.tgt_field))?),
            DataFormat::Text { path } => Box::new(data::stream_open(path, data::text_parser(&self.src_field))?),
            DataFormat::Jsonl { path } => Box::new(data::stream_open(path, data::jsonl_parser())?),
        })
    }
}

fn dataset(class: &'static str) -> impl Fn(&Registry, &Section<'_>, &BuildContext) -> Result<Instance, FactoryError> {
    move |_, s, _| {
        let format = match class {
            "parallel" => DataFormat::Parallel {
                src: s.req_str("src")?.to_string(),
                tgt: s.req_str("tgt")?.to_string(),
            },
            "tsv" => DataFormat::Tsv {
                path: s.req_str("path")?.to_string(),
            },
            "text" => DataFormat::Text {
                path: s.req_str("path")?.to_string(),
            },
            _ => DataFormat::Jsonl {
                path: s.req_str("path")?.to_string(),
            },
        };
        Ok(Box::new(DatasetConfig {
            format,
            src_field: s.opt_str("src_field")?.unwrap_or("src").to_string(),
            tgt_field: s.opt_str("tgt_field")?.unwrap_or("tgt").to_string(),
            streaming: s.bool_or("streaming", false)?,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerConfig {
    pub bpe: String,
    pub vocab: String,
    /// Merge operations learnt by `preprocess`.
    pub merges: usize,
    pub min_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoaderConfig {
    /// Shuffle-buffer capacity for streaming datasets.
    pub buffer_size: usize,
    /// Number of shards the stream is split into.
    pub num_workers: usize,
    /// Shard read by this process.
    pub worker_id: usize,
    /// Produce batches on a background thread.
    pub prefetch: bool,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        Self {
            buffer_size: 1024,
            num_workers: 1,
            worker_id: 0,
            prefetch: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub input: Option<DatasetConfig>,
    pub output: Option<String>,
    pub checkpoint: Option<String>,
}

#[derive(Debug)]
pub struct EvaluatorConfig {
    pub datasets: Vec<(String, DatasetConfig)>,
    pub metrics: Vec<Box<dyn Metric>>,
    /// Where the score board JSON is written.
    pub output: Option<String>,
    /// Checkpoint scored by the `evaluate` command.
    pub checkpoint: Option<String>,
}

fn class_value(name: &str) -> Value {
    Value::map([("class", Value::from(name))])
}

fn transformer_config(s: &Section<'_>, ctx: &BuildContext) -> Result<TransformerConfig, FactoryError> {
    let d = TransformerConfig::default();
    let vocab_size = match s.opt_usize("vocab_size")?.or(ctx.vocab_size) {
        Some(v) => v,
        None => return Err(ConfigError::Missing(s.key_path("vocab_size")).into()),
    };
    let layers = s.opt_usize("layers")?;
    Ok(TransformerConfig {
        vocab_size,
        d_model: s.usize_or("d_model", d.d_model)?,
        n_heads: s.usize_or("n_heads", d.n_heads)?,
        enc_layers: s.opt_usize("enc_layers")?.or(layers).unwrap_or(d.enc_layers),
        dec_layers: s.opt_usize("dec_layers")?.or(layers).unwrap_or(d.dec_layers),
        d_ff: s.usize_or("d_ff", d.d_ff)?,
        max_positions: s.usize_or("max_positions", d.max_positions)?,
        dropout: s.f64_or("dropout", d.dropout)?,
        seed: derive_seed(ctx.seed, "model"),
    })
}

fn boxed_model(m: impl SeqModel + 'static) -> Instance {
    Box::new(Box::new(m) as Box<dyn SeqModel>)
}

fn boxed_search(s: impl Search + 'static) -> Instance {
    Box::new(Arc::new(s) as Arc<dyn Search>)
}

fn boxed_criterion(c: impl Criterion + 'static) -> Instance {
    Box::new(Box::new(c) as Box<dyn Criterion>)
}

fn boxed_metric(m: impl Metric + 'static) -> Instance {
    Box::new(Box::new(m) as Box<dyn Metric>)
}

fn boxed_sampler(s: impl Sampler + 'static) -> Instance {
    Box::new(Box::new(s) as Box<dyn Sampler>)
}

fn positive(s: &Section<'_>, key: &str, default: usize) -> Result<usize, FactoryError> {
    let v = s.usize_or(key, default)?;
    if v == 0 {
        return Err(invalid(s, key, "must be at least 1"));
    }
    Ok(v)
}

/// Registers every built-in plugin.
pub fn register_builtins(reg: &mut Registry) -> Result<(), RegistryError> {
    for class in ["parallel", "tsv", "text", "jsonl"] {
        reg.register(Kind::Dataset, class, dataset(class))?;
    }

    reg.register(Kind::Sampler, "sequential", |_, s, _| {
        Ok(boxed_sampler(SequentialSampler {
            batch_size: positive(s, "batch_size", 32)?,
        }))
    })?;
    reg.register(Kind::Sampler, "shuffle", |_, s, ctx| {
        Ok(boxed_sampler(ShuffleSampler {
            batch_size: positive(s, "batch_size", 32)?,
            seed: s.opt_u64("seed")?.unwrap_or_else(|| derive_seed(ctx.seed, "sampler")),
        }))
    })?;
    reg.register(Kind::Sampler, "token_budget", |_, s, _| {
        Ok(boxed_sampler(TokenBudgetSampler {
            max_tokens: positive(s, "max_tokens", 4096)?,
            seed: s.opt_u64("seed")?,
        }))
    })?;

    reg.register(Kind::Dataloader, "default", |_, s, _| {
        let d = LoaderConfig::default();
        let cfg = LoaderConfig {
            buffer_size: positive(s, "buffer_size", d.buffer_size)?,
            num_workers: positive(s, "num_workers", d.num_workers)?,
            worker_id: s.usize_or("worker_id", d.worker_id)?,
            prefetch: s.bool_or("prefetch", d.prefetch)?,
        };
        if cfg.worker_id >= cfg.num_workers {
            return Err(invalid(s, "worker_id", "must be below num_workers"));
        }
        Ok(Box::new(cfg))
    })?;

    reg.register(Kind::Tokenizer, "bpe", |_, s, _| {
        Ok(Box::new(TokenizerConfig {
            bpe: s.req_str("bpe")?.to_string(),
            vocab: s.req_str("vocab")?.to_string(),
            merges: s.usize_or("merges", 8000)?,
            min_count: s.opt_u64("min_count")?.unwrap_or(1),
        }))
    })?;

    reg.register(Kind::Model, "transformer", |_, s, ctx| {
        let cfg = transformer_config(s, ctx)?;
        Ok(boxed_model(Transformer::new(cfg, Variant::Autoregressive).map_err(other)?))
    })?;
    reg.register(Kind::Model, "nat_transformer", |_, s, ctx| {
        let cfg = transformer_config(s, ctx)?;
        let length_delta = s.usize_or("length_delta", 10)?;
        Ok(boxed_model(Transformer::new(cfg, Variant::Parallel { length_delta }).map_err(other)?))
    })?;
    reg.register(Kind::Model, "linear", |_, s, ctx| {
        let vocab = match s.opt_usize("vocab_size")?.or(ctx.vocab_size) {
            Some(v) => v,
            None => return Err(ConfigError::Missing(s.key_path("vocab_size")).into()),
        };
        Ok(boxed_model(LinearModel::new(vocab, derive_seed(ctx.seed, "model")).map_err(other)?))
    })?;

    reg.register(Kind::Generator, "default", |r, s, ctx| {
        let input = match s.get("input") {
            Some(v) => Some(r.create::<DatasetConfig>(Kind::Dataset, &s.key_path("input"), v, ctx)?),
            None => None,
        };
        Ok(Box::new(GeneratorConfig {
            input,
            output: s.opt_str("output")?.map(str::to_string),
            checkpoint: s.opt_str("checkpoint")?.map(str::to_string),
        }))
    })?;

    reg.register(Kind::Criterion, "cross_entropy", |_, s, _| {
        Ok(boxed_criterion(CrossEntropy {
            epsilon: s.f64_or("epsilon", 0.0)?,
        }))
    })?;
    reg.register(Kind::Criterion, "glancing", |_, s, _| {
        let ratio = match s.opt_section("glancing_ratio")? {
            Some(sec) => {
                let sched = Schedule::from_section(&sec, "linear")?;
                sec.finish()?;
                sched
            }
            None => Schedule::Linear {
                start: 0.5,
                end: 0.3,
                total: None,
            },
        };
        Ok(boxed_criterion(Glancing {
            epsilon: s.f64_or("epsilon", 0.0)?,
            ratio,
        }))
    })?;
    reg.register(Kind::Criterion, "nat_length", |_, _, _| Ok(boxed_criterion(NatLength)))?;
    reg.register(Kind::Criterion, "multi_task", |r, s, ctx| {
        let items = s.opt_list("tasks")?.unwrap_or(&[]);
        let mut tasks = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let path = format!("{}[{i}]", s.key_path("tasks"));
            tasks.push(r.create::<Box<dyn Criterion>>(Kind::Criterion, &path, item, ctx)?);
        }
        let weights = s.opt_f64_list("weights")?.unwrap_or_else(|| vec![1.0; tasks.len()]);
        Ok(boxed_criterion(MultiTask::new(tasks, weights).map_err(|e| invalid(s, "tasks", &e.to_string()))?))
    })?;

    reg.register(Kind::Search, "greedy", |_, s, _| {
        Ok(boxed_search(Greedy::new(s.usize_or("max_len", 200)?).map_err(other)?))
    })?;
    reg.register(Kind::Search, "beam", |_, s, _| {
        let b = Beam::new(s.usize_or("beam", 4)?, s.usize_or("max_len", 200)?, s.f64_or("lenpen", 1.0)?);
        Ok(boxed_search(b.map_err(other)?))
    })?;
    reg.register(Kind::Search, "mask_predict", |_, s, _| {
        let m = MaskPredict::new(s.usize_or("iterations", 10)?, s.usize_or("max_len", 200)?);
        Ok(boxed_search(m.map_err(other)?))
    })?;
    reg.register(Kind::Search, "npd", |_, s, _| {
        let n = Npd::new(
            s.usize_or("length_beam", 3)?,
            s.usize_or("iterations", 10)?,
            s.usize_or("max_len", 200)?,
        );
        Ok(boxed_search(n.map_err(other)?))
    })?;

    reg.register(Kind::Optimizer, "adam", |_, s, _| {
        let d = AdamConfig::default();
        Ok(Box::new(AdamConfig {
            beta1: s.f64_or("beta1", d.beta1)?,
            beta2: s.f64_or("beta2", d.beta2)?,
            eps: s.f64_or("eps", d.eps)?,
        }))
    })?;

    for class in ["noam", "linear", "constant"] {
        reg.register(Kind::RateScheduler, class, move |_, s, _| {
            Ok(Box::new(Schedule::from_section(s, class)?))
        })?;
    }

    reg.register(Kind::Trainer, "default", |_, s, ctx| {
        Ok(Box::new(TrainerConfig::from_section(s, derive_seed(ctx.seed, "trainer"))?))
    })?;

    reg.register(Kind::Evaluator, "default", |r, s, ctx| {
        let mut datasets = Vec::new();
        if let Some(sec) = s.opt_section("datasets")? {
            for name in sec.keys() {
                let v = sec.require(name)?;
                datasets.push((name.clone(), r.create::<DatasetConfig>(Kind::Dataset, &sec.key_path(name), v, ctx)?));
            }
        }
        if datasets.is_empty() {
            return Err(ConfigError::Missing(s.key_path("datasets")).into());
        }
        let names = s.opt_str_list("metrics")?.unwrap_or_else(|| vec!["bleu"]);
        let mut metrics = Vec::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            let path = format!("{}[{i}]", s.key_path("metrics"));
            metrics.push(r.create::<Box<dyn Metric>>(Kind::Metric, &path, &class_value(name), ctx)?);
        }
        if metrics.is_empty() {
            return Err(invalid(s, "metrics", "needs at least one metric"));
        }
        Ok(Box::new(EvaluatorConfig {
            datasets,
            metrics,
            output: s.opt_str("output")?.map(str::to_string),
            checkpoint: s.opt_str("checkpoint")?.map(str::to_string),
        }))
    })?;

    reg.register(Kind::Metric, "bleu", |_, s, _| {
        Ok(boxed_metric(Bleu {
            max_n: positive(s, "max_n", 4)?,
        }))
    })?;
    reg.register(Kind::Metric, "accuracy", |_, _, _| Ok(boxed_metric(Accuracy)))?;
    reg.register(Kind::Metric, "f1", |_, _, _| Ok(boxed_metric(F1)))?;
    Ok(())
}

/// A registry holding every built-in plugin.
pub fn builtin_registry() -> Registry {
    let mut reg = Registry::new();
    register_builtins(&mut reg).expect("built-in plugin names are unique and valid");
    reg
}
