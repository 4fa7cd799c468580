//! Top-level orchestration of a run: `preprocess`, `train`, `generate` and
//! `evaluate` over one configuration tree.

use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::batching::{shard_stream, BatchError, BatchSource, DataLoader, PrefetchLoader, Processor, Sampler, StreamingLoader};
use crate::builtins::{builtin_registry, DatasetConfig, EvaluatorConfig, GeneratorConfig, LoaderConfig, TokenizerConfig};
use crate::config::{self, derive_seed, ConfigError, Section, Value};
use crate::criterion::Criterion;
use crate::data::{DataError, OnError, Sample};
use crate::eval::{EvalError, EvalSet, Evaluator, ScoreBoard};
use crate::generator::{write_outputs, Generator, GeneratorError};
use crate::io::{self, IoError};
use crate::model::{ModelError, SeqModel};
use crate::pipeline::{bpe_train, build_vocab, data_collate, FieldSpec, PipelineError, ProcessedSample, Tokenizer};
use crate::registry::{BuildContext, Kind, Registry, RegistryError};
use crate::search::Search;
use crate::trainer::{AdamConfig, Checkpoint, CheckpointError, Schedule, TrainError, TrainOutcome, Trainer, TrainerConfig};

pub const TOP_LEVEL_KEYS: [&str; 14] = [
    "seed",
    "data",
    "tokenizer",
    "dataset",
    "sampler",
    "dataloader",
    "model",
    "criterion",
    "search",
    "optimizer",
    "rate_scheduler",
    "trainer",
    "evaluator",
    "generator",
];

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("pipeline: {0}")]
    Pipeline(#[from] PipelineError),
    #[error("batching: {0}")]
    Batch(#[from] BatchError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("generation: {0}")]
    Generator(#[from] GeneratorError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl TaskError {
    pub fn is_config(&self) -> bool {
        match self {
            TaskError::Config(_) => true,
            TaskError::Registry(r) => matches!(r, RegistryError::Config(_) | RegistryError::UnknownPlugin { .. }),
            TaskError::Train(TrainError::Config(_)) => true,
            _ => false,
        }
    }

    /// 2 for configuration problems, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        if self.is_config() {
            2
        } else {
            1
        }
    }
}

fn missing(path: &str) -> TaskError {
    ConfigError::Missing(path.to_string()).into()
}

fn invalid(path: &str, msg: impl Into<String>) -> TaskError {
    ConfigError::Invalid {
        path: path.to_string(),
        msg: msg.into(),
    }
    .into()
}

/// Reads the config file and applies `key.path=value` overrides in order.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<Value, TaskError> {
    let mut root = config::load(path)?;
    for o in overrides {
        config::apply_override(&mut root, o)?;
    }
    Ok(root)
}

/// One run over a configuration tree.
#[derive(Debug)]
pub struct Task {
    root: Value,
    registry: Registry,
    seed: u64,
    on_error: OnError,
}

impl Task {
    pub fn new(root: Value) -> Result<Self, TaskError> {
        Self::with_registry(root, builtin_registry())
    }

    /// Uses `registry`, which may carry extra plugins besides the built-ins.
    pub fn with_registry(root: Value, registry: Registry) -> Result<Self, TaskError> {
        let top = Section::new("", &root)?;
        let seed = top.opt_u64("seed")?.unwrap_or(1);
        let on_error = match top.opt_section("data")? {
            Some(d) => {
                let p = d.opt_str("on_error")?.unwrap_or("abort");
                let policy = p.parse().map_err(|e: DataError| invalid(&d.key_path("on_error"), e.to_string()))?;
                d.finish()?;
                policy
            }
            None => OnError::Abort,
        };
        for key in top.keys() {
            if !TOP_LEVEL_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key.clone()).into());
            }
        }
        Ok(Self {
            root,
            registry,
            seed,
            on_error,
        })
    }

    pub fn root(&self) -> &Value {
        &self.root
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn ctx(&self, vocab_size: Option<usize>) -> BuildContext {
        BuildContext {
            seed: self.seed,
            vocab_size,
        }
    }

    fn create<T: 'static>(&self, kind: Kind, key: &str, vocab: Option<usize>) -> Result<T, TaskError> {
        let v = self.root.lookup(key).ok_or_else(|| missing(key))?;
        Ok(self.registry.create(kind, key, v, &self.ctx(vocab))?)
    }

    fn create_opt<T: 'static>(&self, kind: Kind, key: &str, vocab: Option<usize>) -> Result<Option<T>, TaskError> {
        match self.root.lookup(key) {
            Some(_) => self.create(kind, key, vocab).map(Some),
            None => Ok(None),
        }
    }

    fn tokenizer_config(&self) -> Result<TokenizerConfig, TaskError> {
        self.create(Kind::Tokenizer, "tokenizer", None)
    }

    pub fn load_tokenizer(&self) -> Result<Arc<Tokenizer>, TaskError> {
        let t = self.tokenizer_config()?;
        Ok(Arc::new(Tokenizer::load(&t.bpe, &t.vocab)?))
    }

    /// A fresh model sized to `tokenizer`.
    pub fn build_model(&self, tokenizer: &Tokenizer) -> Result<Box<dyn SeqModel>, TaskError> {
        self.create(Kind::Model, "model", Some(tokenizer.vocab.len()))
    }

    /// The configured search, or greedy (autoregressive) / mask-predict
    /// (parallel) with default settings.
    pub fn build_search(&self, model: &dyn SeqModel) -> Result<Arc<dyn Search>, TaskError> {
        if let Some(s) = self.create_opt(Kind::Search, "search", None)? {
            return Ok(s);
        }
        let parallel = model.as_transformer().is_some_and(|t| t.is_parallel());
        let class = if parallel { "mask_predict" } else { "greedy" };
        let v = Value::map([("class", Value::from(class))]);
        Ok(self.registry.create(Kind::Search, "search", &v, &self.ctx(None))?)
    }

    /// Learns BPE merges and the vocabulary from both sides of the training
    /// data and writes the two files named under `tokenizer`.
    pub fn preprocess(&self) -> Result<Tokenizer, TaskError> {
        let cfg = self.tokenizer_config()?;
        let data: DatasetConfig = self.create(Kind::Dataset, "dataset", None)?;
        let samples = data.load()?;
        let mut texts = Vec::with_capacity(samples.len() * 2);
        for s in &samples {
            for field in [&data.src_field, &data.tgt_field] {
                match s.get(field) {
                    Some(v) => texts.push(v.to_string()),
                    None if field == &data.src_field => return Err(DataError::MissingField(field.clone()).into()),
                    None => {}
                }
            }
        }
        let bpe = bpe_train(texts.iter().map(String::as_str), cfg.merges)?;
        let vocab = build_vocab(texts.iter().flat_map(|t| bpe.encode(t)), cfg.min_count);
        io::write_bytes(&cfg.bpe, bpe.to_text().as_bytes())?;
        io::write_bytes(&cfg.vocab, vocab.to_text().as_bytes())?;
        log::info!("wrote {} merges to {} and {} types to {}", bpe.merges().len(), cfg.bpe, vocab.len(), cfg.vocab);
        Ok(Tokenizer::new(bpe, vocab))
    }

    fn sampler(&self) -> Result<Box<dyn Sampler>, TaskError> {
        if let Some(s) = self.create_opt(Kind::Sampler, "sampler", None)? {
            return Ok(s);
        }
        let v = Value::map([("class", Value::from("shuffle"))]);
        Ok(self.registry.create(Kind::Sampler, "sampler", &v, &self.ctx(None))?)
    }

    fn process_all(&self, samples: Vec<Sample>, tok: &Tokenizer, spec: &FieldSpec) -> Result<Vec<ProcessedSample>, TaskError> {
        let mut out = Vec::with_capacity(samples.len());
        for (i, s) in samples.into_iter().enumerate() {
            match data_collate(s, tok, spec) {
                Ok(p) => out.push(p),
                Err(e) if self.on_error == OnError::Skip => log::warn!("skipping sample {}: {e}", i + 1),
                Err(e) => return Err(e.into()),
            }
        }
        Ok(out)
    }

    /// The training batch source described by `dataset`, `sampler` and
    /// `dataloader`.
    pub fn build_loader(&self, tok: &Arc<Tokenizer>) -> Result<Box<dyn BatchSource>, TaskError> {
        let data: DatasetConfig = self.create(Kind::Dataset, "dataset", None)?;
        let lc: LoaderConfig = self.create_opt(Kind::Dataloader, "dataloader", None)?.unwrap_or_default();
        let sampler = self.sampler()?;
        let spec = FieldSpec::training(&data.src_field, &data.tgt_field);
        if data.streaming {
            let stream = shard_stream(data.open_stream()?, lc.worker_id, lc.num_workers)?;
            let tok = Arc::clone(tok);
            let process: Processor = Arc::new(move |s| data_collate(s, &tok, &spec));
            let seed = derive_seed(self.seed, "dataloader");
            let loader = StreamingLoader::new(Box::new(stream), process, lc.buffer_size, sampler, self.on_error, seed)?;
            return Ok(if lc.prefetch {
                Box::new(PrefetchLoader::new(loader))
            } else {
                Box::new(loader)
            });
        }
        let samples: Vec<Sample> = data
            .load()?
            .into_iter()
            .enumerate()
            .filter(|(i, _)| i % lc.num_workers == lc.worker_id)
            .map(|(_, s)| s)
            .collect();
        let processed = self.process_all(samples, tok, &spec)?;
        let loader = DataLoader::new(Arc::new(processed), sampler)?;
        Ok(if lc.prefetch {
            Box::new(PrefetchLoader::new(loader))
        } else {
            Box::new(loader)
        })
    }

    fn eval_sets(&self, datasets: &[(String, DatasetConfig)], tok: &Tokenizer) -> Result<Vec<EvalSet>, TaskError> {
        let mut sets = Vec::with_capacity(datasets.len());
        for (name, d) in datasets {
            let mut srcs = Vec::new();
            let mut refs = Vec::new();
            for s in d.load()? {
                srcs.push(tok.encode(&s.text(&d.src_field)?));
                refs.push(s.text(&d.tgt_field)?);
            }
            sets.push(EvalSet {
                name: name.clone(),
                srcs,
                refs,
            });
        }
        Ok(sets)
    }

    fn evaluator(&self, tok: &Arc<Tokenizer>, model: &dyn SeqModel) -> Result<Option<(Evaluator, EvaluatorConfig)>, TaskError> {
        let Some(mut cfg) = self.create_opt::<EvaluatorConfig>(Kind::Evaluator, "evaluator", None)? else {
            return Ok(None);
        };
        let ev = Evaluator {
            generator: Generator::new(self.build_search(model)?, Arc::clone(tok)),
            datasets: self.eval_sets(&cfg.datasets, tok)?,
            metrics: std::mem::take(&mut cfg.metrics),
        };
        Ok(Some((ev, cfg)))
    }

    fn learning_rate(&self, trainer: &TrainerConfig) -> Result<Schedule, TaskError> {
        match (self.create_opt::<Schedule>(Kind::RateScheduler, "rate_scheduler", None)?, trainer.lr) {
            (Some(_), Some(_)) => Err(invalid("trainer.lr", "set either trainer.lr or rate_scheduler, not both")),
            (Some(s), None) => Ok(s),
            (None, lr) => Ok(Schedule::Constant(lr.unwrap_or(5e-4))),
        }
    }

    /// A trainer with every component built from the config.
    pub fn build_trainer(&self) -> Result<Trainer, TaskError> {
        let tok = self.load_tokenizer()?;
        let model = self.build_model(&tok)?;
        let criterion: Box<dyn Criterion> = self.create(Kind::Criterion, "criterion", None)?;
        let mut cfg: TrainerConfig = match self.create_opt(Kind::Trainer, "trainer", None)? {
            Some(c) => c,
            None => TrainerConfig {
                seed: derive_seed(self.seed, "trainer"),
                ..TrainerConfig::default()
            },
        };
        if let Some(adam) = self.create_opt::<AdamConfig>(Kind::Optimizer, "optimizer", None)? {
            cfg.adam = adam;
        }
        let lr = self.learning_rate(&cfg)?;
        let evaluator = self.evaluator(&tok, &*model)?;
        let loader = self.build_loader(&tok)?;
        let resume = cfg.resume.clone();
        let mut trainer = Trainer::new(model, criterion, loader, lr, cfg.clone());
        if let Some((ev, _)) = evaluator {
            let polarity = ev.polarity_of(cfg.assess_by.as_ref());
            trainer = trainer.with_evaluator(Box::new(move |m| ev.evaluate(m)), polarity);
        }
        if let Some(uri) = resume {
            trainer.resume_from(&uri)?;
            log::info!("resumed from {uri} at step {}", trainer.state().step);
        }
        Ok(trainer)
    }

    pub fn train(&self) -> Result<TrainOutcome, TaskError> {
        let mut trainer = self.build_trainer()?;
        Ok(trainer.train()?)
    }

    fn load_model(&self, tok: &Tokenizer, checkpoint: &str) -> Result<Box<dyn SeqModel>, TaskError> {
        let mut model = self.build_model(tok)?;
        let ckpt = Checkpoint::load(checkpoint)?;
        model.params_mut().assign(&ckpt.params)?;
        Ok(model)
    }

    /// Decodes every source of `generator.input` and writes one line each to
    /// `generator.output`; returns the outputs.
    pub fn generate(&self) -> Result<Vec<String>, TaskError> {
        let cfg: GeneratorConfig = self.create(Kind::Generator, "generator", None)?;
        let input = cfg.input.ok_or_else(|| missing("generator.input"))?;
        let output = cfg.output.ok_or_else(|| missing("generator.output"))?;
        let checkpoint = cfg.checkpoint.ok_or_else(|| missing("generator.checkpoint"))?;
        let tok = self.load_tokenizer()?;
        let model = self.load_model(&tok, &checkpoint)?;
        let gen = Generator::new(self.build_search(&*model)?, Arc::clone(&tok));
        let srcs = input
            .load()?
            .iter()
            .map(|s| Ok(tok.encode(&s.text(&input.src_field)?)))
            .collect::<Result<Vec<_>, DataError>>()?;
        let lines = gen.generate(&*model, &srcs)?;
        write_outputs(&output, &lines)?;
        log::info!("wrote {} lines to {output}", lines.len());
        Ok(lines)
    }

    /// Scores a checkpoint on every evaluator dataset; the board is also
    /// written to `evaluator.output` when set.
    pub fn evaluate(&self) -> Result<ScoreBoard, TaskError> {
        let tok = self.load_tokenizer()?;
        let probe: EvaluatorConfig = self.create(Kind::Evaluator, "evaluator", None)?;
        let checkpoint = match probe.checkpoint.clone() {
            Some(c) => c,
            None => self
                .create_opt::<GeneratorConfig>(Kind::Generator, "generator", None)?
                .and_then(|g| g.checkpoint)
                .ok_or_else(|| missing("evaluator.checkpoint"))?,
        };
        let model = self.load_model(&tok, &checkpoint)?;
        let (ev, cfg) = self.evaluator(&tok, &*model)?.ok_or_else(|| missing("evaluator"))?;
        let board = ev.evaluate(&*model)?;
        if let Some(out) = &cfg.output {
            let text = serde_json::to_string_pretty(&board.to_json()).expect("score board serializes");
            io::write_bytes(out, format!("{text}\n").as_bytes())?;
        }
        Ok(board)
    }
}
