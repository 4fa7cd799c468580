//! Plugin registry: `(kind, name)` to factory.
//!
//! Factories receive the config subtree minus `class` as a [`Section`] and
//! must consume every key they accept; whatever is left over after the
//! factory returns is reported as an unknown key.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::config::{ConfigError, Section, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Kind {
    Dataset,
    Sampler,
    Dataloader,
    Tokenizer,
    Model,
    Generator,
    Criterion,
    Search,
    Optimizer,
    RateScheduler,
    Trainer,
    Evaluator,
    Metric,
}

impl Kind {
    pub const ALL: [Kind; 13] = [
        Kind::Dataset,
        Kind::Sampler,
        Kind::Dataloader,
        Kind::Tokenizer,
        Kind::Model,
        Kind::Generator,
        Kind::Criterion,
        Kind::Search,
        Kind::Optimizer,
        Kind::RateScheduler,
        Kind::Trainer,
        Kind::Evaluator,
        Kind::Metric,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Dataset => "dataset",
            Kind::Sampler => "sampler",
            Kind::Dataloader => "dataloader",
            Kind::Tokenizer => "tokenizer",
            Kind::Model => "model",
            Kind::Generator => "generator",
            Kind::Criterion => "criterion",
            Kind::Search => "search",
            Kind::Optimizer => "optimizer",
            Kind::RateScheduler => "rate_scheduler",
            Kind::Trainer => "trainer",
            Kind::Evaluator => "evaluator",
            Kind::Metric => "metric",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("{kind} plugin `{name}` is already registered")]
    DuplicateRegistration { kind: Kind, name: String },
    #[error("invalid plugin name `{0}`")]
    InvalidName(String),
    #[error("no {kind} plugin named `{name}` (known: {known})")]
    UnknownPlugin { kind: Kind, name: String, known: String },
    #[error("registry is frozen; register plugins before the first create")]
    Frozen,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{kind} plugin `{name}` produced a value of an unexpected type")]
    WrongType { kind: Kind, name: String },
    #[error("building {kind} plugin `{name}`: {msg}")]
    Build { kind: Kind, name: String, msg: String },
}

/// Values available to every factory besides its own subtree.
#[derive(Debug, Clone, Default)]
pub struct BuildContext {
    /// Global run seed; factories derive their own sub-seed from it.
    pub seed: u64,
    /// Vocabulary size of the loaded tokenizer, when there is one.
    pub vocab_size: Option<usize>,
}

pub type Instance = Box<dyn Any + Send>;

/// Factory failure: either a config problem or anything else, as text.
#[derive(Debug)]
pub enum FactoryError {
    Config(ConfigError),
    Other(String),
}

impl From<ConfigError> for FactoryError {
    fn from(e: ConfigError) -> Self {
        FactoryError::Config(e)
    }
}

impl From<RegistryError> for FactoryError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::Config(c) => FactoryError::Config(c),
            other => FactoryError::Other(other.to_string()),
        }
    }
}

pub type Factory =
    Arc<dyn Fn(&Registry, &Section<'_>, &BuildContext) -> Result<Instance, FactoryError> + Send + Sync>;

#[derive(Default)]
pub struct Registry {
    entries: BTreeMap<(Kind, String), Factory>,
    frozen: AtomicBool,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("entries", &self.entries.keys().collect::<Vec<_>>())
            .field("frozen", &self.is_frozen())
            .finish()
    }
}

fn valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, kind: Kind, name: &str, factory: F) -> Result<(), RegistryError>
    where
        F: Fn(&Registry, &Section<'_>, &BuildContext) -> Result<Instance, FactoryError> + Send + Sync + 'static,
    {
        if self.is_frozen() {
            return Err(RegistryError::Frozen);
        }
        if !valid_name(name) {
            return Err(RegistryError::InvalidName(name.to_string()));
        }
        let key = (kind, name.to_string());
        if self.entries.contains_key(&key) {
            return Err(RegistryError::DuplicateRegistration {
                kind,
                name: name.to_string(),
            });
        }
        self.entries.insert(key, Arc::new(factory));
        Ok(())
    }

    pub fn list_registered(&self, kind: Kind) -> BTreeSet<String> {
        self.entries
            .keys()
            .filter(|(k, _)| *k == kind)
            .map(|(_, n)| n.clone())
            .collect()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.load(Ordering::Acquire)
    }

    /// Instantiates the plugin named by `value.class` and downcasts it to `T`.
    pub fn create<T: 'static>(&self, kind: Kind, path: &str, value: &Value, ctx: &BuildContext) -> Result<T, RegistryError> {
        self.frozen.store(true, Ordering::Release);
        let section = Section::new(path, value)?;
        let name = section.req_str("class")?;
        let factory = self.entries.get(&(kind, name.to_string())).ok_or_else(|| {
            let known: Vec<String> = self.list_registered(kind).into_iter().collect();
            RegistryError::UnknownPlugin {
                kind,
                name: name.to_string(),
                known: known.join(", "),
            }
        })?;
        let instance = factory(self, &section, ctx).map_err(|e| match e {
            FactoryError::Config(c) => RegistryError::Config(c),
            FactoryError::Other(msg) => RegistryError::Build {
                kind,
                name: name.to_string(),
                msg,
            },
        })?;
        section.finish()?;
        instance
            .downcast::<T>()
            .map(|b| *b)
            .map_err(|_| RegistryError::WrongType {
                kind,
                name: name.to_string(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse;

    #[derive(Debug, PartialEq)]
    struct Seeded(u64);

    fn seeded(_: &Registry, s: &Section<'_>, _: &BuildContext) -> Result<Instance, FactoryError> {
        Ok(Box::new(Seeded(s.opt_u64("seed")?.unwrap_or(0))))
    }

    #[test]
    fn register_then_create_round_trips() {
        let mut r = Registry::new();
        r.register(Kind::Sampler, "shuffle", seeded).unwrap();
        let v = parse("class: shuffle\nseed: 7").unwrap();
        let s: Seeded = r.create(Kind::Sampler, "sampler", &v, &BuildContext::default()).unwrap();
        assert_eq!(s, Seeded(7));
    }

    #[test]
    fn duplicate_registration_fails() {
        let mut r = Registry::new();
        r.register(Kind::Metric, "bleu", seeded).unwrap();
        assert!(matches!(
            r.register(Kind::Metric, "bleu", seeded),
            Err(RegistryError::DuplicateRegistration { .. })
        ));
        // same name under another kind is fine
        r.register(Kind::Sampler, "bleu", seeded).unwrap();
    }

    #[test]
    fn list_is_exact_set_per_kind() {
        let mut r = Registry::new();
        for k in Kind::ALL {
            assert!(r.list_registered(k).is_empty());
        }
        r.register(Kind::Metric, "bleu", seeded).unwrap();
        r.register(Kind::Metric, "acc", seeded).unwrap();
        r.register(Kind::Metric, "f1", seeded).unwrap();
        let names: Vec<_> = r.list_registered(Kind::Metric).into_iter().collect();
        assert_eq!(names, ["acc", "bleu", "f1"]);
        assert!(r.list_registered(Kind::Model).is_empty());
    }

    #[test]
    fn unknown_plugin_and_typo_keys_are_errors() {
        let mut r = Registry::new();
        r.register(Kind::Sampler, "shuffle", seeded).unwrap();
        let ctx = BuildContext::default();
        let e = r.create::<Seeded>(Kind::Sampler, "sampler", &parse("class: nope").unwrap(), &ctx);
        assert!(matches!(e, Err(RegistryError::UnknownPlugin { .. })));
        let e = r.create::<Seeded>(Kind::Sampler, "sampler", &parse("class: shuffle\nsed: 7").unwrap(), &ctx);
        assert!(matches!(e, Err(RegistryError::Config(ConfigError::UnknownKey(ref k))) if k == "sampler.sed"));
    }

    #[test]
    fn registry_freezes_after_first_create() {
        let mut r = Registry::new();
        r.register(Kind::Sampler, "shuffle", seeded).unwrap();
        let _ = r.create::<Seeded>(Kind::Sampler, "s", &parse("class: shuffle").unwrap(), &BuildContext::default());
        assert!(matches!(r.register(Kind::Metric, "x", seeded), Err(RegistryError::Frozen)));
    }

    #[test]
    fn wrong_downcast_is_reported() {
        let mut r = Registry::new();
        r.register(Kind::Sampler, "shuffle", seeded).unwrap();
        let e = r.create::<String>(Kind::Sampler, "s", &parse("class: shuffle").unwrap(), &BuildContext::default());
        assert!(matches!(e, Err(RegistryError::WrongType { .. })));
    }

    #[test]
    fn names_must_be_identifiers() {
        let mut r = Registry::new();
        assert!(matches!(r.register(Kind::Metric, "", seeded), Err(RegistryError::InvalidName(_))));
        assert!(matches!(r.register(Kind::Metric, "a b", seeded), Err(RegistryError::InvalidName(_))));
    }
}
