//! Command-line front end: parses arguments, loads and overrides the config,
//! and dispatches to a subcommand.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use pgen::config;
use pgen::task::{load_config, Task, TaskError};

#[derive(Debug, Parser)]
#[command(name = "pgen", version, about = "Train and decode sequence generation models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Run configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config value, `key.path=value`; repeatable, last one wins.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Print the merged config and exit without running.
    #[arg(long, global = true)]
    pub dump_config: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Learn BPE merges and the vocabulary.
    Preprocess,
    /// Train the model, saving checkpoints at eval points.
    Train,
    /// Decode the generator input to the output file.
    Generate,
    /// Score a checkpoint on the evaluator datasets.
    Evaluate,
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<(), TaskError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| config::ConfigError::Missing("--config".into()))?;
    let root = load_config(path, &cli.overrides)?;
    let task = Task::new(root)?;
    if cli.dump_config {
        let _ = write!(out, "{}", config::to_text(task.root()));
        return Ok(());
    }
    match cli.command {
        Command::Preprocess => {
            let tok = task.preprocess()?;
            let _ = writeln!(out, "{}", serde_json::json!({"merges": tok.bpe.merges().len(), "vocab_size": tok.vocab.len()}));
        }
        Command::Train => {
            let o = task.train()?;
            let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
            let summary = serde_json::json!({
                "steps": o.steps,
                "stop": format!("{:?}", o.stop),
                "best_step": o.best_step,
                "best_score": o.best_score,
                "best": path(&o.best),
                "best_avg": path(&o.best_avg),
            });
            let _ = writeln!(out, "{summary}");
        }
        Command::Generate => {
            let lines = task.generate()?;
            let _ = writeln!(out, "{}", serde_json::json!({"lines": lines.len()}));
        }
        Command::Evaluate => {
            let board = task.evaluate()?;
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&board.to_json()).expect("serializable"));
        }
    }
    Ok(())
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code: 0 on success, 1 on a runtime failure, 2 on a config error.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match dispatch(&cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
