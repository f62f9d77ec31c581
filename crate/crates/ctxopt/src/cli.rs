//! Operator entry points. Exit codes: 0 success, 1 runtime failure, 2 usage
//! error, 3 configuration/input error. Failures print one machine-parseable
//! line to stderr: `error[<kind>]: <message>`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::execution::load_pool;
use crate::metrics::metrics_record;
use crate::mutation::format_edit;
use crate::playbook::{diff, Playbook};
use crate::replay::ReplayBuffer;
use crate::ruleworld::ScriptedAgent;
use crate::state::StateDoc;
use crate::trainer::{
    evaluate_playbook, load_run_matrix, Backends, EvalRecord, TrainError, Trainer,
};

#[derive(Parser)]
#[command(
    name = "ctxopt",
    version,
    about = "Optimize an agent playbook through execute-reflect-mutate loops"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Run a training loop and write run artifacts
    Train {
        /// Run config file (key = value). Optional when resuming.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory to write artifacts into
        #[arg(long)]
        out: PathBuf,
        /// Override the config's RNG seed
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint directory (e.g. run/checkpoints/iter_0005)
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a playbook on a task pool and print the pass rate
    Eval {
        playbook: PathBuf,
        pool: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize one checkpoint directory
    Inspect { checkpoint: PathBuf },
    /// Render the training-dynamics table for a run directory
    Metrics { run: PathBuf },
    /// Show the edits that turn playbook A into playbook B
    Diff { a: PathBuf, b: PathBuf },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => 3,
            Failure::Runtime(_) => 1,
        }
    }
    fn kind(&self) -> &'static str {
        match self {
            Failure::Config(_) => "config",
            Failure::Runtime(_) => "runtime",
        }
    }
    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn classify_train_error(e: TrainError) -> Failure {
    match e {
        TrainError::Playbook(_)
        | TrainError::Pool(_)
        | TrainError::Overlap(_)
        | TrainError::Invalid(_)
        | TrainError::Resume { .. } => Failure::Config(e.to_string()),
        TrainError::Io { .. } | TrainError::Serde(_) => Failure::Runtime(e.to_string()),
    }
}

/// Run a parsed command, returning the process exit status.
pub fn dispatch(cli: Cli) -> i32 {
    match run(cli.command) {
        Ok(()) => 0,
        Err(failure) => {
            eprintln!("error[{}]: {}", failure.kind(), failure.message());
            failure.code()
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train {
            config,
            out,
            seed,
            resume,
        } => cmd_train(config, out, seed, resume),
        Command::Eval {
            playbook,
            pool,
            seed,
        } => cmd_eval(&playbook, &pool, seed),
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint),
        Command::Metrics { run } => cmd_metrics(&run),
        Command::Diff { a, b } => cmd_diff(&a, &b),
    }
}

fn cmd_train(
    config_path: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    resume: Option<PathBuf>,
) -> Result<(), Failure> {
    let config_path = match (&config_path, &resume) {
        (Some(p), _) => p.clone(),
        (None, Some(ckpt)) => {
            // fall back to the resolved config of the run being resumed
            ckpt.parent()
                .and_then(|p| p.parent())
                .map(|p| p.join("config.resolved.txt"))
                .ok_or_else(|| {
                    Failure::Config("cannot locate config.resolved.txt near --resume".into())
                })?
        }
        (None, None) => {
            return Err(Failure::Config(
                "--config is required unless --resume is given".into(),
            ))
        }
    };
    let mut config = RunConfig::from_file(&config_path).map_err(config_err)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let config = config.resolve();

    let pool_path = config
        .pool
        .clone()
        .ok_or_else(|| Failure::Config("config must set 'pool'".into()))?;
    let eval_path = config
        .eval_set
        .clone()
        .ok_or_else(|| Failure::Config("config must set 'eval_set'".into()))?;
    let pool = load_pool(&pool_path).map_err(config_err)?;
    let eval_set = load_pool(&eval_path).map_err(config_err)?;
    let backends = Backends::from_config(&config).map_err(classify_train_error)?;
    let trainer =
        Trainer::new(config, pool, eval_set, backends).map_err(classify_train_error)?;

    let mut stderr = std::io::stderr();
    let output = trainer
        .train(&out, resume.as_deref(), Some(&mut stderr))
        .map_err(classify_train_error)?;
    let final_score = output.eval_scores.last().map(|(_, s)| *s).unwrap_or(0.0);
    println!(
        "run complete: {} iterations, final eval {:.3}, artifacts in {}",
        output.eval_scores.len().saturating_sub(1),
        final_score,
        output.run_dir.display()
    );
    Ok(())
}

fn cmd_eval(playbook_path: &Path, pool_path: &Path, seed: u64) -> Result<(), Failure> {
    let playbook = Playbook::load(playbook_path).map_err(config_err)?;
    let pool = load_pool(pool_path).map_err(config_err)?;
    if pool.is_empty() {
        return Err(Failure::Config("task pool is empty".into()));
    }
    let record = evaluate_playbook(&ScriptedAgent, &playbook, &pool, seed, 0);
    println!("{:.3}", record.score);
    Ok(())
}

fn cmd_inspect(checkpoint: &Path) -> Result<(), Failure> {
    let playbook = Playbook::load(&checkpoint.join("playbook.json")).map_err(config_err)?;
    let buffer: ReplayBuffer =
        read_json(&checkpoint.join("buffer.json")).map_err(Failure::Config)?;
    let state: StateDoc = read_json(&checkpoint.join("state.json")).map_err(Failure::Config)?;
    let eval: EvalRecord = read_json(&checkpoint.join("eval.json")).map_err(Failure::Config)?;

    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    let _ = writeln!(w, "checkpoint: {}", checkpoint.display());
    let _ = writeln!(
        w,
        "playbook: version {}, {} entries across {} sections",
        playbook.version,
        playbook.entry_count(),
        playbook.sections.len()
    );
    let _ = writeln!(w, "eval: {:.3} ({} tasks)", eval.score, eval.solved.len());
    let _ = writeln!(
        w,
        "replay buffer: {} members (n_grad={}, n_evict={})",
        buffer.len(),
        buffer.n_grad,
        buffer.n_evict
    );
    let _ = writeln!(
        w,
        "optimizer state: iteration {}, phase {:?}, {} ledger records, {} open hypotheses",
        state.iteration,
        state.phase,
        state.change_ledger.len(),
        state.open_hypotheses.len()
    );
    let _ = writeln!(w, "\n{}", playbook.render());
    Ok(())
}

fn cmd_metrics(run: &Path) -> Result<(), Failure> {
    let matrix = load_run_matrix(run).map_err(classify_train_error)?;
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    let _ = writeln!(
        w,
        "{:>10} {:>9} {:>10} {:>11} {:>9} {:>10} {:>9}",
        "checkpoint", "current", "recent_w5", "recent_w10", "envelope", "active_w5", "stale_w5"
    );
    for t in 0..matrix.n_checkpoints() {
        let r = metrics_record(&matrix, t);
        let _ = writeln!(
            w,
            "{:>10} {:>9.4} {:>10.4} {:>11.4} {:>9.4} {:>10.4} {:>9.4}",
            r.checkpoint, r.current, r.recent_w5, r.recent_w10, r.envelope, r.active_w5, r.stale_w5
        );
    }
    let stats = matrix.summary_stats(5);
    let first = stats
        .first_all_solved
        .map(|t| t.to_string())
        .unwrap_or_else(|| "never".into());
    let _ = writeln!(
        w,
        "summary: first_all_solved={first} max_rate={:.4} mean_active_instability_w5={:.4} pct_relearned={:.4}",
        stats.max_rate, stats.mean_active_instability, stats.pct_relearned
    );
    Ok(())
}

fn cmd_diff(a: &Path, b: &Path) -> Result<(), Failure> {
    let pa = Playbook::load(a).map_err(config_err)?;
    let pb = Playbook::load(b).map_err(config_err)?;
    let edits = diff(&pa, &pb);
    if edits.is_empty() {
        println!("playbooks are content-identical");
        return Ok(());
    }
    for edit in &edits {
        println!("{}", format_edit(edit));
    }
    Ok(())
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("malformed {}: {e}", path.display()))
}
