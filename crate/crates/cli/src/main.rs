//! `forget`: train, unlearn, evaluate and audit implicit-feedback ALS models.

mod artifacts;
mod commands;
mod config;
mod error;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Ctx;
use crate::config::{set_key, DataFormat, ExperimentConfig, SolverName};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "forget", version, about = "Exact unlearning for ALS recommenders")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML experiment configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base seed; every named seed not pinned in the config derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Must not exist yet (except for `audit --resume`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Single-threaded, deterministic execution.
    #[arg(long, global = true)]
    sequential: bool,
    #[arg(long, global = true, value_enum)]
    format: Option<DataFormat>,
    /// Ratings file.
    #[arg(long, global = true, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Override any config value, e.g. `--set model.k=16`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct RemovalArgs {
    /// Fraction of training positives to remove, sampled with the removal seed.
    #[arg(long, conflicts_with = "coords")]
    fraction: Option<f64>,
    /// File of `user<TAB>item` dense indices to remove.
    #[arg(long, value_name = "FILE")]
    coords: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse, binarize and split a dataset; write the split and id maps.
    Ingest,
    /// Train a model on the training split.
    Train,
    /// Train from scratch on the training split minus a removal set.
    Retrain(RemovalArgs),
    /// Unlearn a removal set from a trained model.
    Untrain {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long)]
        passes: Option<usize>,
        #[arg(long, value_enum)]
        solver: Option<SolverName>,
        #[command(flatten)]
        removal: RemovalArgs,
    },
    /// Held-out AUC of one model, or a convergence sweep with `--sweep`.
    Eval {
        #[arg(long, value_name = "FILE", required_unless_present = "sweep")]
        model: Option<PathBuf>,
        #[arg(long, conflicts_with = "model")]
        sweep: bool,
        /// `retrain` or `untrain`.
        #[arg(long, requires = "sweep")]
        mode: Option<String>,
    },
    /// Membership-inference vulnerability sweep.
    Audit {
        /// Continue in an existing output directory, skipping finished cells.
        #[arg(long)]
        resume: bool,
    },
    /// Direct versus downdate pass timings over a grid of ranks.
    Bench,
    /// Print the effective configuration as TOML.
    Config,
}

fn value<T: serde::Serialize>(v: T) -> CliResult<toml::Value> {
    toml::Value::try_from(v).map_err(|e| CliError::config(e.to_string()))
}

fn parse_set(raw: &str) -> CliResult<(String, String, toml::Value)> {
    let bad = || CliError::config(format!("--set expects SECTION.KEY=VALUE, got {raw:?}"));
    let (path, val) = raw.split_once('=').ok_or_else(bad)?;
    let (section, key) = path.trim().split_once('.').ok_or_else(bad)?;
    Ok((section.to_string(), key.to_string(), config::literal(val.trim())))
}

/// File, then environment, then flags.
fn resolve(cli: &Cli) -> CliResult<ExperimentConfig> {
    let g = &cli.global;
    let mut table = match &g.config {
        Some(p) => config::read_table(p)?,
        None => toml::Table::new(),
    };
    config::apply_env(&mut table, std::env::vars())?;

    let mut flags: Vec<(&str, &str, toml::Value)> = Vec::new();
    if let Some(s) = g.seed {
        let s = i64::try_from(s).map_err(|_| CliError::config(format!("seed {s} exceeds the TOML integer range")))?;
        flags.push(("seeds", "base", toml::Value::Integer(s)));
    }
    if let Some(f) = g.format {
        flags.push(("data", "format", value(f)?));
    }
    if let Some(p) = &g.data {
        flags.push(("data", "path", value(p)?));
    }
    let removal = match &cli.command {
        Command::Retrain(r) => Some(r),
        Command::Untrain { removal, .. } => Some(removal),
        _ => None,
    };
    if let Some(r) = removal {
        if let Some(f) = r.fraction {
            flags.push(("unlearn", "fraction", toml::Value::Float(f)));
        }
        if let Some(p) = &r.coords {
            flags.push(("unlearn", "coords", value(p)?));
        }
    }
    if let Command::Untrain { passes, solver, .. } = &cli.command {
        if let Some(p) = passes {
            flags.push(("unlearn", "passes", value(*p as i64)?));
        }
        if let Some(s) = solver {
            flags.push(("unlearn", "solver", value(s)?));
        }
    }
    if let Command::Eval { mode: Some(m), .. } = &cli.command {
        flags.push(("sweep", "mode", toml::Value::String(m.clone())));
    }
    for (section, key, v) in flags {
        set_key(&mut table, section, key, v)?;
    }
    for raw in &g.set {
        let (section, key, v) = parse_set(raw)?;
        set_key(&mut table, &section, &key, v)?;
    }
    let cfg = ExperimentConfig::from_table(table)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve(&cli)?;
    if cli.global.sequential {
        // rayon is used inside the core too; pin it to one worker
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| CliError::new("internal", e.to_string()))?;
    }
    let ctx = Ctx {
        cfg,
        sequential: cli.global.sequential,
        out: cli.global.out.clone(),
    };
    match &cli.command {
        Command::Ingest => commands::ingest(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Retrain(_) => commands::retrain(&ctx),
        Command::Untrain { model, .. } => commands::untrain(&ctx, model),
        Command::Eval { model: Some(m), .. } => commands::eval_model(&ctx, m),
        Command::Eval { .. } => commands::eval_sweep(&ctx),
        Command::Audit { resume } => commands::audit(&ctx, *resume),
        Command::Bench => commands::bench(&ctx),
        Command::Config => {
            print!("{}", ctx.cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(if e.kind == "partial" { 3 } else { 1 })
        }
    }
}
