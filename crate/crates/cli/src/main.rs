//! `planlens`: dataset generation, training, evaluation and the analysis stages.

mod config;
mod manifest;
mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use planlens::blocksworld::{Level, Split};
use planlens::textgen::Vocab;

use config::{RunConfig, ENV_RUN_ROOT};
use manifest::RunManifest;
use stages::{Ctx, EvalFilter};

const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing input {}: run `{stage}` first", path.display())]
    Missing { stage: &'static str, path: PathBuf },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Failed(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Missing { .. } => 2,
            CliError::Failed(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "planlens",
    version,
    about = "Blocksworld planning transformer and its analyses"
)]
struct Cli {
    /// Run directory (default: $PLANLENS_RUN_ROOT, else runs/default).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the blocksworld dataset.
    GenData {
        /// Block counts, e.g. 4,5,6.
        #[arg(long)]
        colors: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the model on the train split.
    Train {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score the model and select the analysis set.
    Eval {
        #[arg(long)]
        level: Option<String>,
        #[arg(long)]
        colors: Option<usize>,
        /// train or test.
        #[arg(long)]
        split: Option<String>,
    },
    /// Extraction rate of the decision embedding per layer and component.
    ExtractRate,
    /// Attention saliency flow into the decision position.
    InfoFlow,
    /// Probe the current block state.
    ProbeState,
    /// Probe future decisions.
    ProbeFuture,
    /// Mask history and measure the effect on the gold decision.
    Intervene,
    /// Every stage after training, then figures and the summary.
    ReportAll {
        /// Seed for analysis-set selection and probes.
        #[arg(long)]
        seed: Option<u64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::ExtractRate => "extract-rate",
            Command::InfoFlow => "info-flow",
            Command::ProbeState => "probe-state",
            Command::ProbeFuture => "probe-future",
            Command::Intervene => "intervene",
            Command::ReportAll { .. } => "report-all",
        }
    }
}

fn run_dir(cli: &Cli) -> PathBuf {
    cli.run_dir
        .clone()
        .or_else(|| std::env::var_os(ENV_RUN_ROOT).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs/default"))
}

/// Defaults, then the run's saved config, the `--config` file, the
/// environment, `--set` overrides and finally subcommand flags.
fn load_config(cli: &Cli, run: &Path) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    let saved = run.join(CONFIG_FILE);
    if saved.exists() {
        let text = std::fs::read_to_string(&saved).map_err(|e| CliError::io(&saved, e))?;
        cfg.apply_file(&text)?;
    }
    if let Some(p) = &cli.config {
        let text = std::fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        cfg.apply_file(&text)?;
    }
    cfg.apply_env()?;
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("`--set {kv}`: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    match &cli.command {
        Command::GenData { colors, seed } => {
            if let Some(c) = colors {
                cfg.set("colors", c)?;
            }
            if let Some(s) = seed {
                cfg.gen.seed = *s;
            }
        }
        Command::Train { seed: Some(s) } => cfg.train.seed = *s,
        Command::ReportAll { seed: Some(s) } => {
            cfg.analysis.seed = *s;
            cfg.probe.seed = *s;
        }
        _ => {}
    }
    Ok(cfg)
}

fn eval_filter(
    level: &Option<String>,
    colors: Option<usize>,
    split: &Option<String>,
) -> Result<EvalFilter, CliError> {
    let level = match level {
        Some(l) => {
            Some(Level::parse(l).ok_or_else(|| CliError::Config(format!("unknown level `{l}`")))?)
        }
        None => None,
    };
    let split = match split.as_deref() {
        None => None,
        Some("train") => Some(Split::Train),
        Some("test") => Some(Split::Test),
        Some(s) => {
            return Err(CliError::Config(format!(
                "split must be train or test, got `{s}`"
            )))
        }
    };
    if let Some(c) = colors {
        if !(4..=6).contains(&c) {
            return Err(CliError::Config(format!(
                "colors must be 4, 5 or 6, got {c}"
            )));
        }
    }
    Ok(EvalFilter {
        level,
        colors,
        split,
    })
}

fn stage(
    ctx: &Ctx,
    name: &str,
    f: impl FnOnce(&Ctx) -> Result<Vec<PathBuf>, CliError>,
) -> Result<(), CliError> {
    let started = manifest::now();
    let t = std::time::Instant::now();
    let outputs = f(ctx)?;
    let mut m = RunManifest::load(&ctx.run)?;
    m.record(&ctx.run, name, &ctx.cfg, &outputs, started)?;
    eprintln!(
        "{name}: wrote {} files in {}",
        outputs.len(),
        stages::elapsed(t)
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let run = run_dir(&cli);
    let cfg = load_config(&cli, &run)?;
    if cfg.threads == 0 {
        return Err(CliError::Config("threads must be at least 1".into()));
    }
    std::fs::create_dir_all(&run).map_err(|e| CliError::io(&run, e))?;
    let saved = run.join(CONFIG_FILE);
    std::fs::write(&saved, cfg.to_file_contents()).map_err(|e| CliError::io(&saved, e))?;
    let ctx = Ctx {
        run,
        cfg,
        vocab: Vocab::new(),
    };
    match &cli.command {
        Command::GenData { .. } => stage(&ctx, "gen-data", stages::gen_data),
        Command::Train { .. } => stage(&ctx, "train", stages::train),
        Command::Eval {
            level,
            colors,
            split,
        } => {
            let filter = eval_filter(level, *colors, split)?;
            stage(&ctx, "eval", |c| stages::eval(c, &filter))
        }
        Command::ExtractRate => stage(&ctx, "extract-rate", stages::extract_rate),
        Command::InfoFlow => stage(&ctx, "info-flow", stages::info_flow),
        Command::ProbeState => stage(&ctx, "probe-state", stages::probe_state),
        Command::ProbeFuture => stage(&ctx, "probe-future", stages::probe_future),
        Command::Intervene => stage(&ctx, "intervene", stages::intervene),
        Command::ReportAll { .. } => {
            ctx.model()?;
            ctx.dataset()?;
            stage(&ctx, "eval", |c| stages::eval(c, &EvalFilter::default()))?;
            stage(&ctx, "extract-rate", stages::extract_rate)?;
            stage(&ctx, "info-flow", stages::info_flow)?;
            stage(&ctx, "probe-state", stages::probe_state)?;
            stage(&ctx, "probe-future", stages::probe_future)?;
            stage(&ctx, "intervene", stages::intervene)?;
            stage(&ctx, "report-all", stages::summarize)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("planlens {name}: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
