//! `smoothcert` command line: every experiment is one subcommand reading a
//! resolved [`config::ExperimentConfig`] and writing `<command>.report.json`,
//! `<command>.csv` and `<command>.config.json` into the output directory.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use commands::{AttackMethod, Outcome, SweepTarget};
use output::ConfigError;

#[derive(Debug, Parser)]
#[command(name = "smoothcert", version, about = "Adversarial training, adaptive batch norm and randomized-smoothing certification at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON config merged over the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config leaf by dotted path, e.g. `adapt.rho=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset and its train / test split.
    GenData,
    /// Train the reference network; writes best and last checkpoints.
    Train,
    /// Accuracy under Gaussian input noise, with and without adaptation.
    EvalNoise,
    /// PGD / FGSM robustness of a checkpoint.
    Attack {
        /// Attack through an expectation over this many models.
        #[arg(long = "eot-m")]
        eot_m: Option<usize>,
    },
    /// Randomized-smoothing certification of the test split.
    Certify {
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        n: Option<u64>,
    },
    /// Errors under synthetic corruptions, with mCE / rmCE against a reference.
    CorruptEval,
    /// Loss-gradient maps of test images as PGM files.
    GradMap,
    /// Repeat a subcommand over values of one config path.
    Sweep {
        #[arg(long)]
        param: String,
        /// Comma-separated values, each parsed as JSON when possible.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Subcommand to repeat.
        #[arg(long, default_value = "eval-noise")]
        command: String,
    },
}

impl Command {
    fn overrides(&self) -> Vec<(String, Value)> {
        match self {
            Command::Attack { eot_m: Some(m) } => vec![("attack.eot_m".into(), json!(m))],
            Command::Certify { sigma, rho, n } => {
                let mut out = Vec::new();
                if let Some(s) = sigma {
                    out.push(("smoothing.sigma".into(), json!(s)));
                }
                if let Some(r) = rho {
                    out.push(("adapt.rho".into(), json!(r)));
                }
                if let Some(n) = n {
                    out.push(("smoothing.n".into(), json!(n)));
                }
                out
            }
            _ => Vec::new(),
        }
    }
}

fn parse_target(name: &str) -> Result<SweepTarget> {
    Ok(match name {
        "gen-data" => SweepTarget::GenData,
        "train" => SweepTarget::Train,
        "eval-noise" => SweepTarget::EvalNoise,
        "attack" => SweepTarget::Attack(AttackMethod::Pgd),
        "attack-eot" => SweepTarget::Attack(AttackMethod::Eot),
        "certify" => SweepTarget::Certify,
        "corrupt-eval" => SweepTarget::CorruptEval,
        "grad-map" => SweepTarget::GradMap,
        other => return Err(anyhow::anyhow!("sweep cannot repeat {other:?}")).context(ConfigError),
    })
}

/// Resolves the configuration for `cli`: defaults, `--config`, `--set`
/// (in order), then the dedicated flags.
pub fn resolve_config(cli: &Cli) -> Result<config::ExperimentConfig> {
    let mut overrides = Vec::new();
    for raw in &cli.common.set {
        overrides.push(config::parse_assignment(raw).context(ConfigError)?);
    }
    if let Some(seed) = cli.common.seed {
        overrides.push(("seed".into(), json!(seed)));
    }
    if let Some(out) = &cli.common.out {
        overrides.push(("output_dir".into(), json!(out)));
    }
    overrides.extend(cli.command.overrides());
    config::resolve(cli.common.config.as_deref(), &overrides).context(ConfigError)
}

/// Caps rayon's global pool at `SMOOTHCERT_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("SMOOTHCERT_THREADS") {
        let n: usize = raw.trim().parse().with_context(|| format!("SMOOTHCERT_THREADS={raw:?} is not a count")).context(ConfigError)?;
        // A pool already built by an earlier call is left as is.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    configure_threads()?;
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::GenData => commands::run_target(SweepTarget::GenData, &cfg),
        Command::Train => commands::run_target(SweepTarget::Train, &cfg),
        Command::EvalNoise => commands::run_target(SweepTarget::EvalNoise, &cfg),
        Command::Attack { eot_m } => {
            let method = if eot_m.is_some() { AttackMethod::Eot } else { AttackMethod::Pgd };
            commands::run_target(SweepTarget::Attack(method), &cfg)
        }
        Command::Certify { .. } => commands::run_target(SweepTarget::Certify, &cfg),
        Command::CorruptEval => commands::run_target(SweepTarget::CorruptEval, &cfg),
        Command::GradMap => commands::run_target(SweepTarget::GradMap, &cfg),
        Command::Sweep { param, values, command } => {
            let target = parse_target(command)?;
            let values: Vec<Value> = values.iter().map(|v| serde_json::from_str(v).unwrap_or_else(|_| json!(v))).collect();
            commands::run_sweep(&cfg, target, param, &values)
        }
    }
}
