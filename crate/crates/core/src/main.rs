use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gossipwatch::experiment::{self, ExperimentConfig, ExperimentError};

#[derive(Parser)]
#[command(
    name = "gossipwatch",
    version,
    about = "Simulate P2P attacks and detect them with LSTM forecasters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory; defaults to the config's out_dir, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write traces.csv, discovery.csv and manifest.json.
    Simulate(Common),
    /// Clean, bin or tokenize, split and fit the scaler or vocabulary.
    Prepare(Common),
    /// Train the forecaster; writes checkpoint.json and history.csv.
    Train(Common),
    /// Score evaluation windows; writes verdicts.jsonl and predictions.csv.
    Detect(Common),
    /// Write report.md and report.csv.
    Evaluate(Common),
    /// Run every stage for a named preset (a --config file replaces the preset).
    RunExperiment {
        /// One of the preset names, see `list-presets`.
        preset: String,
        #[command(flatten)]
        common: Common,
    },
    /// Print preset names.
    ListPresets,
    /// Print a preset's full config as JSON.
    ShowPreset { preset: String },
}

enum Failure {
    Config(anyhow::Error),
    Stage(anyhow::Error),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_config_error() {
            Failure::Config(e.into())
        } else {
            Failure::Stage(e.into())
        }
    }
}

fn load_config(common: &Common, preset: Option<&str>) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let mut config = match (&common.config, preset) {
        (Some(path), _) => ExperimentConfig::load(path)
            .with_context(|| format!("loading {}", path.display()))
            .map_err(Failure::Config)?,
        (None, Some(name)) => experiment::experiment_preset(name)?,
        (None, None) => return Err(Failure::Config(anyhow::anyhow!("--config is required"))),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    let out = common
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((config, out))
}

fn report<T: serde::Serialize>(stage: &str, out: &Path, summary: &T) {
    let json = serde_json::to_string(summary).unwrap_or_default();
    eprintln!("{stage} -> {}: {json}", out.display());
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(c) => {
            let (config, out) = load_config(&c, None)?;
            report("simulate", &out, &experiment::cmd_simulate(&config, &out)?);
        }
        Command::Prepare(c) => {
            let (config, out) = load_config(&c, None)?;
            report("prepare", &out, &experiment::cmd_prepare(&config, &out)?);
        }
        Command::Train(c) => {
            let (config, out) = load_config(&c, None)?;
            report("train", &out, &experiment::cmd_train(&config, &out)?);
        }
        Command::Detect(c) => {
            let (config, out) = load_config(&c, None)?;
            report("detect", &out, &experiment::cmd_detect(&config, &out)?);
        }
        Command::Evaluate(c) => {
            let (config, out) = load_config(&c, None)?;
            report("evaluate", &out, &experiment::cmd_evaluate(&config, &out)?);
        }
        Command::RunExperiment { preset, common } => {
            let (config, out) = load_config(&common, Some(&preset))?;
            let summary = experiment::run_experiment(&config, &out)?;
            report("run-experiment", &out, &summary);
            let md = std::fs::read_to_string(out.join(experiment::REPORT_MD_FILE))
                .context("reading report")
                .map_err(Failure::Stage)?;
            println!("{md}");
        }
        Command::ListPresets => {
            for name in experiment::PRESET_NAMES {
                println!("{name}");
            }
        }
        Command::ShowPreset { preset } => {
            println!("{}", experiment::experiment_preset(&preset)?.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
