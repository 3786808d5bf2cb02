use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use neural_ilqr::experiment::{
    attach_deviation, report, run_baseline, run_neural, sweep, write_run, ExperimentConfig, RunOutput, SweepAxis,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "nilqr", version, about = "Trajectory optimization with learned dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: cartpole or vehicle.
    #[arg(long)]
    preset: Option<String>,
    /// First repeat seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Model-based solve with the nominal parameters, executed on the
    /// configured plant.
    Baseline(Common),
    /// Neural-model iLQR runs, one per repeat seed, compared with the baseline.
    Neural(Common),
    /// One set of neural runs per value of a config axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// filter-sigma, trials, architecture or inaccuracy.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Summarize every run under a directory.
    Report { dir: PathBuf },
    /// Print a preset config as TOML.
    InitConfig {
        #[arg(default_value = "cartpole")]
        preset: String,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut config = match (&common.config, &common.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name).with_context(|| format!("unknown preset {name:?}"))?,
        (None, None) => bail!("either --config or --preset is required"),
    };
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    if let Some(repeats) = common.repeats {
        config.repeats = repeats;
    }
    config.validate()?;
    let out = common
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&config.name));
    Ok((config, out))
}

fn summary(run: &RunOutput, dir: &Path) -> serde_json::Value {
    let m = &run.metrics;
    json!({
        "dir": dir,
        "method": run.manifest.method.as_str(),
        "seed": run.manifest.seed,
        "objective": m.best_objective,
        "success": m.success,
        "theta_error": m.theta_error,
        "d": m.d,
        "k": m.k,
        "iterations": m.iterations(),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Baseline(common) => {
            let (config, out) = load(&common)?;
            let run = run_baseline(&config)?;
            let dir = out.join("baseline");
            write_run(&dir, &run)?;
            println!("{}", summary(&run, &dir));
        }
        Command::Neural(common) => {
            let (config, out) = load(&common)?;
            let baseline = run_baseline(&config)?;
            write_run(&out.join("baseline"), &baseline)?;
            for seed in config.repeat_seeds() {
                let (mut run, _) = run_neural(&config.with_seed(seed))?;
                attach_deviation(&mut run, &baseline)?;
                let dir = out.join(format!("neural/seed-{seed}"));
                write_run(&dir, &run)?;
                println!("{}", summary(&run, &dir));
            }
        }
        Command::Sweep { common, axis, values } => {
            let (config, out) = load(&common)?;
            let axis: SweepAxis = axis.parse()?;
            let result = sweep(&config, axis, &values, Some(&out))?;
            print!("{}", result.summary_csv());
        }
        Command::Report { dir } => {
            let r = report(&dir)?;
            print!("{}", r.table);
        }
        Command::InitConfig { preset } => {
            let config = ExperimentConfig::preset(&preset).with_context(|| format!("unknown preset {preset:?}"))?;
            print!("{}", config.to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            eprintln!("{}", json!({ "error": e.to_string(), "causes": chain }));
            ExitCode::FAILURE
        }
    }
}
