//! `ltlab`: run, sweep, re-evaluate and convert long-tailed classification
//! experiments.
//!
//! Exit codes: 0 on success, 1 for configuration or usage errors, 2 when a
//! run fails (including divergence).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ltlab::experiment::{
    build_data, convert_predictions, evaluate_model, run_experiment, run_sweep, ExperimentConfig,
    Overrides, SweepConfig, SWEEP_FILE,
};
use ltlab::losses::{ClassCounts, LossKind};
use ltlab::sampling::SamplerKind;
use ltlab::training::load_checkpoint;

const OUT_ROOT_ENV: &str = "LTLAB_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "ltlab",
    version,
    about = "Long-tailed classification experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one experiment.
    Run(RunArgs),
    /// Run every loss x imbalance factor x seed cell and write sweep.csv.
    Sweep(RunArgs),
    /// Re-evaluate a saved checkpoint on the config's test set.
    Eval(EvalArgs),
    /// Convert training-prior posteriors in a CSV file to balanced posteriors.
    Convert(ConvertArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Defaults to the config's `output_dir`, then
    /// `$LTLAB_OUT_ROOT/<name>`, then `runs/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    sampler: Option<SamplerKind>,
    /// Imbalance factor of a synthetic dataset.
    #[arg(long = "if", value_name = "IF")]
    imbalance_factor: Option<f64>,
    /// Default output root.
    #[arg(long, env = OUT_ROOT_ENV, hide_env_values = true)]
    out_root: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the evaluation report as `eval.json` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    /// Predictions file: one row of class scores per sample.
    #[arg(long)]
    input: PathBuf,
    /// Training class counts, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    counts: Vec<u64>,
    #[arg(long)]
    output: PathBuf,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn config_err(self) -> std::result::Result<T, Failure>;
    fn runtime_err(self) -> std::result::Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn config_err(self) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }

    fn runtime_err(self) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&args.config)?;
    config
        .apply(&Overrides {
            seed: args.seed,
            loss: args.loss,
            tau: args.tau,
            sampler: args.sampler,
            imbalance_factor: args.imbalance_factor,
            output_dir: args.out.clone(),
        })
        .with_context(|| format!("applying flags to {}", args.config.display()))?;
    Ok(config)
}

fn output_dir(config: &ExperimentConfig, out_root: Option<&Path>) -> PathBuf {
    match (&config.output_dir, out_root) {
        (Some(dir), _) => dir.clone(),
        (None, Some(root)) => root.join(&config.name),
        (None, None) => Path::new("runs").join(&config.name),
    }
}

fn run(args: RunArgs) -> std::result::Result<(), Failure> {
    let config = load_config(&args).config_err()?;
    let dir = output_dir(&config, args.out_root.as_deref());
    let metrics = run_experiment(&config, &dir)
        .with_context(|| format!("run `{}`", config.name))
        .runtime_err()?;
    println!("{} -> {}", metrics.summary_line(), dir.display());
    Ok(())
}

fn sweep(args: RunArgs) -> std::result::Result<(), Failure> {
    let mut config = load_config(&args).config_err()?;
    let mut sweep = config.sweep.take().unwrap_or_else(SweepConfig::default);
    // Flags that name a single loss or imbalance factor narrow the sweep.
    if let Some(loss) = args.loss {
        sweep.losses = vec![loss];
    }
    if let Some(imf) = args.imbalance_factor {
        sweep.imbalance_factors = vec![imf];
    }
    let dir = output_dir(&config, args.out_root.as_deref());
    let rows = run_sweep(&config, &sweep, &dir).map_err(|e| match e {
        ltlab::Error::Config(_) => Failure::Config(e.into()),
        other => Failure::Runtime(other.into()),
    })?;
    let failed: usize = rows.iter().map(|r| r.failed).sum();
    let runs: usize = rows.iter().map(|r| r.runs).sum();
    println!(
        "sweep `{}`: {} cells, {runs} runs ok, {failed} failed -> {}",
        config.name,
        rows.len(),
        dir.join(SWEEP_FILE).display()
    );
    if failed > 0 {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "{failed} sweep runs failed"
        )));
    }
    Ok(())
}

fn eval(args: EvalArgs) -> std::result::Result<(), Failure> {
    let mut config = ExperimentConfig::load(&args.config).config_err()?;
    config
        .apply(&Overrides {
            seed: args.seed,
            ..Overrides::default()
        })
        .config_err()?;
    let params = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))
        .runtime_err()?;
    let data = build_data(&config).runtime_err()?;
    let report = evaluate_model(&config, &data, &params).runtime_err()?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).runtime_err()?;
        let text = serde_json::to_string_pretty(&report).runtime_err()?;
        std::fs::write(dir.join("eval.json"), text + "\n").runtime_err()?;
    }
    println!(
        "{} checkpoint={} balanced_acc={:.4} overall_acc={:.4} uniform_kl={:.5}",
        config.name,
        args.checkpoint.display(),
        report.balanced_accuracy,
        report.overall_accuracy,
        report.uniform_kl
    );
    Ok(())
}

fn convert(args: ConvertArgs) -> std::result::Result<(), Failure> {
    let counts = ClassCounts::new(args.counts).config_err()?;
    if let Some(parent) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))
            .runtime_err()?;
    }
    let rows = convert_predictions(&args.input, &counts, &args.output)
        .with_context(|| format!("converting {}", args.input.display()))
        .runtime_err()?;
    println!(
        "converted {rows} rows for {} classes -> {}",
        counts.k(),
        args.output.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Eval(a) => eval(a),
        Command::Convert(a) => convert(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
