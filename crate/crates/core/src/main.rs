use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rcmae_lab::harness::config::{parse_emit, parse_seeds, OUT_ENV};
use rcmae_lab::harness::{aggregate, run_experiment, Experiment, ExperimentConfig, OptimMode, RunSummary};
use rcmae_lab::masking::MaskMode;
use rcmae_lab::Result;

/// Gradient-dynamics lab for EMA-teacher masked autoencoders.
///
/// Settings are layered: experiment defaults, then `--config`, then each
/// `--set`, then the dedicated flags.
#[derive(Parser)]
#[command(name = "rcmae-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Linear student/teacher gradient probes (same, similar, different inputs).
    LinearProbe(RunArgs),
    /// Closed-form consistency gradient against its history expansion.
    Prop1(RunArgs),
    /// Triangle-inequality bounds at every step.
    Bounds(RunArgs),
    /// Covariance fixed point and the distance of a plain-SGD run to it.
    Covariance(RunArgs),
    /// Gradient probes on the single-hidden-layer model.
    ShallowProbe(RunArgs),
    /// Train the tiny RC-MAE and log per-step metrics.
    RcmaeTrain(RunArgs),
    /// Gradient probes on the tiny RC-MAE after warm-up.
    RcmaeProbe(RunArgs),
    /// Same-mask against different-mask teacher: cos(∇L_r, ∇L_c) over training.
    SVsD(RunArgs),
    /// Rebuild a summary from emitted CSV files.
    Aggregate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Write the summary here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// key=value or JSON settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set linear.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seed: Option<String>,
    /// Output root; experiment files go to `<out>/<experiment>/`.
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Optimiser for the linear and shallow models.
    #[arg(long, value_parser = ["plain_sgd", "momentum"])]
    mode: Option<String>,
    /// Teacher masking for the RC-MAE runs.
    #[arg(long = "mask-mode", value_parser = ["same", "different"])]
    mask_mode: Option<String>,
    /// Comma-separated subset of `csv,json`.
    #[arg(long)]
    emit: Option<String>,
}

fn build_config(experiment: Experiment, args: &RunArgs) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::defaults(experiment);
    if let Some(path) = &args.config {
        c.apply_file(path)?;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| rcmae_lab::LabError::Config {
            key: kv.clone(),
            reason: "expected KEY=VALUE".into(),
        })?;
        c.set(k, v)?;
    }
    if let Some(s) = &args.seed {
        c.seeds = parse_seeds(s)?;
    }
    if let Some(o) = &args.out {
        c.out_dir = o.clone();
    }
    if let Some(m) = &args.mode {
        c.set_optim_mode(m.parse::<OptimMode>().expect("checked by clap"));
    }
    if let Some(m) = &args.mask_mode {
        c.set_mask_mode(m.parse::<MaskMode>().expect("checked by clap"));
    }
    if let Some(e) = &args.emit {
        c.emit = parse_emit(e)?;
    }
    c.validate()?;
    Ok(c)
}

fn report(summary: &RunSummary) {
    eprintln!("{}: {:.1}s", summary.experiment.as_str(), summary.wall_clock_secs);
    for v in &summary.verdicts {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        eprintln!("  [{tag}] {} ({}/{} seeds, need {})", v.name, v.holds_in, v.seeds, v.required);
    }
    for f in &summary.hard_failures {
        eprintln!("  hard failure: {f}");
    }
}

fn run(cli: Cli) -> Result<bool> {
    let (experiment, args) = match cli.command {
        Command::LinearProbe(a) => (Experiment::LinearProbeSuite, a),
        Command::Prop1(a) => (Experiment::Prop1Verify, a),
        Command::Bounds(a) => (Experiment::BoundsCheck, a),
        Command::Covariance(a) => (Experiment::CovarianceCheck, a),
        Command::ShallowProbe(a) => (Experiment::ShallowProbeSuite, a),
        Command::RcmaeTrain(a) => (Experiment::RcmaeTrain, a),
        Command::RcmaeProbe(a) => (Experiment::RcmaeProbeSuite, a),
        Command::SVsD(a) => (Experiment::SVsDCompare, a),
        Command::Aggregate { files, output } => {
            let summary = aggregate(&files)?;
            let text = serde_json::to_string_pretty(&summary)? + "\n";
            match output {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
            report(&summary);
            return Ok(summary.healthy());
        }
    };
    let config = build_config(experiment, &args)?;
    let summary = run_experiment(&config)?;
    report(&summary);
    Ok(summary.healthy())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
