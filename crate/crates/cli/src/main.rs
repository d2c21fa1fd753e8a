use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use qntk::experiments::{self, Experiment, ExperimentConfig, ExperimentReport};
use serde_json::{json, Value};

const MANIFEST_SCHEMA: &str = "qntk-manifest/1";

#[derive(Parser)]
#[command(name = "qntk", version, about = "Quantum neural tangent kernel experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Noiseless training: measured decay rate against the frozen and averaged kernels
    Decay(RunArgs),
    /// Ensemble mean and spread of the kernel against the averaged closed form
    KbarEnsemble(RunArgs),
    /// Relative kernel spread versus depth, with a power-law fit
    #[command(name = "scaling-L", alias = "scaling-l")]
    ScalingL(RunArgs),
    /// Late-time residual versus angle-noise level
    NoiseSweep(RunArgs),
    /// Late-time residual spread versus learning rate
    LrSweep(RunArgs),
    /// Noise-dominated crossover time, simulated and predicted
    Tnoise(RunArgs),
    /// Wide classical network: gradient variance, kernel fluctuation, and frozen-kernel training
    ClassicalWidth(RunArgs),
    /// Monte Carlo moments of Haar unitaries
    HaarMoments(RunArgs),
    /// Frozen-kernel validity conditions and meta-kernel statistics
    Concentration(RunArgs),
    /// Print the default configuration of an experiment as JSON
    Config {
        /// Experiment name, e.g. noise-sweep
        experiment: String,
    },
}

#[derive(Args, Default)]
struct RunArgs {
    /// JSON configuration, or a manifest.json from an earlier run
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    eta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    sigma_theta: Option<f64>,
    #[arg(long)]
    qubits: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// z0, zsum, identity, or a Pauli label
    #[arg(long)]
    observable: Option<String>,
    /// Ensemble size for kernel sampling
    #[arg(long)]
    samples: Option<usize>,
    /// Exclude runs whose kernel exceeds this value
    #[arg(long, allow_negative_numbers = true)]
    k_max: Option<f64>,
    /// Output directory [default: qntk-out/<experiment>]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads [default: all cores]
    #[arg(long)]
    jobs: Option<usize>,
}

fn experiment_from_name(name: &str) -> Result<Experiment> {
    Experiment::ALL
        .into_iter()
        .find(|e| e.name().eq_ignore_ascii_case(name))
        .with_context(|| format!("unknown experiment {name:?}"))
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("{}: invalid JSON", path.display()))?;
    let is_manifest = value.get("schema").and_then(Value::as_str).is_some_and(|s| s.starts_with("qntk-manifest"));
    let cfg = if is_manifest {
        let inner = value.get("config").context("manifest has no config")?;
        ExperimentConfig::from_json_str(&serde_json::to_string_pretty(inner)?)
    } else {
        ExperimentConfig::from_json_str(&text)
    };
    cfg.with_context(|| format!("{}: invalid configuration", path.display()))
}

fn build_config(experiment: Experiment, args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let cfg = load_config(path)?;
            let text = fs::read_to_string(path)?;
            if text.contains("\"experiment\"") && cfg.experiment != experiment {
                bail!("{} is a {} configuration, not {}", path.display(), cfg.experiment, experiment);
            }
            cfg
        }
        None => ExperimentConfig::default(),
    };
    cfg.experiment = experiment;
    if let Some(v) = args.eta {
        cfg.eta = v;
    }
    if let Some(v) = args.sigma_theta {
        cfg.sigma_theta = Some(v);
    }
    if let Some(v) = args.qubits {
        cfg.n_qubits = v;
    }
    if let Some(v) = args.layers {
        cfg.n_layers = v;
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.runs {
        cfg.n_runs = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = &args.observable {
        cfg.observable = Some(v.clone());
    }
    if let Some(v) = args.samples {
        cfg.samples = v;
    }
    if let Some(v) = args.k_max {
        cfg.k_max = Some(v);
    }
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn write_outputs(dir: &Path, cfg: &ExperimentConfig, report: &ExperimentReport) -> Result<Vec<String>> {
    let traces_dir = dir.join("traces");
    fs::create_dir_all(&traces_dir).with_context(|| format!("creating {}", traces_dir.display()))?;
    let mut files = Vec::new();
    for t in &report.traces {
        fs::write(traces_dir.join(&t.name), &t.contents)?;
        files.push(format!("traces/{}", t.name));
    }
    fs::write(dir.join("plotdata.csv"), report.plotdata.to_csv())?;
    files.push("plotdata.csv".into());
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&report.summary(cfg))? + "\n")?;
    files.push("summary.json".into());
    let failures_path = dir.join("failures.json");
    if report.passed() {
        if failures_path.exists() {
            fs::remove_file(&failures_path)?;
        }
    } else {
        fs::write(&failures_path, serde_json::to_string_pretty(&json!({ "experiment": report.experiment, "failures": report.failures() }))? + "\n")?;
        files.push("failures.json".into());
    }
    let manifest = json!({
        "schema": MANIFEST_SCHEMA,
        "tool": "qntk",
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": report.experiment,
        "seed": cfg.seed,
        "config": cfg,
        "files": files,
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(files)
}

fn run_experiment(experiment: Experiment, args: &RunArgs) -> Result<bool> {
    let cfg = build_config(experiment, args)?;
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().context("configuring worker threads")?;
    }
    let report = experiments::run(&cfg)?;
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("qntk-out").join(experiment.name()));
    write_outputs(&dir, &cfg, &report)?;
    for c in &report.checks {
        println!("{:<5} {:<26} measured {:<12.6} target {:<12.6} ({})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.measured, c.target, c.tolerance);
    }
    for n in &report.notes {
        println!("note: {n}");
    }
    println!("wrote {}", dir.display());
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, args) = match cli.command {
        Command::Config { experiment } => {
            return match experiment_from_name(&experiment) {
                Ok(e) => {
                    println!("{}", serde_json::to_string_pretty(&ExperimentConfig::for_experiment(e)).expect("serializable"));
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(2)
                }
            };
        }
        Command::Decay(a) => (Experiment::Decay, a),
        Command::KbarEnsemble(a) => (Experiment::KbarEnsemble, a),
        Command::ScalingL(a) => (Experiment::ScalingL, a),
        Command::NoiseSweep(a) => (Experiment::NoiseSweep, a),
        Command::LrSweep(a) => (Experiment::LrSweep, a),
        Command::Tnoise(a) => (Experiment::Tnoise, a),
        Command::ClassicalWidth(a) => (Experiment::ClassicalWidth, a),
        Command::HaarMoments(a) => (Experiment::HaarMoments, a),
        Command::Concentration(a) => (Experiment::Concentration, a),
    };
    match run_experiment(experiment, &args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
