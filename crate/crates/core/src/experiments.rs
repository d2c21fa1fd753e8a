//! Experiment runners: each takes an [`ExperimentConfig`], simulates, and returns an
//! [`ExperimentReport`] with pass/fail checks, a JSON result block, plot data, and
//! per-run trace CSVs. Runners do no file I/O.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ansatz::{AngleVector, LayeredAnsatz};
use crate::classical::{self, Activation, Dataset, LearningRate, Mlp, NtkTrainConfig, ProbeNetwork};
use crate::dynamics::{self, TrainConfig, TrainingTrace};
use crate::error::{Error, Result};
use crate::gradients::ResidualContext;
use crate::rng::{derive_seed, rng_from_seed};
use crate::sim::{haar_matrix, u00_fourth_moment_quadrature, Observable, PauliString, StateVector, MAX_DENSE_QUBITS};
use crate::stats::{linear_fit, log_log_fit, mean, rms, sample_std, std_error};
use crate::theory::{self, TheoryReport, Z_90};

pub const SUMMARY_SCHEMA: &str = "qntk-summary/1";
/// Largest register the experiment layer will simulate.
pub const MAX_EXPERIMENT_QUBITS: usize = 16;

const THETA_STREAM: u64 = 0x7468_6574_61;
const NOISE_STREAM: u64 = 0x6e6f_6973_65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    #[default]
    Decay,
    KbarEnsemble,
    ScalingL,
    NoiseSweep,
    LrSweep,
    Tnoise,
    ClassicalWidth,
    HaarMoments,
    Concentration,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::Decay,
        Experiment::KbarEnsemble,
        Experiment::ScalingL,
        Experiment::NoiseSweep,
        Experiment::LrSweep,
        Experiment::Tnoise,
        Experiment::ClassicalWidth,
        Experiment::HaarMoments,
        Experiment::Concentration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Decay => "decay",
            Experiment::KbarEnsemble => "kbar-ensemble",
            Experiment::ScalingL => "scaling-L",
            Experiment::NoiseSweep => "noise-sweep",
            Experiment::LrSweep => "lr-sweep",
            Experiment::Tnoise => "tnoise",
            Experiment::ClassicalWidth => "classical-width",
            Experiment::HaarMoments => "haar-moments",
            Experiment::Concentration => "concentration",
        }
    }

    fn default_observable(self) -> &'static str {
        match self {
            Experiment::KbarEnsemble | Experiment::ScalingL | Experiment::Concentration => "z0",
            _ => "zsum",
        }
    }

    fn default_sigma(self) -> f64 {
        match self {
            Experiment::LrSweep => 0.005,
            Experiment::Tnoise => 1e-3,
            _ => 0.0,
        }
    }
}

impl std::fmt::Display for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Every knob of every experiment. Unused fields are ignored by a given runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub n_qubits: usize,
    pub n_layers: usize,
    pub eta: f64,
    pub steps: usize,
    /// Angle-noise level; `None` uses the experiment's default (0, 0.005 for lr-sweep, 1e-3 for tnoise).
    pub sigma_theta: Option<f64>,
    pub n_runs: usize,
    pub seed: u64,
    /// `z0`, `zsum`, `identity`, or a Pauli label such as `ZZII` (character i acts on qubit i).
    pub observable: Option<String>,
    /// Initial residual `ε(0)`; the target `O₀` is chosen to produce it.
    pub eps0: f64,
    /// Runs whose kernel exceeds this are excluded from statistics and counted.
    pub k_max: Option<f64>,
    /// Ensemble size for kernel and meta-kernel sampling.
    pub samples: usize,
    pub fit_window: usize,
    pub sigma_sweep: Vec<f64>,
    pub eta_sweep: Vec<f64>,
    pub layer_sweep: Vec<usize>,
    pub crossover_runs: usize,
    pub haar_qubits: Vec<usize>,
    pub haar_samples: usize,
    pub grad_widths: Vec<usize>,
    pub ntk_widths: Vec<usize>,
    pub classical_trials: usize,
    pub classical_samples: usize,
    pub classical_steps: usize,
    pub classical_hidden_layers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Decay,
            n_qubits: 4,
            n_layers: 64,
            eta: 0.005,
            steps: 100,
            sigma_theta: None,
            n_runs: 10,
            seed: 0,
            observable: None,
            eps0: 1.0,
            k_max: None,
            samples: 500,
            fit_window: 20,
            sigma_sweep: vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2],
            eta_sweep: vec![0.0005, 0.001, 0.002, 0.005, 0.01, 0.02, 0.03],
            layer_sweep: vec![16, 32, 64, 128],
            crossover_runs: 20,
            haar_qubits: vec![1, 2],
            haar_samples: 10_000,
            grad_widths: vec![64, 128, 256, 512],
            ntk_widths: vec![64, 128, 256, 512, 1024],
            classical_trials: 100,
            classical_samples: 8,
            classical_steps: 200,
            classical_hidden_layers: 2,
        }
    }
}

fn field_error(field: &str, message: impl std::fmt::Display) -> Error {
    Error::invalid(format!("{field}: {message}"))
}

impl ExperimentConfig {
    pub fn for_experiment(experiment: Experiment) -> Self {
        Self { experiment, ..Self::default() }
    }

    /// Parses JSON and validates; errors carry the line of the offending field when it appears in `text`.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Serde(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate().map_err(|e| match e {
            Error::Invalid(msg) => {
                let field = msg.split(':').next().unwrap_or_default();
                let needle = format!("\"{field}\"");
                match text.lines().position(|l| l.contains(&needle)) {
                    Some(line) => Error::Invalid(format!("line {}: {msg}", line + 1)),
                    None => Error::Invalid(msg),
                }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_qubits == 0 || self.n_qubits > MAX_EXPERIMENT_QUBITS {
            return Err(field_error("n_qubits", format!("must be in 1..={MAX_EXPERIMENT_QUBITS}, got {}", self.n_qubits)));
        }
        if self.n_layers == 0 {
            return Err(field_error("n_layers", "must be at least 1"));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(field_error("eta", format!("must be finite and non-negative, got {}", self.eta)));
        }
        if let Some(s) = self.sigma_theta {
            if !(s.is_finite() && s >= 0.0) {
                return Err(field_error("sigma_theta", format!("must be finite and non-negative, got {s}")));
            }
        }
        if self.n_runs < 2 {
            return Err(field_error("n_runs", "ensembles need at least 2 runs"));
        }
        if !self.eps0.is_finite() {
            return Err(field_error("eps0", "must be finite"));
        }
        if let Some(k) = self.k_max {
            if !(k > 0.0) {
                return Err(field_error("k_max", format!("must be positive, got {k}")));
            }
        }
        if self.samples < 2 {
            return Err(field_error("samples", "need at least 2 samples"));
        }
        if self.fit_window < 2 {
            return Err(field_error("fit_window", "need at least 2 steps"));
        }
        if self.sigma_sweep.is_empty() || self.sigma_sweep.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(field_error("sigma_sweep", "must be a non-empty list of non-negative numbers"));
        }
        if self.eta_sweep.is_empty() || self.eta_sweep.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(field_error("eta_sweep", "must be a non-empty list of positive numbers"));
        }
        if self.layer_sweep.len() < 2 || self.layer_sweep.contains(&0) {
            return Err(field_error("layer_sweep", "needs at least two positive depths"));
        }
        if self.crossover_runs < 2 {
            return Err(field_error("crossover_runs", "need at least 2 runs"));
        }
        if self.haar_qubits.is_empty() || self.haar_qubits.iter().any(|&q| q == 0 || q > MAX_DENSE_QUBITS) {
            return Err(field_error("haar_qubits", format!("must be a non-empty list in 1..={MAX_DENSE_QUBITS}")));
        }
        if self.haar_samples < 2 {
            return Err(field_error("haar_samples", "need at least 2 samples"));
        }
        if self.grad_widths.len() < 2 || self.grad_widths.contains(&0) {
            return Err(field_error("grad_widths", "needs at least two positive widths"));
        }
        if self.ntk_widths.len() < 2 || self.ntk_widths.contains(&0) {
            return Err(field_error("ntk_widths", "needs at least two positive widths"));
        }
        if self.classical_trials < 100 {
            return Err(field_error("classical_trials", "need at least 100 trials per width"));
        }
        if self.classical_samples == 0 || self.classical_samples > classical::MAX_TRAIN_SAMPLES {
            return Err(field_error("classical_samples", format!("must be in 1..={}", classical::MAX_TRAIN_SAMPLES)));
        }
        if self.classical_hidden_layers == 0 {
            return Err(field_error("classical_hidden_layers", "must be at least 1"));
        }
        self.observable()?;
        Ok(())
    }

    pub fn observable_spec(&self) -> &str {
        self.observable.as_deref().unwrap_or(self.experiment.default_observable())
    }

    pub fn observable(&self) -> Result<Observable> {
        parse_observable(self.observable_spec(), self.n_qubits).map_err(|e| field_error("observable", e))
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_theta.unwrap_or(self.experiment.default_sigma())
    }

    fn train_config(&self, sigma: f64, seed: u64) -> TrainConfig {
        TrainConfig { eta: self.eta, steps: self.steps, sigma_theta: sigma, seed, ..TrainConfig::default() }
    }

    fn keep(&self, k: f64) -> bool {
        self.k_max.map_or(true, |m| k <= m)
    }
}

pub fn parse_observable(spec: &str, n_qubits: usize) -> Result<Observable> {
    match spec {
        "z0" => Ok(Observable::z0(n_qubits)),
        "zsum" => Ok(Observable::z_sum(n_qubits)),
        "identity" => Ok(Observable::Pauli(PauliString::identity(n_qubits))),
        label => {
            let p: PauliString = label.parse()?;
            if p.n_qubits() != n_qubits {
                return Err(Error::Dimension { expected: n_qubits, actual: p.n_qubits() });
            }
            Ok(Observable::Pauli(p))
        }
    }
}

/// One tolerance comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub target: f64,
    pub tolerance: String,
    pub pass: bool,
}

impl Check {
    fn new(name: &str, measured: f64, target: f64, tolerance: impl Into<String>, pass: bool) -> Self {
        Self { name: name.to_string(), measured, target, tolerance: tolerance.into(), pass }
    }

    fn relative(name: &str, measured: f64, target: f64, tol: f64) -> Self {
        let pass = if target == 0.0 { measured.abs() <= 1e-12 } else { ((measured - target) / target).abs() <= tol };
        Self::new(name, measured, target, format!("relative {tol}"), pass)
    }

    fn within(name: &str, measured: f64, lo: f64, hi: f64, target: f64) -> Self {
        Self::new(name, measured, target, format!("[{lo}, {hi}]"), measured >= lo && measured <= hi)
    }
}

/// Numeric table written as CSV.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedCsv {
    pub name: String,
    pub contents: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: Experiment,
    pub checks: Vec<Check>,
    pub results: Value,
    pub plotdata: Table,
    #[serde(skip)]
    pub traces: Vec<NamedCsv>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Versioned summary document.
    pub fn summary(&self, config: &ExperimentConfig) -> Value {
        json!({
            "schema": SUMMARY_SCHEMA,
            "experiment": self.experiment,
            "passed": self.passed(),
            "config": config,
            "checks": self.checks,
            "results": self.results,
            "notes": self.notes,
        })
    }
}

pub fn run(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    match config.experiment {
        Experiment::Decay => run_decay(config),
        Experiment::KbarEnsemble => run_kbar_ensemble(config),
        Experiment::ScalingL => run_scaling_l(config),
        Experiment::NoiseSweep => run_noise_sweep(config),
        Experiment::LrSweep => run_lr_sweep(config),
        Experiment::Tnoise => run_tnoise(config),
        Experiment::ClassicalWidth => run_classical_width(config),
        Experiment::HaarMoments => run_haar_moments(config),
        Experiment::Concentration => run_concentration(config),
    }
}

/// Random circuit, random starting angles, and target giving residual `eps0`.
pub fn random_problem(n_qubits: usize, n_layers: usize, observable: &Observable, eps0: f64, seed: u64) -> Result<(ResidualContext, AngleVector)> {
    let ansatz = LayeredAnsatz::randomized_hwe(n_qubits, n_layers, seed)?;
    let theta0 = ansatz.random_angles(&mut rng_from_seed(derive_seed(seed, THETA_STREAM)));
    let ctx = ResidualContext::with_initial_residual(ansatz, StateVector::zero(n_qubits), observable.clone(), &theta0, eps0)?;
    Ok((ctx, theta0))
}

/// Kernel at a random point of a random circuit, target irrelevant.
fn sample_kernel(n_qubits: usize, n_layers: usize, observable: &Observable, seed: u64) -> Result<(ResidualContext, AngleVector, f64)> {
    let ansatz = LayeredAnsatz::randomized_hwe(n_qubits, n_layers, seed)?;
    let theta = ansatz.random_angles(&mut rng_from_seed(derive_seed(seed, THETA_STREAM)));
    let ctx = ResidualContext::new(ansatz, StateVector::zero(n_qubits), observable.clone(), 0.0)?;
    let k = ctx.qntk(&theta)?;
    Ok((ctx, theta, k))
}

fn trace_csv(trace: &TrainingTrace) -> String {
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii csv")
}

/// Least-squares slope of `ln|ε(t)|` over `t = 0..=window`.
pub fn decay_slope(eps: &[f64], window: usize) -> f64 {
    let end = window.min(eps.len() - 1);
    let ts: Vec<f64> = (0..=end).map(|t| t as f64).collect();
    let ls: Vec<f64> = eps[..=end].iter().map(|e| e.abs().ln()).collect();
    linear_fit(&ts, &ls).slope
}

fn kbar_for(cfg: &ExperimentConfig, observable: &Observable, n_layers: usize) -> Result<f64> {
    theory::kbar_exact(n_layers, &observable.trace_powers()?, 1 << cfg.n_qubits)
}

fn run_decay(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let obs = cfg.observable()?;
    let sigma = cfg.sigma();
    let tp = obs.trace_powers()?;
    let dim = 1usize << cfg.n_qubits;
    let kbar = kbar_for(cfg, &obs, cfg.n_layers)?;
    let traces: Vec<TrainingTrace> = (0..cfg.n_runs)
        .into_par_iter()
        .map(|i| {
            let (ctx, theta0) = random_problem(cfg.n_qubits, cfg.n_layers, &obs, cfg.eps0, derive_seed(cfg.seed, i as u64))?;
            dynamics::train(&ctx, &theta0, &cfg.train_config(sigma, derive_seed(derive_seed(cfg.seed, NOISE_STREAM), i as u64)))
        })
        .collect::<Result<_>>()?;

    let mut runs = Vec::new();
    let mut kept = Vec::new();
    for (i, t) in traces.iter().enumerate() {
        let eps = t.eps();
        let slope = decay_slope(&eps, cfg.fit_window);
        let predicted = (1.0 - cfg.eta * t.k0()).abs().ln();
        let log_inv = -(t.eps_final() / t.eps0()).abs().ln();
        let keep = cfg.keep(t.k0());
        runs.push(json!({
            "run": i, "seed": derive_seed(cfg.seed, i as u64), "k0": t.k0(), "k_final": t.k_final(),
            "slope": slope, "predicted_slope": predicted, "log_inv_eps_r": log_inv, "kept": keep,
        }));
        if keep {
            kept.push((i, slope, predicted, log_inv));
        }
    }

    let mut checks = Vec::new();
    let mut notes = Vec::new();
    let filtered = cfg.n_runs - kept.len();
    if filtered > 0 {
        notes.push(format!("{filtered} of {} runs excluded by k_max", cfg.n_runs));
    }
    let kbar_log_inv = cfg.eta * kbar * cfg.steps as f64;
    let mut measured = json!(null);
    if kept.is_empty() {
        checks.push(Check::new("runs_after_filter", 0.0, 1.0, ">= 1", false));
    } else {
        let slope = mean(&kept.iter().map(|k| k.1).collect::<Vec<_>>());
        let predicted = mean(&kept.iter().map(|k| k.2).collect::<Vec<_>>());
        let log_inv = mean(&kept.iter().map(|k| k.3).collect::<Vec<_>>());
        checks.push(Check::relative("decay_slope", slope, predicted, 0.15));
        checks.push(Check::relative("precision_relation", log_inv, kbar_log_inv, 0.30));
        if sigma == 0.0 {
            let monotone = kept.iter().all(|&(i, ..)| {
                let e = traces[i].eps();
                e.windows(2).all(|w| w[1].abs() <= w[0].abs() * (1.0 + 1e-12) + 1e-300)
            });
            checks.push(Check::new("monotone_abs_eps", monotone as u8 as f64, 1.0, "all kept runs", monotone));
        }
        measured = json!({ "mean_slope": slope, "mean_predicted_slope": predicted, "mean_log_inv_eps_r": log_inv });
    }

    let mut plot = Table::new(&["step", "mean_abs_eps", "frozen_kernel_prediction", "kbar_prediction"]);
    for t in 0..=cfg.steps {
        let (mut m, mut p) = (0.0, 0.0);
        for &(i, ..) in &kept {
            let tr = &traces[i];
            m += tr.rows[t].eps.abs();
            p += theory::decay_prediction(tr.eps0(), cfg.eta, tr.k0(), t as u32).value.abs();
        }
        let n = kept.len().max(1) as f64;
        let kb = theory::decay_prediction(cfg.eps0, cfg.eta, kbar, t as u32).value.abs();
        plot.push(vec![t as f64, m / n, p / n, kb]);
    }

    Ok(ExperimentReport {
        experiment: cfg.experiment,
        checks,
        results: json!({
            "kbar": kbar,
            "kbar_large_n": theory::kbar_large_n(cfg.n_layers, &tp, dim),
            "predicted_log_inv_eps_r": kbar_log_inv,
            "precision_relation_large_n": theory::precision_log_inv(cfg.eta, cfg.n_layers, tp.tr2, dim, cfg.steps as f64),
            "sigma_theta": sigma,
            "runs_filtered": filtered,
            "measured": measured,
            "runs": runs,
        }),
        plotdata: plot,
        traces: traces.iter().enumerate().map(|(i, t)| NamedCsv { name: format!("decay_run{i:03}.csv"), contents: trace_csv(t) }).collect(),
        notes,
    })
}

fn kernel_ensemble(cfg: &ExperimentConfig, obs: &Observable, n_layers: usize, stream: u64) -> Result<Vec<f64>> {
    let base = derive_seed(cfg.seed, stream);
    (0..cfg.samples)
        .into_par_iter()
        .map(|i| sample_kernel(cfg.n_qubits, n_layers, obs, derive_seed(base, i as u64)).map(|s| s.2))
        .collect()
}

fn run_kbar_ensemble(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let obs = cfg.observable()?;
    let tp = obs.trace_powers()?;
    let dim = 1usize << cfg.n_qubits;
    let kbar = kbar_for(cfg, &obs, cfg.n_layers)?;
    let ks = kernel_ensemble(cfg, &obs, cfg.n_layers, cfg.n_layers as u64)?;
    let (m, sd, se) = (mean(&ks), sample_std(&ks), std_error(&ks));
    let tol = (3.0 * se).max(0.1 * kbar.abs());
    let mut plot = Table::new(&["sample", "k"]);
    for (i, k) in ks.iter().enumerate() {
        plot.push(vec![i as f64, *k]);
    }
    Ok(ExperimentReport {
        experiment: cfg.experiment,
        checks: vec![Check::new("kbar_mean", m, kbar, format!("max(3 SE, 10%) = {tol}"), (m - kbar).abs() <= tol)],
        results: json!({
            "observable": cfg.observable_spec(),
            "samples": cfg.samples,
            "mean_k": m, "std_k": sd, "se_k": se,
            "kbar_exact": kbar,
            "kbar_large_n": theory::kbar_large_n(cfg.n_layers, &tp, dim),
            "delta_k_theory": theory::delta_k(cfg.n_layers, &tp, dim),
            "relative_deviation": if kbar != 0.0 { (m - kbar) / kbar } else { 0.0 },
        }),
        plotdata: plot,
        traces: Vec::new(),
        notes: Vec::new(),
    })
}

fn run_scaling_l(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let obs = cfg.observable()?;
    let tp = obs.trace_powers()?;
    let dim = 1usize << cfg.n_qubits;
    let mut plot = Table::new(&["n_layers", "mean_k", "std_k", "ratio", "kbar_exact", "ratio_theory"]);
    let mut points = Vec::new();
    for &l in &cfg.layer_sweep {
        let ks = kernel_ensemble(cfg, &obs, l, l as u64)?;
        let (m, sd) = (mean(&ks), sample_std(&ks));
        let ratio = sd / m;
        plot.push(vec![l as f64, m, sd, ratio, kbar_for(cfg, &obs, l)?, theory::delta_k_ratio(l, &tp, dim)]);
        points.push((l as f64, ratio));
    }
    let fit = log_log_fit(&points.iter().map(|p| p.0).collect::<Vec<_>>(), &points.iter().map(|p| p.1).collect::<Vec<_>>());
    Ok(ExperimentReport {
        experiment: cfg.experiment,
        checks: vec![Check::within("concentration_exponent", fit.slope, -0.65, -0.35, -0.5)],
        results: json!({ "observable": cfg.observable_spec(), "samples": cfg.samples, "fit": fit, "points": plot.rows }),
        plotdata: plot,
        traces: Vec::new(),
        notes: Vec::new(),
    })
}

struct SweepPoint {
    traces: Vec<TrainingTrace>,
    kept: Vec<usize>,
}

impl SweepPoint {
    fn finals(&self) -> Vec<f64> {
        self.kept.iter().map(|&i| self.traces[i].eps_final()).collect()
    }

    fn k_finals(&self) -> Vec<f64> {
        self.kept.iter().map(|&i| self.traces[i].k_final()).collect()
    }
}

fn sweep_point(cfg: &ExperimentConfig, ctx: &ResidualContext, theta0: &AngleVector, tcfg: &TrainConfig, n_runs: usize) -> Result<SweepPoint> {
    let traces = dynamics::ensemble_traces(ctx, theta0, tcfg, n_runs)?;
    let kept = (0..traces.len()).filter(|&i| cfg.keep(traces[i].k_final())).collect();
    Ok(SweepPoint { traces, kept })
}

fn single_problem(cfg: &ExperimentConfig) -> Result<(ResidualContext, AngleVector)> {
    random_problem(cfg.n_qubits, cfg.n_layers, &cfg.observable()?, cfg.eps0, cfg.seed)
}

fn point_seed(cfg: &ExperimentConfig, point: usize) -> u64 {
    derive_seed(derive_seed(cfg.seed, NOISE_STREAM), point as u64)
}

fn run_noise_sweep(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let (ctx, theta0) = single_problem(cfg)?;
    let clean = dynamics::train(&ctx, &theta0, &cfg.train_config(0.0, 0))?;
    let eta = cfg.eta;
    let mut plot = Table::new(&["sigma_theta", "mean_abs_eps", "ci_lower", "ci_upper", "theory_mean", "std_eps", "theory_std", "mean_k_final", "runs_kept"]);
    let mut checks = Vec::new();
    let mut traces_out = Vec::new();
    let (mut noisy_points, mut inside) = (0usize, 0usize);
    let mut filtered = 0usize;
    for (p, &sigma) in cfg.sigma_sweep.iter().enumerate() {
        let point = sweep_point(cfg, &ctx, &theta0, &cfg.train_config(sigma, point_seed(cfg, p)), cfg.n_runs)?;
        for (r, t) in point.traces.iter().enumerate() {
            traces_out.push(NamedCsv { name: format!("noise_p{p:02}_run{r:03}.csv"), contents: trace_csv(t) });
        }
        filtered += point.traces.len() - point.kept.len();
        let finals = point.finals();
        let kf = point.k_finals();
        if finals.is_empty() {
            plot.push(vec![sigma, f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN, 0.0]);
            if sigma > 0.0 {
                noisy_points += 1;
            }
            continue;
        }
        let abs: Vec<f64> = finals.iter().map(|e| e.abs()).collect();
        let mean_abs = mean(&abs);
        let mean_k = mean(&kf);
        if sigma == 0.0 {
            let same = (mean_abs - clean.eps_final().abs()).abs() <= 1e-15 * clean.eps_final().abs().max(1e-300);
            checks.push(Check::new("zero_noise_row", mean_abs, clean.eps_final().abs(), "equal to noiseless run", same));
            plot.push(vec![0.0, mean_abs, mean_abs, mean_abs, 0.0, sample_std(&finals), 0.0, mean_k, finals.len() as f64]);
            continue;
        }
        noisy_points += 1;
        let scales: Vec<f64> = kf.iter().map(|k| sigma / (2.0 * eta - eta * eta * k).sqrt()).collect();
        let ci = theory::half_normal_mean_interval(&scales, Z_90);
        if ci.contains(mean_abs) {
            inside += 1;
        }
        plot.push(vec![
            sigma,
            mean_abs,
            ci.lower,
            ci.upper,
            theory::late_time_mean_abs(eta, mean_k, sigma),
            sample_std(&finals),
            theory::late_time_std(eta, mean_k, sigma),
            mean_k,
            finals.len() as f64,
        ]);
    }
    if noisy_points > 0 {
        let required = (0.8 * noisy_points as f64).ceil();
        checks.push(Check::new("half_normal_mean", inside as f64, required, format!("at least {required} of {noisy_points} points inside the 90% interval"), inside as f64 >= required));
    }
    let notes = if filtered > 0 { vec![format!("{filtered} runs excluded by k_max")] } else { Vec::new() };
    Ok(ExperimentReport {
        experiment: cfg.experiment,
        checks,
        results: json!({
            "eta": eta, "k0": clean.k0(), "noiseless_eps_final": clean.eps_final(),
            "runs_filtered": filtered, "points": plot.rows,
        }),
        plotdata: plot,
        traces: traces_out,
        notes,
    })
}

fn run_lr_sweep(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let (ctx, theta0) = single_problem(cfg)?;
    let sigma = cfg.sigma();
    let k0 = ctx.qntk(&theta0)?;
    let mut plot = Table::new(&["eta", "std_eps", "theory_std", "ratio", "t_noise", "gated", "mean_k_final", "runs_kept"]);
    let mut traces_out = Vec::new();
    let (mut gated, mut ok, mut filtered) = (0usize, 0usize, 0usize);
    for (p, &eta) in cfg.eta_sweep.iter().enumerate() {
        let tcfg = TrainConfig { eta, ..cfg.train_config(sigma, point_seed(cfg, p)) };
        let point = sweep_point(cfg, &ctx, &theta0, &tcfg, cfg.n_runs)?;
        for (r, t) in point.traces.iter().enumerate() {
            traces_out.push(NamedCsv { name: format!("lr_p{p:02}_run{r:03}.csv"), contents: trace_csv(t) });
        }
        filtered += point.traces.len() - point.kept.len();
        let finals = point.finals();
        let tn = theory::t_noise(cfg.eps0, eta, k0, sigma);
        let in_gate = tn.valid && tn.value < cfg.steps as f64 && finals.len() >= 2;
        let sd = sample_std(&finals);
        let mean_k = if finals.is_empty() { f64::NAN } else { mean(&point.k_finals()) };
        let thy = theory::late_time_std(eta, mean_k, sigma);
        let ratio = sd / thy;
        if in_gate {
            gated += 1;
            if ratio >= 0.5 && ratio <= 2.0 {
                ok += 1;
            }
        }
        plot.push(vec![eta, sd, thy, ratio, tn.value, in_gate as u8 as f64, mean_k, finals.len() as f64]);
    }
    let notes = if filtered > 0 { vec![format!("{filtered} runs excluded by k_max")] } else { Vec::new() };
    Ok(ExperimentReport {
        experiment: cfg.experiment,
        checks: vec![Check::new("fluctuation_law", ok as f64, gated as f64, "every gated point within a factor of 2", gated > 0 && ok == gated)],
        results: json!({ "sigma_theta": sigma, "k0": k0, "gated_points": gated, "runs_filtered": filtered, "points": plot.rows }),
        plotdata: plot,
        traces: traces_out,
        notes,
    })
}

fn run_tnoise(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let (ctx, theta0) = single_problem(cfg)?;
    let sigma = cfg.sigma();
    let clean = dynamics::train(&ctx, &theta0, &cfg.train_config(0.0, 0))?;
    let noisy = dynamics::ensemble_traces(&ctx, &theta0, &cfg.train_config(sigma, point_seed(cfg, 0)), cfg.crossover_runs)?;
    let k0 = clean.k0();
    let eps0 = clean.eps0();
    let tn = theory::t_noise(eps0, cfg.eta, k0, sigma);
    let balance = theory::t_noise_balance_residual(eps0, cfg.eta, k0, sigma, tn.value);
    let clean_eps = clean.eps();
    let mut plot = Table::new(&["step", "noiseless_eps", "noise_band", "decay_prediction", "band_prediction"]);
    let mut crossover = None;
    for t in 0..=cfg.steps {
        let band = rms(&noisy.iter().map(|tr| tr.rows[t].eps - clean_eps[t]).collect::<Vec<_>>());
        if crossover.is_none() && band > clean_eps[t].abs() {
            crossover = Some(t);
        }
        let q = 1.0 - cfg.eta * k0;
        let band_pred = sigma * ((1.0 - q.powi(2 * t as i32)) / (cfg.eta * (2.0 - cfg.eta * k0))).sqrt();
        plot.push(vec![t as f64, clean_eps[t], band, theory::decay_prediction(eps0, cfg.eta, k0, t as u32).value, band_pred]);
    }
    let measured = crossover.map_or(f64::INFINITY, |t| t as f64);
    let ratio = measured / tn.value;
    let mut traces_out = vec![NamedCsv { name: "tnoise_noiseless.csv".into(), contents: trace_csv(&clean) }];
    for (r, t) in noisy.iter().enumerate() {
        traces_out.push(NamedCsv { name: format!("tnoise_run{r:03}.csv"), contents: trace_csv(t) });
    }
    Ok(ExperimentReport {
        experiment: cfg.experiment,
        checks: vec![
            Check::new("t_noise_balance", balance, 0.0, "<= 1e-9", tn.valid && balance <= 1e-9),
            Check::within("crossover_ratio", ratio, 0.5, 2.0, 1.0),
        ],
        results: json!({
            "sigma_theta": sigma, "k0": k0, "eps0": eps0,
            "t_noise": tn.value, "t_noise_valid": tn.valid, "balance_residual": balance,
            "simulated_crossover": crossover, "runs": cfg.crossover_runs,
            "eps_at_t_noise": theory::eps_at_t_noise(eps0, cfg.eta, k0, sigma),
        }),
        plotdata: plot,
        traces: traces_out,
        notes: Vec::new(),
    })
}

fn run_classical_width(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let n_in = 4;
    let hidden = cfg.classical_hidden_layers;
    let linear = ProbeNetwork { n_in, hidden_layers: hidden, activation: Activation::Linear };
    let tanh = ProbeNetwork { n_in, hidden_layers: hidden, activation: Activation::Tanh };
    let grad = classical::grad_variance_experiment(&cfg.grad_widths, linear, 1, cfg.classical_trials, derive_seed(cfg.seed, 1))?;
    let data = Dataset::synthetic(cfg.classical_samples, n_in, derive_seed(cfg.seed, 2))?;
    let fluct = classical::ntk_fluctuation(&cfg.ntk_widths, tanh, &data.inputs, cfg.classical_trials, derive_seed(cfg.seed, 3))?;
    let train_cfg = NtkTrainConfig { learning_rate: LearningRate::InverseMaxEigen(0.5), steps: cfg.classical_steps, ntk_every: 10 };
    let widest = *cfg.ntk_widths.iter().max().unwrap();
    let mlp = Mlp::equal_width(n_in, widest, hidden, 1, Activation::Tanh, derive_seed(cfg.seed, 4))?;
    let trace = classical::ntk_train(&mlp, &data, &train_cfg)?;
    let modes = trace.mode_rates(cfg.fit_window, 0.01);
    let worst_mode = modes.iter().map(|m| ((m.fitted - m.predicted) / m.predicted).abs()).fold(0.0, f64::max);
    let lazy = classical::laziness_vs_width(&cfg.ntk_widths, tanh, &data, &train_cfg, derive_seed(cfg.seed, 5))?;
    let decreasing = lazy.windows(2).all(|w| w[1].weight_displacement < w[0].weight_displacement);
    let max_mean_z = grad.points.iter().map(|p| p.mean.abs() / p.mean_se).fold(0.0, f64::max);

    let mut plot = Table::new(&["width", "grad_second_moment", "grad_second_moment_theory", "ntk_relative_fluctuation", "weight_displacement", "ntk_drift"]);
    let mut widths: Vec<usize> = cfg.grad_widths.iter().chain(&cfg.ntk_widths).copied().collect();
    widths.sort_unstable();
    widths.dedup();
    for w in widths {
        let g = grad.points.iter().find(|p| p.width == w);
        let f = fluct.points.iter().find(|p| p.width == w);
        let l = lazy.iter().find(|p| p.width == w);
        plot.push(vec![
            w as f64,
            g.map_or(f64::NAN, |p| p.second_moment),
            g.map_or(f64::NAN, |_| classical::linear_grad_variance(1.0, w, hidden + 1, 1)),
            f.map_or(f64::NAN, |p| p.relative_fluctuation),
            l.map_or(f64::NAN, |p| p.weight_displacement),
            l.map_or(f64::NAN, |p| p.max_drift),
        ]);
    }
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).expect("writing to memory");
    Ok(ExperimentReport {
        experiment: cfg.experiment,
        checks: vec![
            Check::within("grad_variance_exponent", grad.fit.slope, -1.15, -0.85, -1.0),
            Check::new("grad_mean_zero", max_mean_z, 0.0, "every |mean| <= 3 SE", max_mean_z <= 3.0),
            Check::within("ntk_fluctuation_exponent", fluct.fit.slope, -0.7, -0.3, -0.5),
            Check::new("frozen_ntk_drift", trace.max_drift(), 0.05, "<= 0.05", trace.max_drift() <= 0.05 && trace.diverged_at.is_none()),
            Check::new("mode_decay_rates", worst_mode, 0.2, "every fitted mode within 20%", !modes.is_empty() && worst_mode <= 0.2),
            Check::new("laziness_decreases", decreasing as u8 as f64, 1.0, "weight displacement decreasing in width", decreasing),
        ],
        results: json!({
            "grad_variance": grad,
            "ntk_fluctuation": fluct,
            "training": {
                "width": widest, "eta": trace.eta, "samples": data.len(),
                "max_drift": trace.max_drift(), "weight_displacement": trace.weight_displacement,
                "loss_initial": trace.losses[0], "loss_final": trace.losses.last(),
                "diverged_at": trace.diverged_at, "modes": modes,
            },
            "laziness": lazy,
        }),
        plotdata: plot,
        traces: vec![NamedCsv { name: format!("classical_width{widest}.csv"), contents: String::from_utf8(buf).expect("ascii csv") }],
        notes: Vec::new(),
    })
}

/// Running sums for the mean of a complex quantity and its standard error.
#[derive(Clone, Copy, Default)]
struct ComplexMoment {
    sum: Complex64,
    sum_re2: f64,
    sum_im2: f64,
}

impl ComplexMoment {
    fn add(&mut self, z: Complex64) {
        self.sum += z;
        self.sum_re2 += z.re * z.re;
        self.sum_im2 += z.im * z.im;
    }

    fn merge(mut self, o: &Self) -> Self {
        self.sum += o.sum;
        self.sum_re2 += o.sum_re2;
        self.sum_im2 += o.sum_im2;
        self
    }

    /// `|mean − target| / SE`, with `SE² = (Var Re + Var Im) / n`.
    fn z_score(&self, n: f64, target: f64) -> (Complex64, f64) {
        let m = self.sum / n;
        let var = (self.sum_re2 / n - m.re * m.re + self.sum_im2 / n - m.im * m.im) * n / (n - 1.0);
        let se = (var.max(0.0) / n).sqrt();
        let dev = (m - Complex64::new(target, 0.0)).norm();
        (m, if se > 0.0 { dev / se } else if dev == 0.0 { 0.0 } else { f64::INFINITY })
    }
}

struct HaarAccumulator {
    first: Vec<ComplexMoment>,
    second: Vec<ComplexMoment>,
    fourth: ComplexMoment,
}

impl HaarAccumulator {
    fn new(dim: usize) -> Self {
        Self { first: vec![ComplexMoment::default(); dim * dim], second: vec![ComplexMoment::default(); dim.pow(4)], fourth: ComplexMoment::default() }
    }

    fn merge(mut self, o: Self) -> Self {
        for (a, b) in self.first.iter_mut().zip(&o.first) {
            *a = a.merge(b);
        }
        for (a, b) in self.second.iter_mut().zip(&o.second) {
            *a = a.merge(b);
        }
        self.fourth = self.fourth.merge(&o.fourth);
        self
    }
}

/// Index of `(i, j, k, l)` for `E(U_ij U†_kl)`.
fn second_index(dim: usize, i: usize, j: usize, k: usize, l: usize) -> usize {
    ((i * dim + j) * dim + k) * dim + l
}

fn run_haar_moments(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    const CHUNK: usize = 250;
    let mut checks = Vec::new();
    let mut plot = Table::new(&["dim", "max_z_first", "max_z_second", "fourth_moment", "fourth_moment_target", "z_fourth"]);
    let mut results = Vec::new();
    for &q in &cfg.haar_qubits {
        let dim = 1usize << q;
        let n = cfg.haar_samples;
        let base = derive_seed(cfg.seed, q as u64);
        let acc = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut rng = rng_from_seed(derive_seed(base, c as u64));
                let mut acc = HaarAccumulator::new(dim);
                for _ in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let u = haar_matrix(dim, &mut rng);
                    for i in 0..dim {
                        for j in 0..dim {
                            acc.first[i * dim + j].add(u[(i, j)]);
                            for k in 0..dim {
                                for l in 0..dim {
                                    acc.second[second_index(dim, i, j, k, l)].add(u[(i, j)] * u[(l, k)].conj());
                                }
                            }
                        }
                    }
                    acc.fourth.add(Complex64::new(u[(0, 0)].norm_sqr().powi(2), 0.0));
                }
                acc
            })
            .reduce(|| HaarAccumulator::new(dim), HaarAccumulator::merge);
        let nf = n as f64;
        let max_first = acc.first.iter().map(|m| m.z_score(nf, 0.0).1).fold(0.0, f64::max);
        let mut max_second = 0.0f64;
        for i in 0..dim {
            for j in 0..dim {
                for k in 0..dim {
                    for l in 0..dim {
                        let target = if i == l && j == k { 1.0 / dim as f64 } else { 0.0 };
                        max_second = max_second.max(acc.second[second_index(dim, i, j, k, l)].z_score(nf, target).1);
                    }
                }
            }
        }
        let fourth_target = if dim == 2 { u00_fourth_moment_quadrature(2000) } else { 2.0 / (dim * (dim + 1)) as f64 };
        let (fourth, z4) = acc.fourth.z_score(nf, fourth_target);
        checks.push(Check::new(&format!("first_moment_n{dim}"), max_first, 0.0, "max z-score <= 3", max_first <= 3.0));
        checks.push(Check::new(&format!("second_moment_n{dim}"), max_second, 0.0, "max z-score <= 3", max_second <= 3.0));
        if dim == 2 {
            checks.push(Check::new("fourth_moment_n2", fourth.re, fourth_target, "within 3 SE of quadrature", z4 <= 3.0));
        }
        plot.push(vec![dim as f64, max_first, max_second, fourth.re, fourth_target, z4]);
        results.push(json!({
            "dim": dim, "samples": n, "max_z_first": max_first, "max_z_second": max_second,
            "mean_abs_u00_sq": acc.second[second_index(dim, 0, 0, 0, 0)].z_score(nf, 0.0).0.re,
            "fourth_moment": fourth.re, "fourth_moment_target": fourth_target, "z_fourth": z4,
        }));
    }
    Ok(ExperimentReport { experiment: cfg.experiment, checks, results: json!({ "dims": results }), plotdata: plot, traces: Vec::new(), notes: Vec::new() })
}

fn run_concentration(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let obs = cfg.observable()?;
    let dim = 1usize << cfg.n_qubits;
    let report = TheoryReport::new(cfg.n_layers, dim, obs.trace_powers()?, cfg.eta, cfg.sigma(), cfg.eps0)?;
    let cond = theory::concentration_check(&report);
    let base = derive_seed(cfg.seed, 0x6d75);
    let mus: Vec<f64> = (0..cfg.samples)
        .into_par_iter()
        .map(|i| {
            let (ctx, theta, _) = sample_kernel(cfg.n_qubits, cfg.n_layers, &obs, derive_seed(base, i as u64))?;
            ctx.dqntk_mu(&theta)
        })
        .collect::<Result<_>>()?;
    let (m, se, sd) = (mean(&mus), std_error(&mus), sample_std(&mus));
    let ratio = sd / report.delta_mu;
    let mut plot = Table::new(&["sample", "mu"]);
    for (i, mu) in mus.iter().enumerate() {
        plot.push(vec![i as f64, *mu]);
    }
    Ok(ExperimentReport {
        experiment: cfg.experiment,
        checks: vec![
            Check::new("meta_kernel_condition", cond.meta_kernel.ratio, theory::CONCENTRATION_THRESHOLD, "<= 0.1", cond.meta_kernel.pass),
            Check::new("mu_mean_zero", m, 0.0, format!("3 SE = {}", 3.0 * se), m.abs() <= 3.0 * se),
            Check::within("delta_mu_factor", ratio, 1.0 / 3.0, 3.0, 1.0),
        ],
        results: json!({
            "theory": report,
            "kernel_condition": cond.kernel,
            "meta_kernel_condition": cond.meta_kernel,
            "mu_mean": m, "mu_se": se, "mu_std": sd, "mu_rms": rms(&mus),
            "delta_mu_theory": report.delta_mu,
        }),
        plotdata: plot,
        traces: Vec::new(),
        notes: vec![format!("kernel condition ratio {:.4} (pass = {})", cond.kernel.ratio, cond.kernel.pass)],
    })
}
