//! Gradient descent on `L = ε²/2` with optional Gaussian angle noise:
//! `θ_ℓ ← θ_ℓ − η ε ∂ε/∂θ_ℓ + Δθ_ℓ`, `Δθ_ℓ ~ N(0, σ²)` drawn fresh every step.

use std::io::Write;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ansatz::AngleVector;
use crate::error::{Error, Result};
use crate::gradients::ResidualContext;
use crate::rng::{derive_seed, rng_from_seed, Rng};

pub const DEFAULT_MAX_STEPS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub steps: usize,
    pub sigma_theta: f64,
    pub seed: u64,
    pub record_k_every: usize,
    pub keep_snapshots: bool,
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.005,
            steps: 100,
            sigma_theta: 0.0,
            seed: 0,
            record_k_every: 1,
            keep_snapshots: false,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::invalid(format!("eta must be finite and non-negative, got {}", self.eta)));
        }
        if !(self.sigma_theta.is_finite() && self.sigma_theta >= 0.0) {
            return Err(Error::invalid(format!("sigma_theta must be finite and non-negative, got {}", self.sigma_theta)));
        }
        if self.record_k_every == 0 {
            return Err(Error::invalid("record_k_every must be at least 1"));
        }
        if self.steps > self.max_steps {
            return Err(Error::Resource(format!("{} steps exceeds the guard of {}", self.steps, self.max_steps)));
        }
        Ok(())
    }

    fn noise(&self) -> Option<Normal<f64>> {
        (self.sigma_theta > 0.0).then(|| Normal::new(0.0, self.sigma_theta).expect("validated sigma"))
    }
}

/// Result of a single update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub eps_before: f64,
    pub eps_after: f64,
    pub k: f64,
    /// Largest deterministic update `η |ε ∂ε/∂θ_ℓ|`; noise is not included.
    pub max_dtheta: f64,
}

struct Update {
    theta: AngleVector,
    eps: f64,
    k: f64,
    max_dtheta: f64,
}

fn update(ctx: &ResidualContext, theta: &AngleVector, cfg: &TrainConfig, noise: Option<&Normal<f64>>, rng: &mut Rng, step: usize) -> Result<Update> {
    let (eps, grad) = ctx.residual_and_gradient(theta)?;
    if !eps.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite { context: "gradient", step });
    }
    let k = grad.norm_sqr();
    let mut next = theta.clone();
    let mut max_dtheta = 0.0f64;
    for (angle, g) in next.0.iter_mut().zip(grad.as_slice()) {
        let delta = -cfg.eta * eps * g;
        max_dtheta = max_dtheta.max(delta.abs());
        *angle += delta;
        if let Some(dist) = noise {
            *angle += dist.sample(rng);
        }
    }
    Ok(Update { theta: next, eps, k, max_dtheta })
}

/// One update from `theta`, drawing noise from `rng`.
pub fn gd_step(ctx: &ResidualContext, theta: &AngleVector, cfg: &TrainConfig, rng: &mut Rng) -> Result<(AngleVector, StepRecord)> {
    cfg.validate()?;
    let noise = cfg.noise();
    let u = update(ctx, theta, cfg, noise.as_ref(), rng, 0)?;
    let eps_after = ctx.residual(&u.theta)?;
    Ok((u.theta, StepRecord { eps_before: u.eps, eps_after, k: u.k, max_dtheta: u.max_dtheta }))
}

/// State at step `t`; `max_dtheta` belongs to the update leaving step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub eps: f64,
    pub loss: f64,
    pub k: Option<f64>,
    pub max_dtheta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// `steps + 1` rows; row 0 is recorded before any update.
    pub rows: Vec<TraceRow>,
    pub theta0: AngleVector,
    pub theta_final: AngleVector,
    pub snapshots: Option<Vec<AngleVector>>,
}

impl TrainingTrace {
    pub fn eps(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.eps).collect()
    }

    pub fn eps0(&self) -> f64 {
        self.rows[0].eps
    }

    pub fn eps_final(&self) -> f64 {
        self.rows.last().expect("trace has at least one row").eps
    }

    /// Kernel at the first step.
    pub fn k0(&self) -> f64 {
        self.rows[0].k.expect("step 0 always records K")
    }

    /// Kernel at the final angles.
    pub fn k_final(&self) -> f64 {
        self.rows.last().and_then(|r| r.k).expect("final row always records K")
    }

    /// CSV with header `step,eps,loss,K,max_dtheta`; unrecorded values are empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,eps,loss,K,max_dtheta")?;
        for r in &self.rows {
            let k = r.k.map(|v| format!("{v:e}")).unwrap_or_default();
            let d = r.max_dtheta.map(|v| format!("{v:e}")).unwrap_or_default();
            writeln!(w, "{},{:e},{:e},{},{}", r.step, r.eps, r.loss, k, d)?;
        }
        Ok(())
    }
}

/// Runs `cfg.steps` updates from `theta0`. Deterministic in `cfg.seed`.
pub fn train(ctx: &ResidualContext, theta0: &AngleVector, cfg: &TrainConfig) -> Result<TrainingTrace> {
    cfg.validate()?;
    ctx.ansatz().check_angles(theta0)?;
    let noise = cfg.noise();
    let mut rng = rng_from_seed(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.steps + 1);
    let mut snapshots = cfg.keep_snapshots.then(|| vec![theta0.clone()]);
    let mut theta = theta0.clone();
    for step in 0..cfg.steps {
        let u = update(ctx, &theta, cfg, noise.as_ref(), &mut rng, step)?;
        let k = (step % cfg.record_k_every == 0).then_some(u.k);
        rows.push(TraceRow { step, eps: u.eps, loss: 0.5 * u.eps * u.eps, k, max_dtheta: Some(u.max_dtheta) });
        theta = u.theta;
        if let Some(s) = snapshots.as_mut() {
            s.push(theta.clone());
        }
    }
    let (eps, grad) = ctx.residual_and_gradient(&theta)?;
    if !eps.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite { context: "gradient", step: cfg.steps });
    }
    rows.push(TraceRow { step: cfg.steps, eps, loss: 0.5 * eps * eps, k: Some(grad.norm_sqr()), max_dtheta: None });
    Ok(TrainingTrace { rows, theta0: theta0.clone(), theta_final: theta, snapshots })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub eps0: f64,
    pub eps_final: f64,
    pub k0: f64,
    pub k_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub runs: Vec<RunSummary>,
    pub mean_abs_eps: f64,
    /// Sample standard deviation (n − 1) of `ε(T)`.
    pub std_eps: f64,
    pub mean_k_final: f64,
}

impl EnsembleSummary {
    pub fn from_runs(runs: Vec<RunSummary>) -> Self {
        let n = runs.len() as f64;
        let mean_abs_eps = runs.iter().map(|r| r.eps_final.abs()).sum::<f64>() / n;
        let mean = runs.iter().map(|r| r.eps_final).sum::<f64>() / n;
        let var = runs.iter().map(|r| (r.eps_final - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let mean_k_final = runs.iter().map(|r| r.k_final).sum::<f64>() / n;
        Self { runs, mean_abs_eps, std_eps: var.sqrt(), mean_k_final }
    }
}

/// Seed of run `index` in an ensemble seeded with `seed`.
pub fn run_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// `n_runs` independent noise realizations from the same circuit and `theta0`.
pub fn ensemble_traces(ctx: &ResidualContext, theta0: &AngleVector, cfg: &TrainConfig, n_runs: usize) -> Result<Vec<TrainingTrace>> {
    if n_runs < 2 {
        return Err(Error::invalid(format!("an ensemble needs at least 2 runs, got {n_runs}")));
    }
    cfg.validate()?;
    (0..n_runs)
        .into_par_iter()
        .map(|i| {
            let run_cfg = TrainConfig { seed: run_seed(cfg.seed, i), ..cfg.clone() };
            train(ctx, theta0, &run_cfg)
        })
        .collect()
}

pub fn summarize(traces: &[TrainingTrace], cfg: &TrainConfig) -> EnsembleSummary {
    let runs = traces
        .iter()
        .enumerate()
        .map(|(i, t)| RunSummary {
            seed: run_seed(cfg.seed, i),
            eps0: t.eps0(),
            eps_final: t.eps_final(),
            k0: t.k0(),
            k_final: t.k_final(),
        })
        .collect();
    EnsembleSummary::from_runs(runs)
}

pub fn ensemble_train(ctx: &ResidualContext, theta0: &AngleVector, cfg: &TrainConfig, n_runs: usize) -> Result<EnsembleSummary> {
    let traces = ensemble_traces(ctx, theta0, cfg, n_runs)?;
    Ok(summarize(&traces, cfg))
}

/// Per-angle motion against overall loss reduction for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LazinessReport {
    pub dim: usize,
    /// Largest deterministic per-angle update over all steps.
    pub max_dtheta: f64,
    /// `‖θ(T) − θ(0)‖₂`.
    pub displacement_norm: f64,
    /// `max_ℓ |θ_ℓ(T) − θ_ℓ(0)|`.
    pub max_abs_displacement: f64,
    /// `|ε(T) / ε(0)|`.
    pub eps_ratio: f64,
}

pub fn laziness_report(trace: &TrainingTrace, dim: usize) -> Result<LazinessReport> {
    if trace.rows.is_empty() {
        return Err(Error::invalid("empty trace"));
    }
    let max_dtheta = trace.rows.iter().filter_map(|r| r.max_dtheta).fold(0.0, f64::max);
    let diffs: Vec<f64> = trace.theta_final.0.iter().zip(&trace.theta0.0).map(|(a, b)| a - b).collect();
    Ok(LazinessReport {
        dim,
        max_dtheta,
        displacement_norm: diffs.iter().map(|d| d * d).sum::<f64>().sqrt(),
        max_abs_displacement: diffs.iter().fold(0.0, |m, d| m.max(d.abs())),
        eps_ratio: (trace.eps_final() / trace.eps0()).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ansatz::LayeredAnsatz;
    use crate::sim::{Observable, StateVector};

    fn setup(n: usize, l: usize, seed: u64, eps0: f64) -> (ResidualContext, AngleVector) {
        let ansatz = LayeredAnsatz::randomized_hwe(n, l, seed).unwrap();
        let theta0 = ansatz.random_angles(&mut rng_from_seed(seed + 1));
        let ctx = ResidualContext::with_initial_residual(ansatz, StateVector::zero(n), Observable::z_sum(n), &theta0, eps0).unwrap();
        (ctx, theta0)
    }

    #[test]
    fn zero_residual_or_zero_rate_is_stationary() {
        let (ctx, theta0) = setup(3, 12, 1, 0.0);
        let cfg = TrainConfig::default();
        let (next, rec) = gd_step(&ctx, &theta0, &cfg, &mut rng_from_seed(0)).unwrap();
        assert!(next.0.iter().zip(&theta0.0).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(rec.max_dtheta.abs() < 1e-15);

        let (ctx, theta0) = setup(3, 12, 1, 0.5);
        let still = TrainConfig { eta: 0.0, ..TrainConfig::default() };
        let (next, _) = gd_step(&ctx, &theta0, &still, &mut rng_from_seed(0)).unwrap();
        assert_eq!(next, theta0);
    }

    #[test]
    fn one_step_is_first_order_in_eta() {
        let (ctx, theta0) = setup(3, 16, 2, 1.0);
        let k = ctx.qntk(&theta0).unwrap();
        let discrepancy = |eta: f64| {
            let cfg = TrainConfig { eta, ..TrainConfig::default() };
            let (_, rec) = gd_step(&ctx, &theta0, &cfg, &mut rng_from_seed(0)).unwrap();
            (rec.eps_after - rec.eps_before) - (-eta * k * rec.eps_before)
        };
        let d1 = discrepancy(0.004);
        let d2 = discrepancy(0.002);
        let d3 = discrepancy(0.001);
        // quadratic remainder: halving η divides the discrepancy by ~4
        assert!((d1 / d2 - 4.0).abs() < 0.2, "{}", d1 / d2);
        assert!((d2 / d3 - 4.0).abs() < 0.2, "{}", d2 / d3);
    }

    #[test]
    fn training_is_deterministic() {
        let (ctx, theta0) = setup(3, 10, 3, 1.0);
        let cfg = TrainConfig { sigma_theta: 1e-2, steps: 30, seed: 77, ..TrainConfig::default() };
        let a = train(&ctx, &theta0, &cfg).unwrap();
        let b = train(&ctx, &theta0, &cfg).unwrap();
        assert_eq!(a, b);
        let c = train(&ctx, &theta0, &TrainConfig { seed: 78, ..cfg }).unwrap();
        assert_ne!(a.theta_final, c.theta_final);
    }

    #[test]
    fn trace_layout() {
        let (ctx, theta0) = setup(2, 6, 4, 0.5);
        let cfg = TrainConfig { steps: 10, record_k_every: 3, keep_snapshots: true, ..TrainConfig::default() };
        let tr = train(&ctx, &theta0, &cfg).unwrap();
        assert_eq!(tr.rows.len(), 11);
        assert!((tr.eps0() - 0.5).abs() < 1e-12);
        assert_eq!(tr.rows.iter().filter(|r| r.k.is_some()).count(), 5);
        assert!(tr.rows[10].max_dtheta.is_none());
        assert_eq!(tr.snapshots.as_ref().unwrap().len(), 11);
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,eps,loss,K,max_dtheta\n"));
        assert_eq!(text.lines().count(), 12);
        assert!(text.lines().last().unwrap().ends_with(','));
        assert!(!text.lines().nth(1).unwrap().ends_with(','));
    }

    #[test]
    fn zero_initial_residual_stays_zero() {
        let (ctx, theta0) = setup(3, 8, 5, 0.0);
        let tr = train(&ctx, &theta0, &TrainConfig { steps: 20, ..TrainConfig::default() }).unwrap();
        assert!(tr.eps().iter().all(|e| e.abs() < 1e-14));
    }

    #[test]
    fn noiseless_decay_is_monotone() {
        let (ctx, theta0) = setup(3, 24, 6, 1.0);
        let tr = train(&ctx, &theta0, &TrainConfig { steps: 60, eta: 0.01, ..TrainConfig::default() }).unwrap();
        for w in tr.rows.windows(2) {
            let ek = 0.01 * w[0].k.unwrap();
            assert!(ek > 0.0 && ek < 1.0);
            assert!(w[1].eps.abs() <= w[0].eps.abs() + 1e-12);
        }
    }

    #[test]
    fn injected_noise_statistics() {
        // With η = 0 the angle increments are exactly the injected noise.
        let (ctx, theta0) = setup(2, 50, 7, 0.3);
        let sigma = 0.01;
        let steps = 400;
        let cfg = TrainConfig { eta: 0.0, sigma_theta: sigma, steps, keep_snapshots: true, seed: 5, ..TrainConfig::default() };
        let tr = train(&ctx, &theta0, &cfg).unwrap();
        let snaps = tr.snapshots.unwrap();
        let draws: Vec<f64> = snaps.windows(2).flat_map(|w| w[1].0.iter().zip(&w[0].0).map(|(a, b)| a - b).collect::<Vec<_>>()).collect();
        let n = draws.len() as f64;
        assert!(n >= 1e4);
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 * sigma / n.sqrt());
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.1);
    }

    #[test]
    fn noiseless_ensemble_has_no_spread() {
        let (ctx, theta0) = setup(2, 8, 8, 0.5);
        let s = ensemble_train(&ctx, &theta0, &TrainConfig { steps: 15, ..TrainConfig::default() }, 4).unwrap();
        assert_eq!(s.std_eps, 0.0);
        assert!(s.runs.windows(2).all(|w| w[0].eps_final == w[1].eps_final));
        assert!(ensemble_train(&ctx, &theta0, &TrainConfig::default(), 1).is_err());
    }

    #[test]
    fn laziness_of_frozen_run() {
        let (ctx, theta0) = setup(2, 8, 9, 0.5);
        let tr = train(&ctx, &theta0, &TrainConfig { eta: 0.0, steps: 5, ..TrainConfig::default() }).unwrap();
        let rep = laziness_report(&tr, 4).unwrap();
        assert_eq!(rep.displacement_norm, 0.0);
        assert_eq!(rep.max_dtheta, 0.0);
        assert_eq!(rep.eps_ratio, 1.0);
    }

    #[test]
    fn config_validation() {
        let (ctx, theta0) = setup(2, 4, 10, 0.5);
        for bad in [
            TrainConfig { eta: f64::NAN, ..TrainConfig::default() },
            TrainConfig { sigma_theta: -1.0, ..TrainConfig::default() },
            TrainConfig { record_k_every: 0, ..TrainConfig::default() },
            TrainConfig { steps: 11, max_steps: 10, ..TrainConfig::default() },
        ] {
            assert!(train(&ctx, &theta0, &bad).is_err());
        }
        assert!(train(&ctx, &AngleVector::zeros(3), &TrainConfig::default()).is_err());
    }
}
