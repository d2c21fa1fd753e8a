//! Closed-form predictions for kernel statistics and gradient-descent dynamics.
//!
//! All formulas take the Hilbert-space dimension `N = 2^n`, the layer count `L`,
//! and trace powers of the observable. Regimes where a formula stops describing
//! a convergent process are reported through flags rather than errors, so that
//! parameter sweeps can cross them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::TracePowers;

/// Ratio at or below which a concentration condition counts as "much less than one".
pub const CONCENTRATION_THRESHOLD: f64 = 0.1;

/// Two-sided 90% standard normal quantile.
pub const Z_90: f64 = 1.644_853_626_951_472_2;

/// Exact 2-design average of `K`:
/// `L (N Tr O² − Tr² O) · 2/(N+1) · 1/(N²−1)`.
pub fn kbar_exact(n_layers: usize, traces: &TracePowers, dim: usize) -> Result<f64> {
    if dim < 2 {
        return Err(Error::invalid(format!("kbar needs N >= 2, got {dim}")));
    }
    let n = dim as f64;
    let spread = n * traces.tr2 - traces.tr * traces.tr;
    Ok(n_layers as f64 * spread * 2.0 / (n + 1.0) / (n * n - 1.0))
}

/// Large-N form `2 L Tr O² / N²`.
pub fn kbar_large_n(n_layers: usize, traces: &TracePowers, dim: usize) -> f64 {
    2.0 * n_layers as f64 * traces.tr2 / (dim as f64).powi(2)
}

/// Standard deviation of `K`: `(√L/N²) √(8 Tr²O² + 12 Tr O⁴)`.
pub fn delta_k(n_layers: usize, traces: &TracePowers, dim: usize) -> f64 {
    let n2 = (dim as f64).powi(2);
    (n_layers as f64).sqrt() / n2 * (8.0 * traces.tr2 * traces.tr2 + 12.0 * traces.tr4).sqrt()
}

/// `ΔK / K̄` with both in their large-N forms; scales as `1/√L`.
pub fn delta_k_ratio(n_layers: usize, traces: &TracePowers, dim: usize) -> f64 {
    delta_k(n_layers, traces, dim) / kbar_large_n(n_layers, traces, dim)
}

/// Root-mean-square meta-kernel: `√32 · L / N³ · (Tr O²)^{3/2}`.
pub fn delta_mu(n_layers: usize, traces: &TracePowers, dim: usize) -> f64 {
    32f64.sqrt() * n_layers as f64 / (dim as f64).powi(3) * traces.tr2.powf(1.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decay {
    pub value: f64,
    /// `|1 − ηK| > 1`: the frozen-kernel iteration grows instead of decaying.
    pub divergent: bool,
}

/// Frozen-kernel trajectory `ε(t) = (1 − ηK)^t ε(0)`.
pub fn decay_prediction(eps0: f64, eta: f64, k: f64, t: u32) -> Decay {
    let q = 1.0 - eta * k;
    Decay { value: q.powi(t as i32) * eps0, divergent: q.abs() > 1.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyMeanSq {
    pub value: f64,
    pub plateau: f64,
    /// `0 < ηK < 2`, the range where the plateau is finite and approached.
    pub convergent: bool,
}

/// Late-time `ε̄²`: `σ² / (η (2 − ηK))`.
pub fn plateau(eta: f64, k: f64, sigma_theta: f64) -> f64 {
    sigma_theta * sigma_theta / (eta * (2.0 - eta * k))
}

/// Noise-averaged `ε̄²(t) = q^{2t}(ε(0)² − P) + P` with `q = 1 − ηK` and `P` the plateau.
pub fn noisy_mean_sq(eps0: f64, eta: f64, k: f64, sigma_theta: f64, t: u32) -> NoisyMeanSq {
    let q = 1.0 - eta * k;
    let q2t = (q * q).powi(t as i32);
    let one_minus_q2 = eta * k * (2.0 - eta * k);
    // K σ² Σ_{i<t} q^{2i}, which equals P (1 − q^{2t}) whenever 1 − q² ≠ 0
    let noise = if one_minus_q2 == 0.0 {
        k * sigma_theta * sigma_theta * t as f64
    } else {
        k * sigma_theta * sigma_theta * (1.0 - q2t) / one_minus_q2
    };
    let convergent = eta * k > 0.0 && eta * k < 2.0;
    NoisyMeanSq {
        value: q2t * eps0 * eps0 + noise,
        plateau: if convergent { plateau(eta, k, sigma_theta) } else { f64::INFINITY },
        convergent,
    }
}

/// Late-time `E|ε| = √(2/π) σ / √(2η − η²K)` (half-normal mean).
pub fn late_time_mean_abs(eta: f64, k: f64, sigma_theta: f64) -> f64 {
    (2.0 / std::f64::consts::PI).sqrt() * sigma_theta / (2.0 * eta - eta * eta * k).sqrt()
}

/// Late-time standard deviation of `ε`: `σ / √(η (2 − ηK))`.
pub fn late_time_std(eta: f64, k: f64, sigma_theta: f64) -> f64 {
    plateau(eta, k, sigma_theta).sqrt()
}

/// Interval for the sample mean of `|ε_i|` where `ε_i ~ N(0, s_i²)` independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanInterval {
    pub center: f64,
    pub lower: f64,
    pub upper: f64,
}

impl MeanInterval {
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }
}

/// Normal-approximation interval for the mean of half-normal draws with scales `s_i`.
///
/// Each `|ε_i|` has mean `s_i √(2/π)` and variance `s_i² (1 − 2/π)`.
pub fn half_normal_mean_interval(scales: &[f64], z: f64) -> MeanInterval {
    let n = scales.len() as f64;
    let two_over_pi = 2.0 / std::f64::consts::PI;
    let center = two_over_pi.sqrt() * scales.iter().sum::<f64>() / n;
    let se = ((1.0 - two_over_pi) * scales.iter().map(|s| s * s).sum::<f64>()).sqrt() / n;
    MeanInterval { center, lower: (center - z * se).max(0.0), upper: center + z * se }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TNoise {
    /// Crossover step; `+∞` without noise.
    pub value: f64,
    /// `0 < ηK < 1` and `σ ≥ 0`: the monotone-decay branch the formula assumes.
    pub valid: bool,
}

/// Step at which the noise band `σ √((1 − q^{2T}) / (η(2 − ηK)))` reaches the
/// noiseless residual `q^T ε(0)`:
/// `T = log(σ / √(ε(0)² (2η − η²K) + σ²)) / log(1 − ηK)`.
pub fn t_noise(eps0: f64, eta: f64, k: f64, sigma_theta: f64) -> TNoise {
    let valid = eta * k > 0.0 && eta * k < 1.0 && sigma_theta >= 0.0;
    if sigma_theta == 0.0 {
        return TNoise { value: f64::INFINITY, valid };
    }
    let c = 2.0 * eta - eta * eta * k;
    let value = (sigma_theta / (eps0 * eps0 * c + sigma_theta * sigma_theta).sqrt()).ln() / (1.0 - eta * k).ln();
    TNoise { value, valid }
}

/// `|q^T ε(0) − σ √((1 − q^{2T}) / (η(2 − ηK)))|` with `q = 1 − ηK`; zero at `T = T_noise`.
pub fn t_noise_balance_residual(eps0: f64, eta: f64, k: f64, sigma_theta: f64, t: f64) -> f64 {
    let q = 1.0 - eta * k;
    let decay = q.powf(t) * eps0;
    let band = sigma_theta * ((1.0 - q.powf(2.0 * t)) / (eta * (2.0 - eta * k))).sqrt();
    (decay - band).abs()
}

/// Residual scale at the crossover, `2 (1 − ηK)^{T_noise} ε(0) = 2σ ε(0) / √(ε(0)² (2η − η²K) + σ²)`.
pub fn eps_at_t_noise(eps0: f64, eta: f64, k: f64, sigma_theta: f64) -> f64 {
    let c = 2.0 * eta - eta * eta * k;
    2.0 * sigma_theta * eps0.abs() / (eps0 * eps0 * c + sigma_theta * sigma_theta).sqrt()
}

/// Predicted `log(1/ε_r)` after `steps` iterations: `2 η L Tr O² T / N²`.
pub fn precision_log_inv(eta: f64, n_layers: usize, tr2: f64, dim: usize, steps: f64) -> f64 {
    2.0 * eta * n_layers as f64 * tr2 * steps / (dim as f64).powi(2)
}

/// Iterations needed to reach relative residual `eps_r`.
pub fn precision_steps(eta: f64, n_layers: usize, tr2: f64, dim: usize, eps_r: f64) -> f64 {
    (1.0 / eps_r).ln() / precision_log_inv(eta, n_layers, tr2, dim, 1.0)
}

/// Inputs and closed-form kernel statistics for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub kbar: f64,
    pub kbar_large_n: f64,
    pub delta_k: f64,
    pub delta_mu: f64,
    pub eta: f64,
    pub n_layers: usize,
    pub dim: usize,
    pub tr_o: f64,
    pub tr_o2: f64,
    pub tr_o4: f64,
    pub sigma_theta: f64,
    pub eps0: f64,
}

impl TheoryReport {
    pub fn new(n_layers: usize, dim: usize, traces: TracePowers, eta: f64, sigma_theta: f64, eps0: f64) -> Result<Self> {
        if !dim.is_power_of_two() {
            return Err(Error::invalid(format!("dimension {dim} is not a power of two")));
        }
        if sigma_theta < 0.0 || !eta.is_finite() || !eps0.is_finite() {
            return Err(Error::invalid("eta, eps0 must be finite and sigma_theta >= 0"));
        }
        Ok(Self {
            kbar: kbar_exact(n_layers, &traces, dim)?,
            kbar_large_n: kbar_large_n(n_layers, &traces, dim),
            delta_k: delta_k(n_layers, &traces, dim),
            delta_mu: delta_mu(n_layers, &traces, dim),
            eta,
            n_layers,
            dim,
            tr_o: traces.tr,
            tr_o2: traces.tr2,
            tr_o4: traces.tr4,
            sigma_theta,
            eps0,
        })
    }

    pub fn traces(&self) -> TracePowers {
        TracePowers { tr: self.tr_o, tr2: self.tr_o2, tr4: self.tr_o4 }
    }

    pub fn decay(&self, t: u32) -> Decay {
        decay_prediction(self.eps0, self.eta, self.kbar, t)
    }

    pub fn noisy_mean_sq(&self, t: u32) -> NoisyMeanSq {
        noisy_mean_sq(self.eps0, self.eta, self.kbar, self.sigma_theta, t)
    }

    pub fn t_noise(&self) -> TNoise {
        t_noise(self.eps0, self.eta, self.kbar, self.sigma_theta)
    }

    pub fn precision_log_inv(&self, steps: f64) -> f64 {
        precision_log_inv(self.eta, self.n_layers, self.tr_o2, self.dim, steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub ratio: f64,
    pub pass: bool,
}

impl Condition {
    fn from_ratio(ratio: f64) -> Self {
        Self { ratio, pass: ratio.is_finite() && ratio <= CONCENTRATION_THRESHOLD }
    }
}

/// Validity of the frozen-kernel picture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationCheck {
    /// `ΔK / K̄`, small when `L ≫ 1`.
    pub kernel: Condition,
    /// `η √(Tr O²) / N · |ε(0)|`, the second-order (meta-kernel) correction.
    pub meta_kernel: Condition,
}

pub fn concentration_check(report: &TheoryReport) -> ConcentrationCheck {
    let kernel = report.delta_k / report.kbar_large_n;
    let meta = report.eta * report.tr_o2.sqrt() / report.dim as f64 * report.eps0.abs();
    ConcentrationCheck { kernel: Condition::from_ratio(kernel), meta_kernel: Condition::from_ratio(meta) }
}
