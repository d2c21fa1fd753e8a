//! Finite-width multilayer perceptron with LeCun initialization, its neural
//! tangent kernel, and full-batch gradient descent on a mean-square loss.
//!
//! Layers are numbered `1..=L`. Preactivations follow
//! `z¹ = b¹ + W¹x` and `zˡ⁺¹ = bˡ⁺¹ + Wˡ⁺¹σ(zˡ)`; the network output is `zᴸ`.
//! Weights are drawn with variance `C_W / fan_in` and biases with variance `C_b`.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::stats::{log_log_fit, mean, sample_std, LinearFit};

/// Loss above which a training run is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;
/// Largest dataset accepted by [`ntk_train`].
pub const MAX_TRAIN_SAMPLES: usize = 32;
pub const PSD_TOL: f64 = 1e-8;
/// Relative size at which a residual mode leaves the decay fit.
pub const MODE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Linear,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    activation: Activation,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> DMatrix<f64> {
    if std == 0.0 {
        return DMatrix::zeros(rows, cols);
    }
    DMatrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

impl Mlp {
    /// LeCun-initialized network with layer widths `n₀, …, n_L`.
    pub fn lecun(widths: &[usize], activation: Activation, c_w: f64, c_b: f64, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("need at least input and output widths, all positive"));
        }
        if !(c_w >= 0.0 && c_b >= 0.0 && c_w.is_finite() && c_b.is_finite()) {
            return Err(Error::invalid("initialization variances must be finite and non-negative"));
        }
        let mut rng = rng_from_seed(seed);
        let mut weights = Vec::with_capacity(widths.len() - 1);
        let mut biases = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            weights.push(gaussian_matrix(fan_out, fan_in, (c_w / fan_in as f64).sqrt(), &mut rng));
            biases.push(gaussian_matrix(fan_out, 1, c_b.sqrt(), &mut rng).column(0).into_owned());
        }
        Ok(Self { widths: widths.to_vec(), weights, biases, activation })
    }

    /// Equal hidden widths, `C_W = 1`, `C_b = 0`.
    pub fn equal_width(n_in: usize, width: usize, hidden_layers: usize, n_out: usize, activation: Activation, seed: u64) -> Result<Self> {
        let mut widths = vec![n_in];
        widths.extend(std::iter::repeat(width).take(hidden_layers));
        widths.push(n_out);
        Self::lecun(&widths, activation, 1.0, 0.0, seed)
    }

    pub fn from_parameters(weights: Vec<DMatrix<f64>>, biases: Vec<DVector<f64>>, activation: Activation) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::invalid("weights and biases must be non-empty and of equal count"));
        }
        let mut widths = vec![weights[0].ncols()];
        for (k, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != widths[k] {
                return Err(Error::Dimension { expected: widths[k], actual: w.ncols() });
            }
            if b.len() != w.nrows() {
                return Err(Error::Dimension { expected: w.nrows(), actual: b.len() });
            }
            widths.push(w.nrows());
        }
        Ok(Self { widths, weights, biases, activation })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.widths[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// `W^(ℓ)` for `ℓ` in `1..=L`.
    pub fn weight(&self, layer: usize) -> &DMatrix<f64> {
        &self.weights[layer - 1]
    }

    pub fn bias(&self, layer: usize) -> &DVector<f64> {
        &self.biases[layer - 1]
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n_inputs() {
            return Err(Error::Dimension { expected: self.n_inputs(), actual: x.len() });
        }
        Ok(())
    }

    fn activate(&self, z: &DVector<f64>) -> DVector<f64> {
        z.map(|v| self.activation.apply(v))
    }

    /// Preactivations `z¹, …, zᴸ`.
    pub fn forward(&self, x: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        self.check_input(x)?;
        let mut zs: Vec<DVector<f64>> = Vec::with_capacity(self.depth());
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = if k == 0 { w * x + b } else { w * self.activate(&zs[k - 1]) + b };
            zs.push(z);
        }
        Ok(zs)
    }

    pub fn forward_batch(&self, xs: &[DVector<f64>]) -> Result<Vec<Vec<DVector<f64>>>> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    pub fn output(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.forward(x)?.pop().unwrap())
    }

    /// `dzᴸ/dzˡ` for every `ℓ` in `1..=L`, index `ℓ − 1`.
    fn output_gradients_from(&self, zs: &[DVector<f64>]) -> Vec<DMatrix<f64>> {
        let depth = self.depth();
        let mut gs = vec![DMatrix::identity(self.n_outputs(), self.n_outputs()); depth];
        for k in (0..depth - 1).rev() {
            let deriv = zs[k].map(|v| self.activation.derivative(v));
            let mut g = &gs[k + 1] * &self.weights[k + 1];
            for (c, d) in deriv.iter().enumerate() {
                g.column_mut(c).scale_mut(*d);
            }
            gs[k] = g;
        }
        gs
    }

    /// Jacobian `dzᴸ/dzˡ`, an `n_L × n_ℓ` matrix.
    pub fn output_gradient(&self, x: &DVector<f64>, layer: usize) -> Result<DMatrix<f64>> {
        if layer == 0 || layer > self.depth() {
            return Err(Error::OutOfRange { index: layer, len: self.depth() + 1 });
        }
        let zs = self.forward(x)?;
        Ok(self.output_gradients_from(&zs).swap_remove(layer - 1))
    }

    /// Layer inputs `a⁰ = x, a¹ = σ(z¹), …, aᴸ⁻¹`.
    fn layer_inputs(&self, x: &DVector<f64>, zs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut a = Vec::with_capacity(self.depth());
        a.push(x.clone());
        for z in &zs[..self.depth() - 1] {
            a.push(self.activate(z));
        }
        a
    }

    /// Kernel over all (sample, output) pairs, flattened as `α·n_L + i`.
    pub fn ntk(&self, xs: &[DVector<f64>]) -> Result<NtkMatrix> {
        let per_sample: Vec<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> = xs
            .iter()
            .map(|x| {
                let zs = self.forward(x)?;
                Ok((self.layer_inputs(x, &zs), self.output_gradients_from(&zs)))
            })
            .collect::<Result<_>>()?;
        let n_out = self.n_outputs();
        let dim = xs.len() * n_out;
        let mut h = DMatrix::zeros(dim, dim);
        for a in 0..xs.len() {
            for b in a..xs.len() {
                let (ia, ga) = &per_sample[a];
                let (ib, gb) = &per_sample[b];
                let mut block = DMatrix::zeros(n_out, n_out);
                for k in 0..self.depth() {
                    let overlap = ia[k].dot(&ib[k]) + 1.0;
                    block += (&ga[k] * gb[k].transpose()) * overlap;
                }
                for i in 0..n_out {
                    for j in 0..n_out {
                        h[(a * n_out + i, b * n_out + j)] = block[(i, j)];
                        h[(b * n_out + j, a * n_out + i)] = block[(i, j)];
                    }
                }
            }
        }
        Ok(NtkMatrix { n_outputs: n_out, n_samples: xs.len(), h })
    }

    /// Flattened residuals `zᴸ(x_α) − y_α`, index `α·n_L + i`.
    pub fn residuals(&self, data: &Dataset) -> Result<DVector<f64>> {
        let n_out = self.n_outputs();
        let mut r = DVector::zeros(data.len() * n_out);
        for (a, (x, y)) in data.inputs.iter().zip(&data.targets).enumerate() {
            if y.len() != n_out {
                return Err(Error::Dimension { expected: n_out, actual: y.len() });
            }
            let out = self.output(x)?;
            for i in 0..n_out {
                r[a * n_out + i] = out[i] - y[i];
            }
        }
        Ok(r)
    }

    /// Gradient of `½ Σ ε²` with respect to every weight and bias.
    fn loss_gradient(&self, data: &Dataset) -> Result<(Vec<DMatrix<f64>>, Vec<DVector<f64>>)> {
        let mut dw: Vec<DMatrix<f64>> = self.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
        let mut db: Vec<DVector<f64>> = self.biases.iter().map(|b| DVector::zeros(b.len())).collect();
        for (x, y) in data.inputs.iter().zip(&data.targets) {
            let zs = self.forward(x)?;
            let a = self.layer_inputs(x, &zs);
            let mut delta = &zs[self.depth() - 1] - y;
            for k in (0..self.depth()).rev() {
                dw[k].ger(1.0, &delta, &a[k], 1.0);
                db[k] += &delta;
                if k > 0 {
                    let back = self.weights[k].tr_mul(&delta);
                    delta = back.zip_map(&zs[k - 1], |g, z| g * self.activation.derivative(z));
                }
            }
        }
        Ok((dw, db))
    }

    fn descend(&mut self, grad: &(Vec<DMatrix<f64>>, Vec<DVector<f64>>), eta: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.0) {
            *w -= g * eta;
        }
        for (b, g) in self.biases.iter_mut().zip(&grad.1) {
            b.axpy(-eta, g, 1.0);
        }
    }

    /// `‖W(other) − W(self)‖ / ‖W(self)‖` over all weight matrices (Frobenius).
    pub fn relative_weight_displacement(&self, other: &Mlp) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (w0, w1) in self.weights.iter().zip(&other.weights) {
            num += (w1 - w0).norm_squared();
            den += w0.norm_squared();
        }
        (num / den).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NtkMatrix {
    pub n_outputs: usize,
    pub n_samples: usize,
    pub h: DMatrix<f64>,
}

impl NtkMatrix {
    pub fn symmetry_defect(&self) -> f64 {
        (&self.h - self.h.transpose()).abs().max()
    }

    /// Eigenvalues and eigenvectors, eigenvalues in ascending order.
    pub fn eigen(&self) -> (DVector<f64>, DMatrix<f64>) {
        let eig = SymmetricEigen::new(self.h.clone());
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
        let vectors = DMatrix::from_columns(&order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
        (values, vectors)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigen().0.max()
    }

    /// PSD up to `PSD_TOL` relative to the largest eigenvalue magnitude.
    pub fn is_psd(&self) -> bool {
        let (vals, _) = self.eigen();
        let scale = vals.amax().max(1.0);
        vals.min() >= -PSD_TOL * scale
    }

    pub fn frobenius(&self) -> f64 {
        self.h.norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<DVector<f64>>,
    pub targets: Vec<DVector<f64>>,
}

impl Dataset {
    pub fn new(inputs: Vec<DVector<f64>>, targets: Vec<DVector<f64>>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::invalid("dataset needs equal, non-zero numbers of inputs and targets"));
        }
        Ok(Self { inputs, targets })
    }

    /// Gaussian inputs scaled to unit norm and scalar targets `sin(Σx)`.
    pub fn synthetic(n_samples: usize, n_in: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let inputs: Vec<DVector<f64>> = (0..n_samples)
            .map(|_| {
                let v = DVector::from_fn(n_in, |_, _| rng.sample::<f64, _>(StandardNormal));
                let norm = v.norm();
                v / norm
            })
            .collect();
        let targets = inputs.iter().map(|x| DVector::from_element(1, x.sum().sin())).collect();
        Self::new(inputs, targets)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum LearningRate {
    Fixed(f64),
    /// `fraction / λ_max(H(0))`.
    InverseMaxEigen(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NtkTrainConfig {
    pub learning_rate: LearningRate,
    pub steps: usize,
    /// Kernel is recomputed every this many steps (and at the last step); 0 keeps only `H(0)`.
    pub ntk_every: usize,
}

impl Default for NtkTrainConfig {
    fn default() -> Self {
        Self { learning_rate: LearningRate::InverseMaxEigen(1.0), steps: 200, ntk_every: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NtkTrace {
    pub eta: f64,
    /// Residual vectors for steps `0..=T` (or up to divergence).
    pub residuals: Vec<DVector<f64>>,
    pub losses: Vec<f64>,
    pub h0: NtkMatrix,
    /// `(step, ‖H(t) − H(0)‖ / ‖H(0)‖)`.
    pub drift: Vec<(usize, f64)>,
    pub diverged_at: Option<usize>,
    pub weight_displacement: f64,
    pub final_model: Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeRate {
    pub eigenvalue: f64,
    /// `ln(1 − ηλ)`.
    pub predicted: f64,
    /// Least-squares slope of `ln|c(t)|`.
    pub fitted: f64,
}

impl NtkTrace {
    pub fn max_drift(&self) -> f64 {
        self.drift.iter().map(|d| d.1).fold(0.0, f64::max)
    }

    pub fn residual_norms(&self) -> Vec<f64> {
        self.residuals.iter().map(|r| r.norm()).collect()
    }

    /// Per-mode decay of the residual in the eigenbasis of `H(0)` over steps `0..=window`,
    /// for modes with `ηλ ≥ min_rate`. A mode's fit stops once it has shrunk by `MODE_FLOOR`.
    pub fn mode_rates(&self, window: usize, min_rate: f64) -> Vec<ModeRate> {
        let window = window.min(self.residuals.len() - 1);
        let (vals, vecs) = self.h0.eigen();
        (0..vals.len())
            .filter(|&k| self.eta * vals[k] >= min_rate && self.eta * vals[k] < 1.0)
            .map(|k| {
                let v = vecs.column(k);
                let coeffs: Vec<f64> = self.residuals[..=window].iter().map(|r| v.dot(r).abs()).collect();
                let end = coeffs.iter().position(|c| *c < MODE_FLOOR * coeffs[0]).unwrap_or(coeffs.len()).max(2);
                let ts: Vec<f64> = (0..end).map(|t| t as f64).collect();
                let logs: Vec<f64> = coeffs[..end].iter().map(|c| c.ln()).collect();
                ModeRate {
                    eigenvalue: vals[k],
                    predicted: (1.0 - self.eta * vals[k]).ln(),
                    fitted: crate::stats::linear_fit(&ts, &logs).slope,
                }
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,eps_norm,loss,ntk_drift")?;
        for (t, (r, l)) in self.residuals.iter().zip(&self.losses).enumerate() {
            match self.drift.iter().find(|d| d.0 == t) {
                Some(d) => writeln!(w, "{t},{},{l},{}", r.norm(), d.1)?,
                None => writeln!(w, "{t},{},{l},", r.norm())?,
            }
        }
        Ok(())
    }
}

/// Full-batch gradient descent on `½ Σ ε²`.
pub fn ntk_train(mlp: &Mlp, data: &Dataset, cfg: &NtkTrainConfig) -> Result<NtkTrace> {
    if data.len() > MAX_TRAIN_SAMPLES {
        return Err(Error::invalid(format!("at most {MAX_TRAIN_SAMPLES} samples, got {}", data.len())));
    }
    let h0 = mlp.ntk(&data.inputs)?;
    let h0_norm = h0.frobenius();
    let eta = match cfg.learning_rate {
        LearningRate::Fixed(e) => e,
        LearningRate::InverseMaxEigen(f) => f / h0.max_eigenvalue(),
    };
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be finite and non-negative, got {eta}")));
    }
    let mut model = mlp.clone();
    let mut residuals = vec![model.residuals(data)?];
    let mut losses = vec![0.5 * residuals[0].norm_squared()];
    let mut drift = vec![(0, 0.0)];
    let mut diverged_at = None;
    for t in 1..=cfg.steps {
        let grad = model.loss_gradient(data)?;
        model.descend(&grad, eta);
        let r = model.residuals(data)?;
        let loss = 0.5 * r.norm_squared();
        residuals.push(r);
        losses.push(loss);
        if !(loss <= DIVERGENCE_LOSS) {
            diverged_at = Some(t);
            break;
        }
        if cfg.ntk_every > 0 && (t % cfg.ntk_every == 0 || t == cfg.steps) {
            let h = model.ntk(&data.inputs)?;
            drift.push((t, (&h.h - &h0.h).norm() / h0_norm));
        }
    }
    let weight_displacement = mlp.relative_weight_displacement(&model);
    Ok(NtkTrace { eta, residuals, losses, h0, drift, diverged_at, weight_displacement, final_model: model })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradVariancePoint {
    pub width: usize,
    /// Mean of `dzᴸ₀/dzˡⱼ` over trials and units.
    pub mean: f64,
    pub mean_se: f64,
    /// Mean of `(dzᴸ₀/dzˡⱼ)²`.
    pub second_moment: f64,
    pub second_moment_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradVarianceFit {
    pub points: Vec<GradVariancePoint>,
    pub fit: LinearFit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeNetwork {
    pub n_in: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
}

impl Default for ProbeNetwork {
    fn default() -> Self {
        Self { n_in: 4, hidden_layers: 2, activation: Activation::Tanh }
    }
}

/// Closed form of `E[(dzᴸ/dzˡ)²]` for a linear network with equal hidden width `n`
/// and a single output: `C_W^(L−ℓ) / n`.
pub fn linear_grad_variance(c_w: f64, width: usize, depth: usize, layer: usize) -> f64 {
    if layer == depth {
        return 1.0;
    }
    c_w.powi((depth - layer) as i32) / width as f64
}

/// Second moment of the output gradient at `layer` versus hidden width, with a log-log fit.
pub fn grad_variance_experiment(widths: &[usize], net: ProbeNetwork, layer: usize, trials: usize, seed: u64) -> Result<GradVarianceFit> {
    if trials < 100 {
        return Err(Error::invalid(format!("need at least 100 trials per width, got {trials}")));
    }
    if widths.len() < 2 {
        return Err(Error::invalid("need at least two widths to fit"));
    }
    if layer == 0 || layer > net.hidden_layers + 1 {
        return Err(Error::OutOfRange { index: layer, len: net.hidden_layers + 2 });
    }
    let points = widths
        .iter()
        .enumerate()
        .map(|(wi, &width)| {
            let samples: Vec<(f64, f64)> = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let s = derive_seed(derive_seed(seed, wi as u64), t as u64);
                    let mlp = Mlp::equal_width(net.n_in, width, net.hidden_layers, 1, net.activation, s)?;
                    let mut rng = rng_from_seed(s ^ 0x5eed);
                    let x = DVector::from_fn(net.n_in, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let g = mlp.output_gradient(&x, layer)?;
                    let row = g.row(0);
                    Ok((row.mean(), row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64))
                })
                .collect::<Result<_>>()?;
            let firsts: Vec<f64> = samples.iter().map(|s| s.0).collect();
            let seconds: Vec<f64> = samples.iter().map(|s| s.1).collect();
            Ok(GradVariancePoint {
                width,
                mean: mean(&firsts),
                mean_se: sample_std(&firsts) / (trials as f64).sqrt(),
                second_moment: mean(&seconds),
                second_moment_se: sample_std(&seconds) / (trials as f64).sqrt(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = points.iter().map(|p| p.width as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.second_moment).collect();
    Ok(GradVarianceFit { fit: log_log_fit(&xs, &ys), points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluctuationPoint {
    pub width: usize,
    pub mean_norm: f64,
    /// `√E‖H − H̄‖² / ‖H̄‖` (Frobenius).
    pub relative_fluctuation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationFit {
    pub points: Vec<FluctuationPoint>,
    pub fit: LinearFit,
}

/// Initialization-to-initialization spread of the kernel on fixed inputs versus width.
pub fn ntk_fluctuation(widths: &[usize], net: ProbeNetwork, inputs: &[DVector<f64>], trials: usize, seed: u64) -> Result<FluctuationFit> {
    if trials < 2 || widths.len() < 2 {
        return Err(Error::invalid("need at least two trials and two widths"));
    }
    let points = widths
        .iter()
        .enumerate()
        .map(|(wi, &width)| {
            let hs: Vec<DMatrix<f64>> = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let s = derive_seed(derive_seed(seed, wi as u64), t as u64);
                    Ok(Mlp::equal_width(net.n_in, width, net.hidden_layers, 1, net.activation, s)?.ntk(inputs)?.h)
                })
                .collect::<Result<_>>()?;
            let mut hbar = DMatrix::zeros(hs[0].nrows(), hs[0].ncols());
            for h in &hs {
                hbar += h;
            }
            hbar /= trials as f64;
            let var = hs.iter().map(|h| (h - &hbar).norm_squared()).sum::<f64>() / (trials - 1) as f64;
            Ok(FluctuationPoint { width, mean_norm: hbar.norm(), relative_fluctuation: var.sqrt() / hbar.norm() })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = points.iter().map(|p| p.width as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.relative_fluctuation).collect();
    Ok(FluctuationFit { fit: log_log_fit(&xs, &ys), points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LazinessPoint {
    pub width: usize,
    pub weight_displacement: f64,
    pub max_drift: f64,
    pub loss_ratio: f64,
}

/// Relative weight motion and kernel drift after a fixed training budget, per width.
pub fn laziness_vs_width(widths: &[usize], net: ProbeNetwork, data: &Dataset, cfg: &NtkTrainConfig, seed: u64) -> Result<Vec<LazinessPoint>> {
    widths
        .par_iter()
        .enumerate()
        .map(|(wi, &width)| {
            let mlp = Mlp::equal_width(net.n_in, width, net.hidden_layers, 1, net.activation, derive_seed(seed, wi as u64))?;
            let trace = ntk_train(&mlp, data, cfg)?;
            Ok(LazinessPoint {
                width,
                weight_displacement: trace.weight_displacement,
                max_drift: trace.max_drift(),
                loss_ratio: trace.losses.last().unwrap() / trace.losses[0],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut a: Vec<f64> = x.to_vec();
        let mut z = Vec::new();
        for l in 1..=mlp.depth() {
            let w = mlp.weight(l);
            let b = mlp.bias(l);
            z = (0..w.nrows())
                .map(|i| {
                    let mut acc = b[i];
                    for j in 0..w.ncols() {
                        acc += w[(i, j)] * a[j];
                    }
                    acc
                })
                .collect();
            a = z.iter().map(|&v| mlp.activation().apply(v)).collect();
        }
        z
    }

    fn random_input(n: usize, seed: u64) -> DVector<f64> {
        let mut rng = rng_from_seed(seed);
        DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = Mlp::lecun(&[3, 5, 2], Activation::Tanh, 0.0, 0.0, 1).unwrap();
        for z in mlp.forward(&random_input(3, 2)).unwrap() {
            assert!(z.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_affine_layer() {
        let w = DMatrix::from_row_slice(1, 2, &[0.5, -2.0]);
        let b = DVector::from_vec(vec![0.25]);
        let mlp = Mlp::from_parameters(vec![w], vec![b], Activation::Tanh).unwrap();
        let out = mlp.output(&DVector::from_vec(vec![3.0, 1.0])).unwrap();
        assert_eq!(out[0], 0.5 * 3.0 - 2.0 + 0.25);
    }

    #[test]
    fn forward_matches_loop_oracle() {
        for act in [Activation::Tanh, Activation::Linear] {
            let mlp = Mlp::lecun(&[4, 7, 6, 3], act, 1.3, 0.2, 11).unwrap();
            let x = random_input(4, 5);
            let fast = mlp.output(&x).unwrap();
            let slow = naive_forward(&mlp, x.as_slice());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn dimension_checks() {
        let mlp = Mlp::lecun(&[3, 4, 1], Activation::Tanh, 1.0, 0.0, 0).unwrap();
        assert!(matches!(mlp.forward(&DVector::zeros(2)), Err(Error::Dimension { .. })));
        assert!(mlp.output_gradient(&DVector::zeros(3), 0).is_err());
        assert!(mlp.output_gradient(&DVector::zeros(3), 3).is_err());
        let bad = Mlp::from_parameters(vec![DMatrix::zeros(2, 3), DMatrix::zeros(1, 3)], vec![DVector::zeros(2), DVector::zeros(1)], Activation::Tanh);
        assert!(bad.is_err());
    }

    #[test]
    fn init_variance() {
        let fan_in = 200;
        let mlp = Mlp::lecun(&[fan_in, 300, 1], Activation::Tanh, 2.0, 0.5, 4).unwrap();
        let w = mlp.weight(1);
        let var = w.norm_squared() / w.len() as f64;
        assert!((var * fan_in as f64 / 2.0 - 1.0).abs() < 0.02);
        let b = mlp.bias(1);
        assert!((b.norm_squared() / b.len() as f64 / 0.5 - 1.0).abs() < 0.25);
    }

    #[test]
    fn output_gradient_trivial_cases() {
        let mlp = Mlp::lecun(&[3, 5, 2], Activation::Linear, 1.0, 0.0, 9).unwrap();
        let x = random_input(3, 1);
        assert_eq!(mlp.output_gradient(&x, 2).unwrap(), DMatrix::identity(2, 2));
        assert_eq!(mlp.output_gradient(&x, 1).unwrap(), mlp.weight(2).clone());
    }

    #[test]
    fn output_gradient_matches_finite_differences() {
        let mlp = Mlp::lecun(&[3, 6, 5, 2], Activation::Tanh, 1.5, 0.1, 21).unwrap();
        let x = random_input(3, 8);
        let zs = mlp.forward(&x).unwrap();
        let h = 1e-6;
        for layer in 1..=3 {
            let g = mlp.output_gradient(&x, layer).unwrap();
            for j in 0..zs[layer - 1].len() {
                let run = |d: f64| {
                    let mut z = zs[layer - 1].clone();
                    z[j] += d;
                    for l in layer + 1..=3 {
                        z = mlp.weight(l) * z.map(|v| v.tanh()) + mlp.bias(l);
                    }
                    z
                };
                let fd = (run(h) - run(-h)) / (2.0 * h);
                for i in 0..2 {
                    assert!((fd[i] - g[(i, j)]).abs() < 1e-8, "layer {layer} ({i},{j})");
                }
            }
        }
    }

    fn flat_params(mlp: &Mlp) -> Vec<f64> {
        let mut p = Vec::new();
        for l in 1..=mlp.depth() {
            p.extend(mlp.weight(l).iter());
            p.extend(mlp.bias(l).iter());
        }
        p
    }

    fn with_params(mlp: &Mlp, p: &[f64]) -> Mlp {
        let mut it = p.iter().copied();
        let mut ws = Vec::new();
        let mut bs = Vec::new();
        for l in 1..=mlp.depth() {
            let w = mlp.weight(l);
            ws.push(DMatrix::from_iterator(w.nrows(), w.ncols(), it.by_ref().take(w.len())));
            bs.push(DVector::from_iterator(w.nrows(), it.by_ref().take(w.nrows())));
        }
        Mlp::from_parameters(ws, bs, mlp.activation()).unwrap()
    }

    #[test]
    fn ntk_matches_jacobian_oracle() {
        let mlp = Mlp::lecun(&[3, 5, 4, 2], Activation::Tanh, 1.2, 0.3, 31).unwrap();
        let xs: Vec<DVector<f64>> = (0..3).map(|s| random_input(3, 100 + s)).collect();
        let k = mlp.ntk(&xs).unwrap();
        let p0 = flat_params(&mlp);
        let h = 1e-6;
        let mut jac = DMatrix::zeros(6, p0.len());
        for m in 0..p0.len() {
            let mut pp = p0.clone();
            pp[m] += h;
            let mut pm = p0.clone();
            pm[m] -= h;
            let (np, nm) = (with_params(&mlp, &pp), with_params(&mlp, &pm));
            for (a, x) in xs.iter().enumerate() {
                let d = (np.output(x).unwrap() - nm.output(x).unwrap()) / (2.0 * h);
                for i in 0..2 {
                    jac[(a * 2 + i, m)] = d[i];
                }
            }
        }
        let oracle = &jac * jac.transpose();
        assert!((&oracle - &k.h).abs().max() < 1e-7);
        assert!(k.symmetry_defect() == 0.0);
        assert!(k.is_psd());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mlp = Mlp::lecun(&[2, 4, 3, 1], Activation::Tanh, 1.0, 0.2, 5).unwrap();
        let data = Dataset::synthetic(4, 2, 6).unwrap();
        let (dw, db) = mlp.loss_gradient(&data).unwrap();
        let analytic: Vec<f64> = (0..mlp.depth()).flat_map(|k| dw[k].iter().chain(db[k].iter()).copied().collect::<Vec<_>>()).collect();
        let p0 = flat_params(&mlp);
        let loss = |p: &[f64]| 0.5 * with_params(&mlp, p).residuals(&data).unwrap().norm_squared();
        let h = 1e-6;
        for m in 0..p0.len() {
            let mut pp = p0.clone();
            pp[m] += h;
            let mut pm = p0.clone();
            pm[m] -= h;
            assert!(((loss(&pp) - loss(&pm)) / (2.0 * h) - analytic[m]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_rate_keeps_residual() {
        let mlp = Mlp::equal_width(3, 16, 1, 1, Activation::Tanh, 3).unwrap();
        let data = Dataset::synthetic(4, 3, 2).unwrap();
        let trace = ntk_train(&mlp, &data, &NtkTrainConfig { learning_rate: LearningRate::Fixed(0.0), steps: 5, ntk_every: 1 }).unwrap();
        for r in &trace.residuals {
            assert_eq!(r, &trace.residuals[0]);
        }
        assert_eq!(trace.max_drift(), 0.0);
    }

    #[test]
    fn affine_model_decays_exactly() {
        let mlp = Mlp::lecun(&[3, 1], Activation::Linear, 1.0, 0.5, 8).unwrap();
        let data = Dataset::new(vec![DVector::from_vec(vec![0.3, -0.2, 0.5])], vec![DVector::from_element(1, 2.0)]).unwrap();
        let cfg = NtkTrainConfig { learning_rate: LearningRate::Fixed(0.3), steps: 30, ntk_every: 0 };
        let trace = ntk_train(&mlp, &data, &cfg).unwrap();
        let h = trace.h0.h[(0, 0)];
        assert!((h - (0.09 + 0.04 + 0.25 + 1.0)).abs() < 1e-14);
        let e0 = trace.residuals[0][0];
        for (t, r) in trace.residuals.iter().enumerate() {
            let expect = (1.0 - 0.3 * h).powi(t as i32) * e0;
            assert!((r[0] - expect).abs() < 1e-12 * e0.abs().max(1.0));
        }
    }

    #[test]
    fn divergence_is_flagged() {
        let mlp = Mlp::lecun(&[2, 1], Activation::Linear, 1.0, 0.5, 1).unwrap();
        let data = Dataset::synthetic(3, 2, 1).unwrap();
        let cfg = NtkTrainConfig { learning_rate: LearningRate::InverseMaxEigen(3.0), steps: 500, ntk_every: 0 };
        let trace = ntk_train(&mlp, &data, &cfg).unwrap();
        assert!(trace.diverged_at.is_some());
        assert!(*trace.losses.last().unwrap() > DIVERGENCE_LOSS);
    }

    #[test]
    fn dataset_size_guard() {
        let mlp = Mlp::equal_width(2, 4, 1, 1, Activation::Tanh, 1).unwrap();
        let data = Dataset::synthetic(33, 2, 1).unwrap();
        assert!(ntk_train(&mlp, &data, &NtkTrainConfig::default()).is_err());
    }

    #[test]
    fn linear_depth_one_variance() {
        let net = ProbeNetwork { n_in: 3, hidden_layers: 1, activation: Activation::Linear };
        let fit = grad_variance_experiment(&[20, 80], net, 1, 400, 2).unwrap();
        for p in &fit.points {
            let exact = linear_grad_variance(1.0, p.width, 2, 1);
            assert!((p.second_moment - exact).abs() < 4.0 * p.second_moment_se);
            assert!(p.mean.abs() < 4.0 * p.mean_se);
        }
    }

    #[test]
    fn trace_csv() {
        let mlp = Mlp::equal_width(2, 8, 1, 1, Activation::Tanh, 1).unwrap();
        let data = Dataset::synthetic(3, 2, 1).unwrap();
        let trace = ntk_train(&mlp, &data, &NtkTrainConfig { learning_rate: LearningRate::InverseMaxEigen(0.5), steps: 4, ntk_every: 2 }).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,eps_norm,loss,ntk_drift");
        assert_eq!(lines.len(), 6);
        assert!(lines[2].ends_with(','));
        assert!(!lines[3].ends_with(','));
    }
}
