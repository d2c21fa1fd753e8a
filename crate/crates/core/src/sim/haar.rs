//! Haar-distributed unitaries from the QR decomposition of a complex Ginibre
//! matrix, with the phases of `diag(R)` moved into `Q`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use super::operator::{DenseOperator, MAX_DENSE_QUBITS};
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng as SimRng};

/// Haar unitary of dimension `dim` drawn from `rng`.
pub fn haar_matrix<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<Complex64> {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let ginibre = DMatrix::<Complex64>::from_fn(dim, dim, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re * scale, im * scale)
    });
    let qr = ginibre.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        let d = r[(j, j)];
        let norm = d.norm();
        let phase = if norm > 0.0 { d / norm } else { Complex64::new(1.0, 0.0) };
        for i in 0..dim {
            q[(i, j)] *= phase;
        }
    }
    q
}

/// Haar unitary on `n_qubits`, deterministic in `seed`.
pub fn haar_unitary(n_qubits: usize, seed: u64) -> Result<DenseOperator> {
    let mut rng = rng_from_seed(seed);
    haar_unitary_with(n_qubits, &mut rng)
}

pub fn haar_unitary_with(n_qubits: usize, rng: &mut SimRng) -> Result<DenseOperator> {
    if n_qubits > MAX_DENSE_QUBITS {
        return Err(Error::SizeGuard { n_qubits, limit: MAX_DENSE_QUBITS });
    }
    DenseOperator::unitary(n_qubits, haar_matrix(1 << n_qubits, rng))
}

/// `E|U₀₀|⁴` over Haar 2×2 unitaries by Simpson quadrature in the angle parametrization
/// `|U₀₀| = cos ϑ`, `ϑ ∈ [0, π/2]`, whose marginal density is `sin 2ϑ`.
pub fn u00_fourth_moment_quadrature(intervals: usize) -> f64 {
    let m = intervals.max(2) & !1;
    let h = std::f64::consts::FRAC_PI_2 / m as f64;
    let f = |t: f64| t.cos().powi(4) * (2.0 * t).sin();
    let mut acc = f(0.0) + f(std::f64::consts::FRAC_PI_2);
    for i in 1..m {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    acc * h / 3.0
}
