//! Residual error `ε(θ) = <ψ0|U†(θ) O U(θ)|ψ0> − O₀`, its derivatives, the
//! kernel `K = Σ_ℓ (∂ε/∂θ_ℓ)²`, and the meta-kernel contraction `μ`.

use std::f64::consts::FRAC_PI_4;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ansatz::{AngleVector, LayeredAnsatz};
use crate::error::{ensure_dim, Error, Result};
use crate::sim::state::rotate;
use crate::sim::{Observable, StateVector};

/// Largest circuit for which the O(L²) Hessian is attempted.
pub const MAX_HESSIAN_LAYERS: usize = 256;
pub const MAX_HESSIAN_QUBITS: usize = 6;

/// `∂ε/∂θ_ℓ` for every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// Everything needed to evaluate `ε(θ)`.
#[derive(Debug, Clone)]
pub struct ResidualContext {
    ansatz: LayeredAnsatz,
    psi0: StateVector,
    observable: Observable,
    target: f64,
}

impl ResidualContext {
    pub fn new(ansatz: LayeredAnsatz, psi0: StateVector, observable: Observable, target: f64) -> Result<Self> {
        ensure_dim(ansatz.n_qubits(), psi0.n_qubits())?;
        ensure_dim(ansatz.n_qubits(), observable.n_qubits())?;
        if !target.is_finite() {
            return Err(Error::invalid("target must be finite"));
        }
        Ok(Self { ansatz, psi0, observable, target })
    }

    /// Context whose target sits `eps0` below the expectation at `theta0`, so `ε(θ0) = eps0`.
    pub fn with_initial_residual(
        ansatz: LayeredAnsatz,
        psi0: StateVector,
        observable: Observable,
        theta0: &AngleVector,
        eps0: f64,
    ) -> Result<Self> {
        let mut ctx = Self::new(ansatz, psi0, observable, 0.0)?;
        ctx.target = ctx.expectation(theta0)? - eps0;
        Ok(ctx)
    }

    pub fn ansatz(&self) -> &LayeredAnsatz {
        &self.ansatz
    }

    pub fn psi0(&self) -> &StateVector {
        &self.psi0
    }

    pub fn observable(&self) -> &Observable {
        &self.observable
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    pub fn n_layers(&self) -> usize {
        self.ansatz.n_layers()
    }

    pub fn dim(&self) -> usize {
        self.ansatz.dim()
    }

    /// `<ψ0|U†(θ) O U(θ)|ψ0>`.
    pub fn expectation(&self, theta: &AngleVector) -> Result<f64> {
        self.ansatz.evaluate(theta, &self.psi0)?.expectation(&self.observable)
    }

    pub fn residual(&self, theta: &AngleVector) -> Result<f64> {
        Ok(self.expectation(theta)? - self.target)
    }

    /// `ε²/2`.
    pub fn loss(&self, theta: &AngleVector) -> Result<f64> {
        let eps = self.residual(theta)?;
        Ok(0.5 * eps * eps)
    }

    /// `ε(θ)` and its exact gradient from one forward and one adjoint sweep.
    ///
    /// With `φ` the state just after rotation `ℓ` and `λ` the back-propagated
    /// `O U|ψ0>` at the same point, `∂ε/∂θ_ℓ = 2 Re <λ| iX_ℓ |φ> = −2 Im <λ|X_ℓ|φ>`.
    pub fn residual_and_gradient(&self, theta: &AngleVector) -> Result<(f64, GradientVector)> {
        let out = self.ansatz.evaluate(theta, &self.psi0)?;
        let mut psi = out.amplitudes().to_vec();
        let mut lambda = self.observable.apply(&psi);
        let value: Complex64 = psi.iter().zip(&lambda).map(|(a, b)| a.conj() * b).sum();
        let eps = value.re - self.target;

        let layers = self.ansatz.layers();
        let mut grad = vec![0.0; layers.len()];
        let mut x_phi = vec![Complex64::new(0.0, 0.0); psi.len()];
        for (ell, layer) in layers.iter().enumerate().rev() {
            let undo = layer.gate.adjoint();
            undo.apply(&mut psi)?;
            undo.apply(&mut lambda)?;
            layer.generator.apply_into(&psi, &mut x_phi);
            let overlap: Complex64 = lambda.iter().zip(&x_phi).map(|(l, p)| l.conj() * p).sum();
            grad[ell] = -2.0 * overlap.im;
            rotate(&mut psi, &layer.generator, -theta.0[ell]);
            rotate(&mut lambda, &layer.generator, -theta.0[ell]);
        }
        Ok((eps, GradientVector(grad)))
    }

    pub fn grad_analytic(&self, theta: &AngleVector) -> Result<GradientVector> {
        Ok(self.residual_and_gradient(theta)?.1)
    }

    /// `ε(θ + π/4 e_ℓ) − ε(θ − π/4 e_ℓ)`: exact for `e^{iθX}` with `X² = I`.
    pub fn grad_param_shift(&self, theta: &AngleVector, layer: usize) -> Result<f64> {
        self.ansatz.check_angles(theta)?;
        if layer >= self.n_layers() {
            return Err(Error::OutOfRange { index: layer, len: self.n_layers() });
        }
        let plus = self.expectation(&theta.shifted(layer, FRAC_PI_4))?;
        let minus = self.expectation(&theta.shifted(layer, -FRAC_PI_4))?;
        Ok(plus - minus)
    }

    pub fn grad_param_shift_all(&self, theta: &AngleVector) -> Result<GradientVector> {
        (0..self.n_layers())
            .map(|ell| self.grad_param_shift(theta, ell))
            .collect::<Result<Vec<_>>>()
            .map(GradientVector)
    }

    /// `K = Σ_ℓ (∂ε/∂θ_ℓ)²`.
    pub fn qntk(&self, theta: &AngleVector) -> Result<f64> {
        Ok(self.grad_analytic(theta)?.norm_sqr())
    }

    /// `∂²ε/∂θ_a∂θ_b` by applying the shift rule in both coordinates.
    pub fn hessian_entry(&self, theta: &AngleVector, a: usize, b: usize) -> Result<f64> {
        let n = self.n_layers();
        for idx in [a, b] {
            if idx >= n {
                return Err(Error::OutOfRange { index: idx, len: n });
            }
        }
        let mut total = 0.0;
        for (sa, sb, sign) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
            let shifted = theta.shifted(a, sa * FRAC_PI_4).shifted(b, sb * FRAC_PI_4);
            total += sign * self.expectation(&shifted)?;
        }
        Ok(total)
    }

    fn hessian_guard(&self) -> Result<()> {
        if self.n_layers() > MAX_HESSIAN_LAYERS || self.ansatz.n_qubits() > MAX_HESSIAN_QUBITS {
            return Err(Error::Resource(format!(
                "Hessian limited to {MAX_HESSIAN_LAYERS} layers and {MAX_HESSIAN_QUBITS} qubits, got {} and {}",
                self.n_layers(),
                self.ansatz.n_qubits()
            )));
        }
        Ok(())
    }

    /// Symmetric Hessian of `ε`; the upper triangle is evaluated and mirrored.
    pub fn hessian(&self, theta: &AngleVector) -> Result<DMatrix<f64>> {
        self.hessian_guard()?;
        self.ansatz.check_angles(theta)?;
        let n = self.n_layers();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a..n).map(move |b| (a, b))).collect();
        let values = pairs
            .par_iter()
            .map(|&(a, b)| self.hessian_entry(theta, a, b))
            .collect::<Result<Vec<_>>>()?;
        let mut h = DMatrix::zeros(n, n);
        for (&(a, b), v) in pairs.iter().zip(values) {
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
        Ok(h)
    }

    /// `μ = Σ_{ab} H_ab g_a g_b`.
    pub fn dqntk_mu(&self, theta: &AngleVector) -> Result<f64> {
        let h = self.hessian(theta)?;
        let g = nalgebra::DVector::from_column_slice(self.grad_analytic(theta)?.as_slice());
        Ok(g.dot(&(&h * &g)))
    }
}
