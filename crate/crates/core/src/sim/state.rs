use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use super::operator::{DenseOperator, LocalGate, Observable};
use super::pauli::PauliString;
use crate::error::{ensure_dim, Error, Result};

pub const NORM_TOL: f64 = 1e-10;

/// Imaginary part allowed in `<ψ|O|ψ>` before it is treated as a bug.
pub const EXPECTATION_IMAG_TOL: f64 = 1e-10;

/// Pure state of an n-qubit register. Qubit `q` is bit `q` of the basis index.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amps: Vec<Complex64>,
}

impl StateVector {
    pub const MAX_QUBITS: usize = 30;

    /// `|0…0>`.
    pub fn zero(n_qubits: usize) -> Self {
        Self::basis(n_qubits, 0).expect("index 0 is always valid")
    }

    pub fn basis(n_qubits: usize, index: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > Self::MAX_QUBITS {
            return Err(Error::invalid(format!("unsupported register size {n_qubits}")));
        }
        let dim = 1usize << n_qubits;
        if index >= dim {
            return Err(Error::OutOfRange { index, len: dim });
        }
        let mut amps = vec![Complex64::new(0.0, 0.0); dim];
        amps[index] = Complex64::new(1.0, 0.0);
        Ok(Self { n_qubits, amps })
    }

    /// Takes ownership of normalized amplitudes.
    pub fn from_amplitudes(n_qubits: usize, amps: Vec<Complex64>) -> Result<Self> {
        if n_qubits == 0 || n_qubits > Self::MAX_QUBITS {
            return Err(Error::invalid(format!("unsupported register size {n_qubits}")));
        }
        ensure_dim(1 << n_qubits, amps.len())?;
        let norm_sqr: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
        if (norm_sqr - 1.0).abs() > NORM_TOL {
            return Err(Error::NotNormalized { norm_sqr });
        }
        Ok(Self { n_qubits, amps })
    }

    /// Haar-random pure state.
    pub fn random<R: Rng + ?Sized>(n_qubits: usize, rng: &mut R) -> Self {
        let dim = 1usize << n_qubits;
        let mut amps: Vec<Complex64> = (0..dim)
            .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect();
        let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        amps.iter_mut().for_each(|a| *a /= norm);
        Self { n_qubits, amps }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &StateVector) -> Result<Complex64> {
        ensure_dim(self.dim(), other.dim())?;
        Ok(self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum())
    }

    /// In place `|ψ> ← exp(iθP)|ψ> = (cos θ + i sin θ P)|ψ>`.
    pub fn apply_pauli_rotation(&mut self, generator: &PauliString, theta: f64) -> Result<()> {
        ensure_dim(self.n_qubits, generator.n_qubits())?;
        rotate(&mut self.amps, generator, theta);
        Ok(())
    }

    /// In place `|ψ> ← U|ψ>` for a dense operator flagged unitary.
    pub fn apply_dense(&mut self, u: &DenseOperator) -> Result<()> {
        if !u.is_unitary() {
            return Err(Error::NotUnitary { deviation: u.unitarity_defect() });
        }
        ensure_dim(self.dim(), u.dim())?;
        let updated = u.matrix() * nalgebra::DVector::from_column_slice(&self.amps);
        self.amps.copy_from_slice(updated.as_slice());
        Ok(())
    }

    pub fn apply_local(&mut self, gate: &LocalGate) -> Result<()> {
        gate.apply(&mut self.amps)
    }

    /// Real `<ψ|O|ψ>`.
    pub fn expectation(&self, o: &Observable) -> Result<f64> {
        ensure_dim(self.dim(), o.dim())?;
        let o_psi = o.apply(&self.amps);
        let value: Complex64 = self.amps.iter().zip(&o_psi).map(|(a, b)| a.conj() * b).sum();
        if value.im.abs() > EXPECTATION_IMAG_TOL * value.norm().max(1.0) {
            return Err(Error::NotHermitian { deviation: value.im.abs() });
        }
        Ok(value.re)
    }
}

/// `amps ← (cos θ + i sin θ P) amps` using amplitude pairs `(b, b ^ x_mask)`.
pub(crate) fn rotate(amps: &mut [Complex64], p: &PauliString, theta: f64) {
    let (s, c) = theta.sin_cos();
    let is = Complex64::new(0.0, s);
    let x = p.x_mask() as usize;
    if x == 0 {
        for (b, a) in amps.iter_mut().enumerate() {
            *a *= c + is * p.phase(b);
        }
        return;
    }
    let pivot = 1usize << (63 - (x as u64).leading_zeros());
    for b in 0..amps.len() {
        if b & pivot != 0 {
            continue;
        }
        let partner = b ^ x;
        let (a0, a1) = (amps[b], amps[partner]);
        // (P ψ)_b = phase(partner)·ψ_partner
        amps[b] = a0 * c + is * p.phase(partner) * a1;
        amps[partner] = a1 * c + is * p.phase(b) * a0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::sim::haar::haar_unitary;
    use nalgebra::{DMatrix, DVector};

    fn close(a: &[Complex64], b: &[Complex64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).norm() <= tol)
    }

    /// exp(iθP) from its Taylor series, independent of the P² = I closed form.
    fn expm_series(p: &DMatrix<Complex64>, theta: f64) -> DMatrix<Complex64> {
        let n = p.nrows();
        let a = p * Complex64::new(0.0, theta);
        let mut term = DMatrix::<Complex64>::identity(n, n);
        let mut sum = term.clone();
        for k in 1..60 {
            term = &term * &a / Complex64::new(k as f64, 0.0);
            sum += &term;
        }
        sum
    }

    #[test]
    fn zero_angle_is_identity() {
        let mut rng = rng_from_seed(1);
        let psi = StateVector::random(3, &mut rng);
        let mut out = psi.clone();
        out.apply_pauli_rotation(&"XYZ".parse().unwrap(), 0.0).unwrap();
        assert!(close(psi.amplitudes(), out.amplitudes(), 0.0));
    }

    #[test]
    fn quarter_turn_x_on_zero() {
        let mut psi = StateVector::zero(1);
        psi.apply_pauli_rotation(&"X".parse().unwrap(), std::f64::consts::FRAC_PI_2).unwrap();
        let expected = [Complex64::new(0.0, 0.0), Complex64::new(0.0, 1.0)];
        assert!(close(psi.amplitudes(), &expected, 1e-15));
    }

    #[test]
    fn rotation_matches_series_exponential() {
        let mut rng = rng_from_seed(2);
        for s in ["X", "Y", "Z", "XZ", "YY", "ZIX", "IYZ", "ZZZ"] {
            let p: PauliString = s.parse().unwrap();
            let n = p.n_qubits();
            let theta = rng.gen_range(-3.0..3.0);
            let psi = StateVector::random(n, &mut rng);
            let mut fast = psi.clone();
            fast.apply_pauli_rotation(&p, theta).unwrap();
            let slow = expm_series(&p.to_dense(), theta) * DVector::from_column_slice(psi.amplitudes());
            assert!(close(fast.amplitudes(), slow.as_slice(), 1e-12), "{s}");
            assert!((fast.norm_sqr() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_period_pi_flips_sign() {
        let mut rng = rng_from_seed(3);
        let p: PauliString = "YX".parse().unwrap();
        let psi = StateVector::random(2, &mut rng);
        let mut a = psi.clone();
        let mut b = psi.clone();
        a.apply_pauli_rotation(&p, 0.7).unwrap();
        b.apply_pauli_rotation(&p, 0.7 + std::f64::consts::PI).unwrap();
        let neg: Vec<Complex64> = b.amplitudes().iter().map(|z| -z).collect();
        assert!(close(a.amplitudes(), &neg, 1e-13));
    }

    #[test]
    fn rotation_dimension_error() {
        let mut psi = StateVector::zero(2);
        assert!(matches!(
            psi.apply_pauli_rotation(&"XYZ".parse().unwrap(), 0.1),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn dense_application() {
        let mut psi = StateVector::zero(1);
        psi.apply_dense(&DenseOperator::identity(1)).unwrap();
        assert_eq!(psi, StateVector::zero(1));

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let hm = DMatrix::from_row_slice(2, 2, &[h, h, h, -h]).map(|x| Complex64::new(x, 0.0));
        psi.apply_dense(&DenseOperator::unitary(1, hm).unwrap()).unwrap();
        assert!(close(psi.amplitudes(), &[Complex64::new(h, 0.0), Complex64::new(h, 0.0)], 1e-15));

        let u = haar_unitary(3, 4).unwrap();
        let mut twice = StateVector::random(3, &mut rng_from_seed(5));
        let mut once = twice.clone();
        twice.apply_dense(&u).unwrap();
        twice.apply_dense(&u).unwrap();
        once.apply_dense(&u.compose(&u).unwrap()).unwrap();
        assert!(close(twice.amplitudes(), once.amplitudes(), 1e-12));

        let not_flagged = DenseOperator::new(3, u.matrix().clone()).unwrap();
        assert!(matches!(once.apply_dense(&not_flagged), Err(Error::NotUnitary { .. })));
        assert!(matches!(once.apply_dense(&DenseOperator::identity(2)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn expectation_values() {
        let zero = StateVector::zero(1);
        assert_eq!(zero.expectation(&Observable::Pauli("Z".parse().unwrap())).unwrap(), 1.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let plus = StateVector::from_amplitudes(1, vec![Complex64::new(h, 0.0); 2]).unwrap();
        let x = plus.expectation(&Observable::Pauli("X".parse().unwrap())).unwrap();
        assert!((x - 1.0).abs() < 1e-15);
    }

    #[test]
    fn expectation_matches_dense_quadratic_form() {
        let mut rng = rng_from_seed(8);
        let n = 8;
        let a = DMatrix::<Complex64>::from_fn(n, n, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let m = (&a + a.adjoint()) * Complex64::new(0.5, 0.0);
        let psi = StateVector::random(3, &mut rng);
        let v = DVector::from_column_slice(psi.amplitudes());
        let oracle = (v.adjoint() * &m * &v)[(0, 0)].re;
        let obs = Observable::dense(DenseOperator::hermitian(3, m).unwrap()).unwrap();
        assert!((psi.expectation(&obs).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn from_amplitudes_validation() {
        assert!(matches!(
            StateVector::from_amplitudes(1, vec![Complex64::new(1.0, 0.0); 2]),
            Err(Error::NotNormalized { .. })
        ));
        assert!(matches!(
            StateVector::from_amplitudes(2, vec![Complex64::new(1.0, 0.0); 2]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn norm_survives_many_gates() {
        let mut rng = rng_from_seed(9);
        let n = 4;
        let mut psi = StateVector::random(n, &mut rng);
        let gens: Vec<PauliString> = ["XIII", "IYII", "IIZI", "IIIX", "XYZX", "ZZII"].iter().map(|s| s.parse().unwrap()).collect();
        let gate = LocalGate::new(vec![1, 2], crate::sim::haar::haar_matrix(4, &mut rng)).unwrap();
        for k in 0..10_000 {
            if k % 3 == 0 {
                psi.apply_local(&gate).unwrap();
            } else {
                psi.apply_pauli_rotation(&gens[k % gens.len()], rng.gen_range(-3.0..3.0)).unwrap();
            }
        }
        assert!((psi.norm_sqr() - 1.0).abs() <= 1e-9);
    }
}
