use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::pauli::PauliString;
use crate::error::{ensure_dim, Error, Result};

pub const UNITARY_TOL: f64 = 1e-10;
pub const HERMITIAN_TOL: f64 = 1e-12;

/// Largest register for which an N×N dense matrix is built.
pub const MAX_DENSE_QUBITS: usize = 12;

fn max_abs(m: &DMatrix<Complex64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub(crate) fn unitarity_defect(m: &DMatrix<Complex64>) -> f64 {
    let n = m.nrows();
    max_abs(&(m * m.adjoint() - DMatrix::<Complex64>::identity(n, n)))
}

fn hermiticity_defect(m: &DMatrix<Complex64>) -> f64 {
    max_abs(&(m - m.adjoint()))
}

fn check_square(n_qubits: usize, m: &DMatrix<Complex64>) -> Result<()> {
    if n_qubits > MAX_DENSE_QUBITS {
        return Err(Error::SizeGuard { n_qubits, limit: MAX_DENSE_QUBITS });
    }
    let dim = 1usize << n_qubits;
    ensure_dim(dim, m.nrows())?;
    ensure_dim(dim, m.ncols())
}

/// Full N×N operator on an n-qubit register, with verified structure flags.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    n_qubits: usize,
    matrix: DMatrix<Complex64>,
    unitary: bool,
    hermitian: bool,
}

impl DenseOperator {
    /// Wraps a matrix without structural claims.
    pub fn new(n_qubits: usize, matrix: DMatrix<Complex64>) -> Result<Self> {
        check_square(n_qubits, &matrix)?;
        Ok(Self { n_qubits, matrix, unitary: false, hermitian: false })
    }

    /// Wraps a matrix and flags it unitary after checking `U U† = I`.
    pub fn unitary(n_qubits: usize, matrix: DMatrix<Complex64>) -> Result<Self> {
        check_square(n_qubits, &matrix)?;
        let deviation = unitarity_defect(&matrix);
        if deviation > UNITARY_TOL {
            return Err(Error::NotUnitary { deviation });
        }
        Ok(Self { n_qubits, matrix, unitary: true, hermitian: false })
    }

    /// Wraps a matrix and flags it hermitian after checking `M = M†`.
    pub fn hermitian(n_qubits: usize, matrix: DMatrix<Complex64>) -> Result<Self> {
        check_square(n_qubits, &matrix)?;
        let deviation = hermiticity_defect(&matrix);
        if deviation > HERMITIAN_TOL {
            return Err(Error::NotHermitian { deviation });
        }
        Ok(Self { n_qubits, matrix, unitary: false, hermitian: true })
    }

    pub fn identity(n_qubits: usize) -> Self {
        let dim = 1 << n_qubits;
        Self { n_qubits, matrix: DMatrix::identity(dim, dim), unitary: true, hermitian: true }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<Complex64> {
        self.matrix
    }

    pub fn is_unitary(&self) -> bool {
        self.unitary
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    /// Product `self · rhs`; the unitary flag survives when both factors carry it.
    pub fn compose(&self, rhs: &DenseOperator) -> Result<DenseOperator> {
        ensure_dim(self.n_qubits, rhs.n_qubits)?;
        Ok(DenseOperator {
            n_qubits: self.n_qubits,
            matrix: &self.matrix * &rhs.matrix,
            unitary: self.unitary && rhs.unitary,
            hermitian: false,
        })
    }

    pub fn adjoint(&self) -> DenseOperator {
        DenseOperator {
            n_qubits: self.n_qubits,
            matrix: self.matrix.adjoint(),
            unitary: self.unitary,
            hermitian: self.hermitian,
        }
    }

    pub fn unitarity_defect(&self) -> f64 {
        unitarity_defect(&self.matrix)
    }
}

/// A fixed unitary acting on a few wires of a larger register.
///
/// Bit `j` of a block row/column index corresponds to `wires[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGate {
    wires: Vec<usize>,
    block: DMatrix<Complex64>,
}

impl LocalGate {
    pub fn new(wires: Vec<usize>, block: DMatrix<Complex64>) -> Result<Self> {
        if wires.is_empty() {
            return Err(Error::invalid("local gate needs at least one wire"));
        }
        let mut sorted = wires.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != wires.len() {
            return Err(Error::invalid(format!("repeated wire in {wires:?}")));
        }
        let dim = 1usize << wires.len();
        ensure_dim(dim, block.nrows())?;
        ensure_dim(dim, block.ncols())?;
        let deviation = unitarity_defect(&block);
        if deviation > UNITARY_TOL {
            return Err(Error::NotUnitary { deviation });
        }
        Ok(Self { wires, block })
    }

    /// A gate covering every wire of the register.
    pub fn full(op: &DenseOperator) -> Result<Self> {
        if !op.is_unitary() {
            return Err(Error::NotUnitary { deviation: op.unitarity_defect() });
        }
        Ok(Self { wires: (0..op.n_qubits()).collect(), block: op.matrix().clone() })
    }

    pub fn identity(wires: Vec<usize>) -> Result<Self> {
        let dim = 1 << wires.len();
        Self::new(wires, DMatrix::identity(dim, dim))
    }

    pub fn wires(&self) -> &[usize] {
        &self.wires
    }

    pub fn block(&self) -> &DMatrix<Complex64> {
        &self.block
    }

    pub fn adjoint(&self) -> LocalGate {
        LocalGate { wires: self.wires.clone(), block: self.block.adjoint() }
    }

    fn check_register(&self, n_qubits: usize) -> Result<()> {
        match self.wires.iter().find(|&&w| w >= n_qubits) {
            Some(&w) => Err(Error::OutOfRange { index: w, len: n_qubits }),
            None => Ok(()),
        }
    }

    /// Applies the block to `amps` in place, touching each amplitude once.
    pub fn apply(&self, amps: &mut [Complex64]) -> Result<()> {
        let n_qubits = amps.len().trailing_zeros() as usize;
        ensure_dim(1 << n_qubits, amps.len())?;
        self.check_register(n_qubits)?;
        let k = self.wires.len();
        let dim = 1usize << k;
        let offsets: Vec<usize> = (0..dim)
            .map(|local| {
                self.wires
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| (local >> j) & 1 == 1)
                    .fold(0usize, |acc, (_, &w)| acc | (1 << w))
            })
            .collect();
        let wire_mask = offsets[dim - 1];
        let mut gathered = vec![Complex64::new(0.0, 0.0); dim];
        let mut out = vec![Complex64::new(0.0, 0.0); dim];
        for base in 0..amps.len() {
            if base & wire_mask != 0 {
                continue;
            }
            for (g, off) in gathered.iter_mut().zip(&offsets) {
                *g = amps[base | off];
            }
            for (r, o) in out.iter_mut().enumerate() {
                let mut acc = Complex64::new(0.0, 0.0);
                for (cidx, g) in gathered.iter().enumerate() {
                    acc += self.block[(r, cidx)] * g;
                }
                *o = acc;
            }
            for (o, off) in out.iter().zip(&offsets) {
                amps[base | off] = *o;
            }
        }
        Ok(())
    }

    /// Embeds the gate as an N×N unitary on an `n_qubits` register.
    pub fn to_dense(&self, n_qubits: usize) -> Result<DenseOperator> {
        self.check_register(n_qubits)?;
        if n_qubits > MAX_DENSE_QUBITS {
            return Err(Error::SizeGuard { n_qubits, limit: MAX_DENSE_QUBITS });
        }
        let n = 1usize << n_qubits;
        let mut m = DMatrix::<Complex64>::zeros(n, n);
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for b in 0..n {
            col.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            col[b] = Complex64::new(1.0, 0.0);
            self.apply(&mut col)?;
            m.set_column(b, &nalgebra::DVector::from_column_slice(&col));
        }
        DenseOperator::unitary(n_qubits, m)
    }
}

/// Weighted sum of Pauli strings, `Σ c_k P_k`, with real weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PauliSum {
    n_qubits: usize,
    terms: Vec<(f64, PauliString)>,
}

impl PauliSum {
    pub fn new(n_qubits: usize, terms: Vec<(f64, PauliString)>) -> Result<Self> {
        for (c, p) in &terms {
            ensure_dim(n_qubits, p.n_qubits())?;
            if !c.is_finite() {
                return Err(Error::invalid("non-finite Pauli coefficient"));
            }
        }
        Ok(Self { n_qubits, terms })
    }

    pub fn terms(&self) -> &[(f64, PauliString)] {
        &self.terms
    }
}

/// A Hermitian observable `O`.
#[derive(Debug, Clone, PartialEq)]
pub enum Observable {
    Pauli(PauliString),
    PauliSum(PauliSum),
    Dense(DenseOperator),
}

impl Observable {
    /// Dense observables must carry the hermitian flag.
    pub fn dense(op: DenseOperator) -> Result<Self> {
        if !op.is_hermitian() {
            return Err(Error::NotHermitian { deviation: hermiticity_defect(op.matrix()) });
        }
        Ok(Observable::Dense(op))
    }

    /// `Z` on qubit 0.
    pub fn z0(n_qubits: usize) -> Self {
        Observable::Pauli(PauliString::single(n_qubits, 0, super::Pauli::Z).expect("wire 0 exists"))
    }

    /// Total magnetization `Σ_q Z_q`.
    pub fn z_sum(n_qubits: usize) -> Self {
        let terms = (0..n_qubits)
            .map(|q| (1.0, PauliString::single(n_qubits, q, super::Pauli::Z).expect("wire in range")))
            .collect();
        Observable::PauliSum(PauliSum { n_qubits, terms })
    }

    pub fn n_qubits(&self) -> usize {
        match self {
            Observable::Pauli(p) => p.n_qubits(),
            Observable::PauliSum(s) => s.n_qubits,
            Observable::Dense(d) => d.n_qubits(),
        }
    }

    pub fn dim(&self) -> usize {
        1 << self.n_qubits()
    }

    /// Writes `O·input` into `out`.
    pub fn apply_into(&self, input: &[Complex64], out: &mut [Complex64]) {
        match self {
            Observable::Pauli(p) => p.apply_into(input, out),
            Observable::PauliSum(s) => {
                out.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
                let mut scratch = vec![Complex64::new(0.0, 0.0); input.len()];
                for (c, p) in &s.terms {
                    p.apply_into(input, &mut scratch);
                    for (o, v) in out.iter_mut().zip(&scratch) {
                        *o += v * c;
                    }
                }
            }
            Observable::Dense(d) => {
                let m = d.matrix();
                for (r, o) in out.iter_mut().enumerate() {
                    *o = m.row(r).iter().zip(input).map(|(a, b)| a * b).sum();
                }
            }
        }
    }

    pub fn apply(&self, input: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); input.len()];
        self.apply_into(input, &mut out);
        out
    }

    pub fn to_dense(&self) -> Result<DenseOperator> {
        let n_qubits = self.n_qubits();
        if n_qubits > MAX_DENSE_QUBITS {
            return Err(Error::SizeGuard { n_qubits, limit: MAX_DENSE_QUBITS });
        }
        match self {
            Observable::Dense(d) => Ok(d.clone()),
            _ => {
                let n = self.dim();
                let mut m = DMatrix::<Complex64>::zeros(n, n);
                let mut e = vec![Complex64::new(0.0, 0.0); n];
                for b in 0..n {
                    e[b] = Complex64::new(1.0, 0.0);
                    let col = self.apply(&e);
                    m.set_column(b, &nalgebra::DVector::from_column_slice(&col));
                    e[b] = Complex64::new(0.0, 0.0);
                }
                DenseOperator::hermitian(n_qubits, m)
            }
        }
    }

    /// `(Tr O, Tr O², Tr O⁴)`.
    pub fn trace_powers(&self) -> Result<TracePowers> {
        if let Observable::Pauli(p) = self {
            let n = p.dim() as f64;
            return Ok(TracePowers { tr: p.trace(), tr2: n, tr4: n });
        }
        let n_qubits = self.n_qubits();
        if n_qubits > MAX_DENSE_QUBITS {
            return Err(Error::SizeGuard { n_qubits, limit: MAX_DENSE_QUBITS });
        }
        // Column b of O is O|b>; Tr O² = Σ_b ‖O|b>‖² and Tr O⁴ = Σ_b ‖O²|b>‖² for hermitian O.
        let n = self.dim();
        let mut e = vec![Complex64::new(0.0, 0.0); n];
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        let mut col2 = vec![Complex64::new(0.0, 0.0); n];
        let (mut tr, mut tr2, mut tr4) = (0.0, 0.0, 0.0);
        for b in 0..n {
            e[b] = Complex64::new(1.0, 0.0);
            self.apply_into(&e, &mut col);
            self.apply_into(&col, &mut col2);
            e[b] = Complex64::new(0.0, 0.0);
            tr += col[b].re;
            tr2 += col.iter().map(|z| z.norm_sqr()).sum::<f64>();
            tr4 += col2.iter().map(|z| z.norm_sqr()).sum::<f64>();
        }
        Ok(TracePowers { tr, tr2, tr4 })
    }
}

/// Traces of the first, second, and fourth power of an observable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePowers {
    pub tr: f64,
    pub tr2: f64,
    pub tr4: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::sim::haar::haar_matrix;
    use rand::Rng;

    fn random_hermitian(n_qubits: usize, seed: u64) -> DMatrix<Complex64> {
        let mut rng = rng_from_seed(seed);
        let n = 1 << n_qubits;
        let a = DMatrix::<Complex64>::from_fn(n, n, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        (&a + a.adjoint()) * Complex64::new(0.5, 0.0)
    }

    #[test]
    fn trace_powers_pauli_identities() {
        let zz = Observable::Pauli("ZZ".parse().unwrap());
        assert_eq!(zz.trace_powers().unwrap(), TracePowers { tr: 0.0, tr2: 4.0, tr4: 4.0 });
        let id = Observable::Pauli(PauliString::identity(2));
        assert_eq!(id.trace_powers().unwrap(), TracePowers { tr: 4.0, tr2: 4.0, tr4: 4.0 });
    }

    #[test]
    fn trace_powers_match_eigenvalue_sums() {
        for seed in 0..5 {
            let m = random_hermitian(3, seed);
            let eig = m.clone().symmetric_eigen().eigenvalues;
            let obs = Observable::dense(DenseOperator::hermitian(3, m).unwrap()).unwrap();
            let tp = obs.trace_powers().unwrap();
            let s1: f64 = eig.iter().sum();
            let s2: f64 = eig.iter().map(|l| l * l).sum();
            let s4: f64 = eig.iter().map(|l| l.powi(4)).sum();
            assert!((tp.tr - s1).abs() < 1e-10);
            assert!((tp.tr2 - s2).abs() < 1e-10);
            assert!((tp.tr4 - s4).abs() < 1e-9);
        }
    }

    #[test]
    fn z_sum_traces() {
        let tp = Observable::z_sum(4).trace_powers().unwrap();
        assert_eq!(tp.tr, 0.0);
        assert_eq!(tp.tr2, 64.0);
        // Σ_m m⁴ over magnetizations of 4 spins: 2·256 + 8·16
        assert_eq!(tp.tr4, 640.0);
    }

    #[test]
    fn dense_flags_are_checked() {
        let m = random_hermitian(1, 3);
        assert!(matches!(DenseOperator::unitary(1, m.clone()), Err(Error::NotUnitary { .. })));
        let mut bad = m.clone();
        bad[(0, 1)] += Complex64::new(0.1, 0.0);
        assert!(matches!(DenseOperator::hermitian(1, bad), Err(Error::NotHermitian { .. })));
        assert!(matches!(DenseOperator::new(2, m), Err(Error::Dimension { .. })));
        assert!(Observable::dense(DenseOperator::identity(1).compose(&DenseOperator::identity(1)).unwrap()).is_err());
    }

    #[test]
    fn local_gate_embedding_matches_kronecker() {
        let mut rng = rng_from_seed(11);
        let u = haar_matrix(4, &mut rng);
        // wires (0, 2) on 3 qubits: block bit 0 = wire 0, block bit 1 = wire 2
        let gate = LocalGate::new(vec![0, 2], u.clone()).unwrap();
        let dense = gate.to_dense(3).unwrap();
        for row in 0..8usize {
            for col in 0..8usize {
                let same_spectator = (row >> 1) & 1 == (col >> 1) & 1;
                let lr = (row & 1) | (((row >> 2) & 1) << 1);
                let lc = (col & 1) | (((col >> 2) & 1) << 1);
                let expected = if same_spectator { u[(lr, lc)] } else { Complex64::new(0.0, 0.0) };
                assert!((dense.matrix()[(row, col)] - expected).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn local_gate_rejects_bad_input() {
        let id = DMatrix::<Complex64>::identity(4, 4);
        assert!(LocalGate::new(vec![1, 1], id.clone()).is_err());
        assert!(LocalGate::new(vec![0], id.clone()).is_err());
        let gate = LocalGate::new(vec![0, 3], id).unwrap();
        let mut amps = vec![Complex64::new(0.0, 0.0); 4];
        assert!(gate.apply(&mut amps).is_err());
    }
}
