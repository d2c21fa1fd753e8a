use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-qubit Pauli label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    pub fn from_char(c: char) -> Result<Self> {
        match c.to_ascii_uppercase() {
            'I' => Ok(Pauli::I),
            'X' => Ok(Pauli::X),
            'Y' => Ok(Pauli::Y),
            'Z' => Ok(Pauli::Z),
            other => Err(Error::invalid(format!("unknown Pauli label '{other}'"))),
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Pauli::I => 'I',
            Pauli::X => 'X',
            Pauli::Y => 'Y',
            Pauli::Z => 'Z',
        }
    }
}

/// Tensor product of single-qubit Paulis, stored as X/Z bit masks.
///
/// Bit `q` of each mask refers to qubit `q`, which is bit `q` of a basis index.
/// A Y factor sets both bits and contributes a factor `i` (Y = iXZ).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PauliString {
    n_qubits: usize,
    x_mask: u64,
    z_mask: u64,
}

const I_POW: [Complex64; 4] = [
    Complex64::new(1.0, 0.0),
    Complex64::new(0.0, 1.0),
    Complex64::new(-1.0, 0.0),
    Complex64::new(0.0, -1.0),
];

impl PauliString {
    pub const MAX_QUBITS: usize = 63;

    pub fn identity(n_qubits: usize) -> Self {
        Self { n_qubits, x_mask: 0, z_mask: 0 }
    }

    /// Builds a string from per-qubit labels; `labels[q]` acts on qubit `q`.
    pub fn from_labels(labels: &[Pauli]) -> Result<Self> {
        let n_qubits = labels.len();
        if n_qubits == 0 || n_qubits > Self::MAX_QUBITS {
            return Err(Error::invalid(format!("Pauli string length {n_qubits} unsupported")));
        }
        let mut x_mask = 0u64;
        let mut z_mask = 0u64;
        for (q, p) in labels.iter().enumerate() {
            match p {
                Pauli::I => {}
                Pauli::X => x_mask |= 1 << q,
                Pauli::Z => z_mask |= 1 << q,
                Pauli::Y => {
                    x_mask |= 1 << q;
                    z_mask |= 1 << q;
                }
            }
        }
        Ok(Self { n_qubits, x_mask, z_mask })
    }

    /// A single Pauli acting on `wire`, identity elsewhere.
    pub fn single(n_qubits: usize, wire: usize, pauli: Pauli) -> Result<Self> {
        if wire >= n_qubits {
            return Err(Error::OutOfRange { index: wire, len: n_qubits });
        }
        let mut labels = vec![Pauli::I; n_qubits];
        labels[wire] = pauli;
        Self::from_labels(&labels)
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        1 << self.n_qubits
    }

    pub fn x_mask(&self) -> u64 {
        self.x_mask
    }

    pub fn z_mask(&self) -> u64 {
        self.z_mask
    }

    pub fn is_identity(&self) -> bool {
        self.x_mask == 0 && self.z_mask == 0
    }

    pub fn label(&self, qubit: usize) -> Pauli {
        let x = (self.x_mask >> qubit) & 1 == 1;
        let z = (self.z_mask >> qubit) & 1 == 1;
        match (x, z) {
            (false, false) => Pauli::I,
            (true, false) => Pauli::X,
            (false, true) => Pauli::Z,
            (true, true) => Pauli::Y,
        }
    }

    pub fn labels(&self) -> Vec<Pauli> {
        (0..self.n_qubits).map(|q| self.label(q)).collect()
    }

    fn y_count(&self) -> u32 {
        (self.x_mask & self.z_mask).count_ones()
    }

    /// Phase `c` such that `P|b> = c |b ^ x_mask>`.
    #[inline]
    pub fn phase(&self, basis: usize) -> Complex64 {
        let sign = ((basis as u64 & self.z_mask).count_ones() & 1) * 2;
        I_POW[((self.y_count() + sign) & 3) as usize]
    }

    /// Writes `P·input` into `out`.
    pub fn apply_into(&self, input: &[Complex64], out: &mut [Complex64]) {
        debug_assert_eq!(input.len(), self.dim());
        let x = self.x_mask as usize;
        let base = I_POW[(self.y_count() & 3) as usize];
        for (b, a) in input.iter().enumerate() {
            let sign = (b as u64 & self.z_mask).count_ones() & 1;
            let amp = if sign == 1 { -base * a } else { base * a };
            out[b ^ x] = amp;
        }
    }

    pub fn apply(&self, input: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); input.len()];
        self.apply_into(input, &mut out);
        out
    }

    /// Whether the two strings commute as operators.
    pub fn commutes_with(&self, other: &PauliString) -> bool {
        let a = (self.x_mask & other.z_mask).count_ones() + (self.z_mask & other.x_mask).count_ones();
        a % 2 == 0
    }

    /// Trace of the operator: N for the identity, 0 otherwise.
    pub fn trace(&self) -> f64 {
        if self.is_identity() {
            self.dim() as f64
        } else {
            0.0
        }
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<Complex64> {
        let n = self.dim();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for b in 0..n {
            m[(b ^ self.x_mask as usize, b)] = self.phase(b);
        }
        m
    }
}

impl fmt::Display for PauliString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for q in 0..self.n_qubits {
            write!(f, "{}", self.label(q).as_char())?;
        }
        Ok(())
    }
}

impl FromStr for PauliString {
    type Err = Error;

    /// Parses labels left to right as qubits 0, 1, ...
    fn from_str(s: &str) -> Result<Self> {
        let labels = s.chars().map(Pauli::from_char).collect::<Result<Vec<_>>>()?;
        Self::from_labels(&labels)
    }
}

impl Serialize for PauliString {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PauliString {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
