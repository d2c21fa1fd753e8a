//! Layered variational circuits `U(θ) = W_L e^{iθ_L X_L} ⋯ W_1 e^{iθ_1 X_1}`.
//!
//! Layer 0 acts on the input state first. Within a layer the Pauli rotation is
//! applied before the fixed gate.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::rng::rng_from_seed;
use crate::sim::{haar_matrix, DenseOperator, LocalGate, Pauli, PauliString, StateVector, MAX_DENSE_QUBITS};

/// Trainable angles, one per layer, in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AngleVector(pub Vec<f64>);

impl AngleVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    /// i.i.d. uniform on `[0, 2π)`.
    pub fn random_uniform<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        Self((0..len).map(|_| rng.gen_range(0.0..TAU)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Copy with `delta` added to entry `index`.
    pub fn shifted(&self, index: usize, delta: f64) -> Self {
        let mut out = self.clone();
        out.0[index] += delta;
        out
    }
}

impl From<Vec<f64>> for AngleVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// One circuit layer: rotation `e^{iθX}` followed by the fixed gate `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub generator: PauliString,
    pub gate: LocalGate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayeredAnsatz {
    n_qubits: usize,
    layers: Vec<Layer>,
    construction_seed: Option<u64>,
}

impl LayeredAnsatz {
    pub fn new(n_qubits: usize, layers: Vec<Layer>) -> Result<Self> {
        if n_qubits == 0 || n_qubits > StateVector::MAX_QUBITS {
            return Err(Error::invalid(format!("unsupported register size {n_qubits}")));
        }
        if layers.is_empty() {
            return Err(Error::invalid("ansatz needs at least one layer"));
        }
        for (idx, layer) in layers.iter().enumerate() {
            ensure_dim(n_qubits, layer.generator.n_qubits())?;
            if layer.generator.is_identity() {
                return Err(Error::invalid(format!("layer {idx} has an identity generator")));
            }
            if let Some(&w) = layer.gate.wires().iter().find(|&&w| w >= n_qubits) {
                return Err(Error::OutOfRange { index: w, len: n_qubits });
            }
        }
        Ok(Self { n_qubits, layers, construction_seed: None })
    }

    /// Randomized hardware-efficient circuit.
    ///
    /// Layer `ℓ` rotates wire `ℓ mod n` about a uniformly chosen X, Y, or Z axis,
    /// then applies a Haar two-qubit gate on a random nearest-neighbour pair of a
    /// ring (a Haar one-qubit gate when `n_qubits == 1`).
    pub fn randomized_hwe(n_qubits: usize, n_layers: usize, seed: u64) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::invalid("ansatz needs at least one layer"));
        }
        let mut rng = rng_from_seed(seed);
        let axes = [Pauli::X, Pauli::Y, Pauli::Z];
        let mut layers = Vec::with_capacity(n_layers);
        for ell in 0..n_layers {
            let axis = axes[rng.gen_range(0..3)];
            let generator = PauliString::single(n_qubits, ell % n_qubits, axis)?;
            let wires = match n_qubits {
                1 => vec![0],
                2 => vec![0, 1],
                n => {
                    let q = rng.gen_range(0..n);
                    vec![q, (q + 1) % n]
                }
            };
            let block = haar_matrix(1 << wires.len(), &mut rng);
            layers.push(Layer { generator, gate: LocalGate::new(wires, block)? });
        }
        let mut ansatz = Self::new(n_qubits, layers)?;
        ansatz.construction_seed = Some(seed);
        Ok(ansatz)
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        1 << self.n_qubits
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn construction_seed(&self) -> Option<u64> {
        self.construction_seed
    }

    pub fn random_angles<R: Rng + ?Sized>(&self, rng: &mut R) -> AngleVector {
        AngleVector::random_uniform(self.n_layers(), rng)
    }

    pub(crate) fn check_angles(&self, theta: &AngleVector) -> Result<()> {
        ensure_dim(self.n_layers(), theta.len())
    }

    /// Applies layers `range` in order to `state`.
    pub(crate) fn apply_layers(
        &self,
        theta: &AngleVector,
        range: std::ops::Range<usize>,
        state: &mut StateVector,
    ) -> Result<()> {
        for ell in range {
            let layer = &self.layers[ell];
            state.apply_pauli_rotation(&layer.generator, theta.0[ell])?;
            state.apply_local(&layer.gate)?;
        }
        Ok(())
    }

    /// `U(θ)|ψ0>`.
    pub fn evaluate(&self, theta: &AngleVector, psi0: &StateVector) -> Result<StateVector> {
        self.check_angles(theta)?;
        ensure_dim(self.n_qubits, psi0.n_qubits())?;
        let mut state = psi0.clone();
        self.apply_layers(theta, 0..self.n_layers(), &mut state)?;
        Ok(state)
    }

    fn dense_guard(&self) -> Result<()> {
        if self.n_qubits > MAX_DENSE_QUBITS {
            return Err(Error::SizeGuard { n_qubits: self.n_qubits, limit: MAX_DENSE_QUBITS });
        }
        Ok(())
    }

    /// Dense unitary of layers `range`, built column by column.
    fn dense_product(&self, theta: &AngleVector, range: std::ops::Range<usize>) -> Result<DenseOperator> {
        self.dense_guard()?;
        let n = self.dim();
        let mut m = DMatrix::<Complex64>::zeros(n, n);
        for b in 0..n {
            let mut col = StateVector::basis(self.n_qubits, b)?;
            self.apply_layers(theta, range.clone(), &mut col)?;
            m.set_column(b, &nalgebra::DVector::from_column_slice(col.amplitudes()));
        }
        DenseOperator::unitary(self.n_qubits, m)
    }

    /// Full circuit unitary `U(θ)`.
    pub fn unitary(&self, theta: &AngleVector) -> Result<DenseOperator> {
        self.check_angles(theta)?;
        self.dense_product(theta, 0..self.n_layers())
    }

    /// Splits `U(θ) = V₊ · V₋` at `layer`: `V₋` holds layers `0..=layer`,
    /// `V₊` holds the rest (identity when `layer` is the last one).
    pub fn split_at(&self, theta: &AngleVector, layer: usize) -> Result<(DenseOperator, DenseOperator)> {
        self.check_angles(theta)?;
        if layer >= self.n_layers() {
            return Err(Error::OutOfRange { index: layer, len: self.n_layers() });
        }
        let v_minus = self.dense_product(theta, 0..layer + 1)?;
        let v_plus = self.dense_product(theta, layer + 1..self.n_layers())?;
        Ok((v_minus, v_plus))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&AnsatzDocument::from(self)).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: AnsatzDocument = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        doc.try_into()
    }
}

/// On-disk form of a [`LayeredAnsatz`]. Gate blocks are row-major `[re, im]` pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnsatzDocument {
    pub n_qubits: usize,
    pub n_layers: usize,
    pub seed: Option<u64>,
    pub layers: Vec<LayerDocument>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDocument {
    pub generator: PauliString,
    pub wires: Vec<usize>,
    pub block: Vec<[f64; 2]>,
}

impl From<&LayeredAnsatz> for AnsatzDocument {
    fn from(a: &LayeredAnsatz) -> Self {
        let layers = a
            .layers
            .iter()
            .map(|layer| {
                let m = layer.gate.block();
                let block = (0..m.nrows())
                    .flat_map(|r| (0..m.ncols()).map(move |c| (r, c)))
                    .map(|(r, c)| [m[(r, c)].re, m[(r, c)].im])
                    .collect();
                LayerDocument { generator: layer.generator, wires: layer.gate.wires().to_vec(), block }
            })
            .collect();
        AnsatzDocument { n_qubits: a.n_qubits, n_layers: a.n_layers(), seed: a.construction_seed, layers }
    }
}

impl TryFrom<AnsatzDocument> for LayeredAnsatz {
    type Error = Error;

    fn try_from(doc: AnsatzDocument) -> Result<Self> {
        ensure_dim(doc.n_layers, doc.layers.len())?;
        let layers = doc
            .layers
            .into_iter()
            .map(|l| {
                let dim = 1usize << l.wires.len();
                ensure_dim(dim * dim, l.block.len())?;
                let block = DMatrix::from_row_iterator(dim, dim, l.block.iter().map(|[re, im]| Complex64::new(*re, *im)));
                Ok(Layer { generator: l.generator, gate: LocalGate::new(l.wires, block)? })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ansatz = LayeredAnsatz::new(doc.n_qubits, layers)?;
        ansatz.construction_seed = doc.seed;
        Ok(ansatz)
    }
}
