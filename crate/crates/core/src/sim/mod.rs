//! Statevector simulator: states, Pauli strings, dense and local operators,
//! and Haar sampling.

pub mod haar;
pub mod operator;
pub mod pauli;
pub mod state;

pub use haar::{haar_matrix, haar_unitary, haar_unitary_with, u00_fourth_moment_quadrature};
pub use operator::{DenseOperator, LocalGate, Observable, PauliSum, TracePowers, MAX_DENSE_QUBITS};
pub use pauli::{Pauli, PauliString};
pub use state::StateVector;
