//! Variational quantum circuit simulation and the neural-tangent-kernel view of
//! its training dynamics: averaged kernels, exponential error decay, noise
//! plateaus, and a classical wide-network counterpart.

pub mod ansatz;
pub mod classical;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod gradients;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod theory;

pub use error::{Error, Result};
pub use num_complex::Complex64;
pub use sim::{DenseOperator, LocalGate, Observable, Pauli, PauliString, StateVector};
pub use ansatz::{AngleVector, LayeredAnsatz};
pub use gradients::{GradientVector, ResidualContext};
pub use dynamics::{TrainConfig, TrainingTrace};
pub use theory::TheoryReport;
pub use classical::{Activation, Mlp, NtkMatrix};
pub use experiments::{Experiment, ExperimentConfig, ExperimentReport};
