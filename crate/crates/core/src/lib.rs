//! Preconditioned Riemannian gradient solver for the rotating
//! Gross–Pitaevskii energy on a disk, with convergence diagnostics.

pub mod diagnostics;
pub mod field;
pub mod grid;
pub mod model;
pub mod precond;
pub mod riemann;
pub mod sparse;
pub mod spectrum;

pub use diagnostics::{OrbitDistance, RateReport, Regime};
pub use field::ComplexField;
pub use grid::{PolarGrid, PotentialSpec};
pub use model::{ModelInstance, Nonlinearity, NonlinearityKind};
pub use precond::{FactorizedMetric, Ordering, PrecondKind, PrecondSpec};
pub use riemann::{InitialGuess, IterTrace, PRGConfig, Stage, StepRule};
pub use sparse::{CsrMatrix, SparseSymOperator};
pub use spectrum::{KernelBasis, MorseBottReport, RateConstants};
