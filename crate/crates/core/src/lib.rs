//! Computational potential theory on finite metric measure spaces.
//!
//! The crate implements discrete-path constructions on a finite point cloud
//! equipped with a metric and positive point masses: path infimization via
//! generalized multi-source Dijkstra, good function sequences, discrete upper
//! gradient checking, a Whitney-type extension pipeline, and three independent
//! solvers for condenser p-capacity / p-modulus, cross-validated against
//! brute-force and analytic oracles.

pub mod capacity;
mod convex;
pub mod error;
pub mod extension;
pub mod fields;
pub mod harness;
pub mod infimize;
pub mod paths;
pub mod space;

pub use capacity::{CapacityReport, CondenserSpec, SolverMethod};
pub use error::Error;
pub use extension::{ExtensionProblem, ExtensionResult};
pub use fields::{AuxTriple, PenaltyFunction, ScalarField};
pub use harness::{GridSpec, SweepReport};
pub use paths::{DiscretePath, PolylineCurve};
pub use space::{MetricMeasureSpace, PointSet, SetLabel};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
