//! Simulation and certification engine for distributed consensus optimization.
//!
//! `N` agents on a connected undirected graph cooperatively minimize the sum
//! of private scalar costs. Two algorithms are implemented: the Wang-Elia
//! algorithm, which tolerates arbitrary initialization and bounded
//! perturbations, and the canonical Gradient Tracking algorithm, whose
//! initialization constraint makes it fragile under perturbations such as
//! quantization.
//!
//! The crate is organized as follows:
//!
//! - [`linalg`]: dense primitives specialized to the average-dispersion
//!   coordinate machinery (basis construction, symmetric eigensolve,
//!   discrete Lyapunov solve, operator norms).
//! - [`network`]: communication graphs and weight matrices (the symmetric
//!   consensus matrix `K`, and row/column stochastic pairs `R`, `C`).
//! - [`problem`]: local costs, the stacked gradient map, the optimizer, the
//!   optimal equilibrium and the distance to the optimal steady-state set.
//! - [`dynamics`]: one-step update maps, perturbation generators
//!   (quantization, additive noise) and deterministic trajectory rollout.
//! - [`certify`]: the full ISS certificate (Lyapunov matrix, constants,
//!   stepsize thresholds, decay rate and gains) and pointwise verification of
//!   the ISS bound and the Lyapunov decrement inequality along trajectories.
//! - [`harness`]: experiment configuration, orchestration, sweeps and
//!   CSV/JSON persistence.

// `!(x > 0.0)` style guards are used throughout so that NaN inputs fail
// validation; the suggested rewrites would accept them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certify;
pub mod dynamics;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod problem;

pub use nalgebra::{DMatrix, DVector};

pub use certify::{Certificate, ErrorSystemMatrices};
pub use dynamics::{AlgorithmState, AlgorithmTag, PerturbationSpec, TrajectoryRecord};
pub use harness::{ExperimentConfig, ExperimentReport};
pub use linalg::{AvgDispPair, DispersionBasis};
pub use network::{Graph, StochasticPair, WeightMatrixK};
pub use problem::{LocalCost, OptimalEquilibrium, ProblemInstance};
