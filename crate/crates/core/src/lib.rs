//! Simulation and optimal money-supply control of an interbank reserve network.
//!
//! The toolkit simulates the controlled N-bank reserve system with a common
//! noise, solves for optimal supply policies three independent ways (Riccati
//! ODEs, a 1-D finite-difference dynamic-programming solver, and an
//! adjoint-equation fixed-point iteration on Monte Carlo paths), simulates the
//! conditional mean-field particle limit, and ships the convergence studies
//! that tie the finite-N system to its mean-field counterpart.
//!
//! Core numerics are generic over the scalar type (see [`scalar::Scalar`]);
//! the CLI, studies, and file formats run on `f64` via the aliases below.

// Validation uses `!(v > 0)` instead of `v <= 0` on purpose: the negated
// form also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod lq;
pub mod meanfield;
pub mod measures;
pub mod model;
mod par;
pub mod rng;
pub mod scalar;
pub mod sde;

pub mod cli;
pub mod config;
pub mod report;

pub use error::Error;
pub use scalar::Scalar;

/// Default scalar type for the CLI and the experiment layer.
pub type Real = f64;

pub type BankType = model::BankType<Real>;
pub type InitialDatum = model::InitialDatum<Real>;
pub type Scenario = model::Scenario<Real>;
pub type TimeGrid = sde::TimeGrid<Real>;
pub type NoiseBundle = sde::NoiseBundle<Real>;
pub type PathBundle = sde::PathBundle<Real>;
pub type ControlSpec = sde::ControlSpec<Real>;
pub type RiccatiSolution = lq::RiccatiSolution<Real>;
pub type HjbSurface1D = lq::HjbSurface1D<Real>;
pub type AdjointSolution = control::AdjointSolution<Real>;
pub type RandomizedPolicy = control::RandomizedPolicy<Real>;
pub type LimitLaw = meanfield::LimitLaw<Real>;
pub type ParticleEnsemble = meanfield::ParticleEnsemble<Real>;
pub type EmpiricalMeasure = measures::EmpiricalMeasure<Real>;
pub type EmpiricalMeasureFlow = measures::EmpiricalMeasureFlow<Real>;

/// Convenience result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
