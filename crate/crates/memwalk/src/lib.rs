//! Simulation and statistical verification toolkit for memory-reinforced
//! random walks on Z^d.
//!
//! The model: a nearest-neighbour walk that, at step n, draws an i.i.d.
//! memory length K_n and reinforces (weight 1+delta) exactly the edges it
//! crossed during the last K_n steps. The once-reinforced walk (permanent
//! reinforcement) and a generalized user-kernel engine share the same core.
//! On top of the simulator sit regeneration-time detection, exact renewal
//! computations, and the estimators used to check transience and the
//! diffusive limit at desk scale.

pub mod commands;
pub mod config;
pub mod error;
pub mod lattice;
pub mod memory;
pub mod regen;
pub mod rng;
pub mod runner;
pub mod stats;
pub mod walk;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
