//! Scaled MaxWeight (SMW) dispatch for closed queueing networks.
//!
//! The crate is organized bottom-up:
//!
//! - [`netmodel`]: network instances, Hall-gap validation, demand symmetrization.
//! - [`lpcore`]: a small dense two-phase simplex solver and the transportation problem.
//! - [`exponent`]: the closed-form demand-drop exponent, optimal scaling vectors,
//!   the most likely draining path and the Lyapunov machinery around it.
//! - [`policies`]: dispatch rules (SMW, vanilla MaxWeight, static priority,
//!   fluid-based randomized, pickup-aware SMW).
//! - [`simcore`]: the jump-chain and timed simulators, fleet sizing and exponent fits.
//! - [`chainoracle`]: exact stationary analysis of the jump chain for small fleets.
//! - [`tuner`]: cross-entropy search over scaling vectors by simulation.
//! - [`generate`]: reproducible instance generators.

pub mod chainoracle;
pub mod error;
pub mod exponent;
pub mod generate;
pub mod lpcore;
pub mod matrix;
pub mod netmodel;
pub mod policies;
pub mod rng;
pub mod simcore;
pub mod tuner;

mod serde_inf;

pub use error::{Error, Result};
pub use exponent::{AlphaVector, ExponentResult, RatePath, SubsetStats};
pub use matrix::Matrix;
pub use netmodel::{Network, NetworkFile, ValidationReport};
pub use policies::{DispatchDecision, DropReason, PolicySpec};
pub use simcore::{SimReport, TimedConfig};
