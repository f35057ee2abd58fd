//! Exponential weights with a regularized importance-weighted loss estimator
//! for adversarial bandits whose losses live in a reproducing kernel Hilbert
//! space, together with adversary generators, exact-expectation regret
//! simulation and numerical checks of the supporting inequalities.

pub mod adversary;
pub mod cli;
pub mod config;
pub mod design;
pub mod error;
pub mod kernels;
pub mod learner;
pub mod rkhs;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};
