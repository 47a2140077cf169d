//! Multilevel stochastic approximation with Polyak–Ruppert averaging.
//!
//! The crate implements the projected multilevel recursion
//! `θ_n = Π(θ_{n−1} + γ_n Z(θ_{n−1}, s_n, K_n))` with weighted averaging,
//! closed-form asymptotic predictions of the bias/fluctuation normalizations
//! and of the simulation cost, and a replication harness that checks the
//! resulting central limit theorems empirically.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod config;
pub mod error;
pub mod harness;
pub mod level_family;
pub mod linear_analysis;
pub mod ml_estimator;
pub mod numerics;
pub mod params;
pub mod sa_driver;

pub use error::{Error, Result};
