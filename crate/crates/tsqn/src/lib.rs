//! Online identification for stochastic regression with saturated
//! observations.
//!
//! The observation model clamps a noisy linear output to a (possibly
//! per-step) band; this crate provides the link-function machinery for such
//! saturation maps, a two-layer quasi-Newton recursive estimator with
//! domain projection, prediction/regret and excitation diagnostics,
//! asymptotic and finite-sample confidence intervals, a Monte-Carlo interval
//! builder, and a simulation harness with a CLI front end.

pub mod diagnostics;
pub mod error;
pub mod estimator;
mod float_serde;
pub mod geometry;
pub mod io;
pub mod link;
pub mod monte_carlo;
pub mod quad;
pub mod simulation;
pub mod special;
pub mod trace;

pub use error::{Error, Result};
