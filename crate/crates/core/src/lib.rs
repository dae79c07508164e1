//! Runge-Kutta integration with learned local-error corrections.
//!
//! The crate provides explicit Runge-Kutta schemes driven by Butcher
//! tableaux, a small feed-forward network stack (MLP, AdamW, LR scheduling)
//! trained to predict the leading coefficient of a scheme's local truncation
//! error, an enhanced stepper that adds the predicted correction at order
//! `h^(p+1)`, a safeguarded hybrid stepper that falls back to an embedded
//! higher-order result whenever the prediction disagrees with the embedded
//! error estimate, and benchmark utilities for cost/accuracy sweeps.
//!
//! Everything is `f64`, deterministic under fixed seeds, and sized for
//! desk-scale experiments rather than GPU workloads.

pub mod benchmark;
pub mod enhanced;
mod error;
pub mod learning;
pub mod nn;
pub mod ode;
pub mod rk;

pub use error::{Error, Result};
