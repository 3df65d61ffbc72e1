//! Function-vector interpretability lab.
//!
//! A from-scratch toy transformer trained on synthetic in-context learning
//! tasks, the causal interventions used to study function vectors (edge
//! ablation, Q/K/V patching, residual injection), the analyses built on top
//! of them, and a numerical model of a discrete two-task ICL theory.
//!
//! Core math is generic over [`Scalar`] (`f32` / `f64`); the aliases below
//! fix the 64-bit instantiation used by experiments.

pub mod error;
pub mod numerics;
pub mod scalar;
pub mod tasks;
pub mod model;
pub mod interventions;
pub mod fv;
pub mod analysis;
pub mod theory;
pub mod runner;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Vec64 = numerics::Vector<f64>;
pub type Mat64 = numerics::Matrix<f64>;
pub type Params64 = model::Params<f64>;
pub type Cache64 = model::ActivationCache<f64>;
pub type Plan64 = model::InterventionPlan<f64>;
pub type Run64 = model::RunResult<f64>;
