//! Core engine for predicting oxygen uptake during ICU rehabilitation sessions.
//!
//! The model is a hierarchical Gaussian regression for log oxygen uptake
//! (`log V̇O₂`) on breath-by-breath physiological covariates, with a
//! session-level varying intercept, a patient-level varying slope for
//! `log(V_T)`, and an Ornstein–Uhlenbeck temporal error process on the
//! irregular breath time grid. Because the observation model is Gaussian
//! with a fixed (very large) precision, the latent field conditional on
//! the four hyperparameters `(τ_α, τ_β₁, τ_s, φ)` is exactly Gaussian;
//! inference integrates the hyperparameters over an adaptive grid around
//! the posterior mode and mixes the per-point Gaussian conditionals.
//!
//! Downstream of the fit, predictive distributions for new patients or
//! sessions are formed analytically per joint-posterior sample, mapped to
//! four exercise-intensity categories (rest/low/medium/high on the V̇O₂
//! scale), and validated with leave-one-patient-out cross-validation,
//! zero-one loss and the ranked probability score.
//!
//! This crate is `no_std` (with `alloc`): it contains only the numerical
//! engine. File formats, configuration and the command-line front end
//! live in the companion `vo2-cli` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod evaluate;
pub mod frame;
pub mod inference;
pub mod linalg;
pub mod math;
pub mod metrics;
pub mod model;
pub mod ou;
pub mod predict;
pub mod rng;
pub mod simulate;

#[cfg(test)]
pub(crate) mod testutil;

pub use data::{BreathRecord, Dataset, PatientMeta, Quality, SessionMeta};
pub use error::{Error, Result};
pub use frame::{Centering, FrameSpec, ModelFrame};
pub use inference::{ConditionalGaussian, FitOptions, FitResult, HyperGrid, ModeResult};
pub use model::{HyperParams, LatentLayout, ModelSpec, PriorSpec};
pub use ou::{OuParams, OuPath};
pub use predict::{Category, CategoryProbs, CategoryThresholds, PredictMode, PredictiveDraw};
