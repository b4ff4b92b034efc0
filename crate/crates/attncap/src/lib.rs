//! Memorization-capacity toolkit for small self-attention networks.
//!
//! The crate trains compact transformer models on synthetic token
//! sequences, measures how many sequences they can memorize (MAC and MLS
//! protocols), and fits an empirical capacity model that predicts
//! capacity from the architecture hyperparameters B, H, N and L.
//!
//! Layers, bottom up:
//!
//! - [`numerics`]: dense `f64` tensors with reverse-mode differentiation
//!   and a finite-difference gradient oracle.
//! - [`model`]: the transformer under measurement, with exact
//!   trainable-parameter accounting.
//! - [`datagen`]: deterministic synthetic sequence libraries.
//! - [`harness`]: Adam training loop, capacity protocols and the
//!   statistical validity helpers.
//! - [`ecm`]: the empirical capacity model, its fitting pipeline and the
//!   polynomial baseline.
//! - [`cli`]: declarative experiment specs, orchestration and plot-data
//!   export, used by the `attncap` binary.

pub mod cli;
pub mod datagen;
pub mod ecm;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
