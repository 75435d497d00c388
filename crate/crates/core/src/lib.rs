//! Latent-space surrogate models for advection-dominated 1D periodic PDEs.
//!
//! The crate generates pseudo-spectral reference data, learns a hypernetwork
//! encoder onto the weights of a periodic Fourier ansatz, learns latent
//! dynamics over those weights, and evaluates long rollouts.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ansatz;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dmd;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod hyper_unet;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod rollout;
pub mod runtime;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
