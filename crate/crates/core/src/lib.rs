//! Simulation and recovery of jamming-corrupted RSSI feature spectra.
//!
//! The crate synthesizes RSSI maps measured by a hovering aircraft over a
//! ground base station, corrupts them with ground or airborne jammers, and
//! reconstructs attack-free maps with a guided denoising-diffusion model.
//!
//! Pipeline:
//!
//! * [`channel`] and [`shadow`] produce clean maps,
//! * [`attack`] injects interference,
//! * [`dataset`] normalizes, persists and loads corpora,
//! * [`denoiser`] trains the time-conditioned U-Net noise predictor,
//! * [`diffusion`] runs multi-round guided reconstruction,
//! * [`metrics`] scores reconstructions with SSIM.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod channel;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod render;
pub mod rng;
pub mod shadow;

pub use error::{Error, Result};
pub use grid::Grid;
