//! Supervised sample-label contrastive learning (SSLCL) for imbalanced
//! multimodal classification.
//!
//! The pieces, bottom up: a small reverse-mode [`autodiff`] tape over dense
//! [`tensor`]s, a synthetic imbalanced [`dataset`] generator, a late-fusion
//! [`encoder`], a [`label_embedding`] network, Soft-HGR and baseline
//! [`similarity`] measures, the [`losses`], a [`trainer`], and a
//! [`harness`] that runs seeded sweeps and ablations.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod label_embedding;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod similarity;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
