//! Federated multimodal segmentation with partially personalized decoders,
//! anchor-based cross-attention calibration, and a deterministic simulator.

pub mod anchorbank;
pub mod config;
pub mod error;
pub mod fedcore;
pub mod lacca;
pub mod numkit;
pub mod simnet;
pub mod synthdata;
pub mod toymodel;

pub use config::{ExperimentConfig, Mode};
pub use error::{Error, Result};
