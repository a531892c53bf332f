//! Offline-to-online imitation learning on tabular and small continuous MDPs.
//!
//! The offline stage fits a density-ratio discriminator between expert and
//! union data, turns it into an auxiliary reward, solves a convex-concave
//! saddle point for an occupancy ratio and extracts a policy. The online stage
//! starts adversarial finetuning from a discriminator stitched together from
//! the offline artifacts.

// Validation compares with `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod finetune;
pub mod mdp;
pub mod nn;
pub mod offrl;
pub mod oracle;
pub mod pipeline;
pub mod policy;
pub mod reward;
pub mod ssp;
pub mod stitch;

pub use error::{Error, Result};
