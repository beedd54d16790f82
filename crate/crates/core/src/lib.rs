//! Self-paced contrastive learning with meta-labels for semi-supervised
//! segmentation, at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`gradcheck`]: dense `f64` tensors, a
//!   reverse-mode tape, and a central-difference gradient checker.
//! - [`contrastive`]: augmented batches, positive sets, and the
//!   unsupervised and meta-label contrastive losses.
//! - [`self_paced`]: closed-form pair weights, loss bounds, the pace
//!   schedule, and the multi-label self-paced loss.
//! - [`model`], [`optim`]: a small encoder / projection head / decoder with
//!   an EMA teacher, and the optimizer that trains it.
//! - [`synth`]: synthetic volumes with free meta-labels and augmentation.
//! - [`train`]: supervised, consistency, and contrastive objectives, the
//!   training loops, and Dice evaluation.
//! - [`config`], [`experiment`], [`verify`]: run configuration, the
//!   ablation / pace-report drivers, and the property-check suite.
//! - [`cli`]: the `spcon` command line.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod self_paced;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
