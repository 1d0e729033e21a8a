//! Style normalization + selective whitening for domain-generalizable binary
//! segmentation.
//!
//! The crate provides the two feature-space blocks (SNR: instance
//! normalization with attention-gated restitution; ISW: covariance whitening
//! masked to style-bearing entries), a compact encoder/decoder segmentation
//! network that hosts them, a synthetic two-modality benchmark that emulates
//! an imaging-modality shift, and the training/evaluation machinery to
//! measure the generalization gap. Everything is deterministic given a seed.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod element;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod kernels;
pub mod isw;
pub mod network;
pub mod selftest;
pub mod snr;
pub mod synthdata;
pub mod training;

pub use element::Element;
pub use error::{Result, SrwError};
