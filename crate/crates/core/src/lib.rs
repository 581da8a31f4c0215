//! Differentiable VMAF.
//!
//! Every stage of the metric (pixel-domain VIF, wavelet ADM, motion, SVM
//! regression) is built from primitives recorded on an [`autodiff::Tape`],
//! so the score can be differentiated with respect to anything upstream of
//! the distorted frame, such as a preprocessing convolution kernel.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adm;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod filter_lab;
pub mod fusion;
pub mod gradcheck;
pub mod media;
pub mod motion;
pub mod synth;
pub mod vif;
pub mod vmaf;

pub use autodiff::{Padding, Plane, Tape, Var};
pub use error::{Error, Result};
