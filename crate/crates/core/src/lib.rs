//! Non-uniform score-based diffusion.
//!
//! Forward SDE families with closed-form perturbation kernels, diagonal
//! non-uniform SDEs, reverse-time samplers, multi-scale Haar diffusion with
//! a cascaded sampler, and the conditional score estimators CDE, CDiffE and
//! CMDE. Everything here is `no_std` with `alloc`; file formats and the
//! command line live in the companion `nudiff-cli` crate.
#![no_std]

extern crate alloc;

pub mod conditional;
pub mod error;
pub mod image;
pub mod linalg;
mod math;
pub mod metrics;
pub mod multiscale;
pub mod rng;
pub mod score;
pub mod sde;
pub mod synthdata;
pub mod verify;
pub mod wavelet;

pub use error::{Error, Result};
pub use image::Image;
