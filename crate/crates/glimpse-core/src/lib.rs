//! Core of a recurrent hard-attention classifier with a log-polar field of
//! view.
//!
//! The crate is `no_std` (alloc only) and holds everything that does not
//! touch the filesystem: a small tape-based reverse-mode autodiff engine,
//! the log-polar glimpse sampler, neural layers, the dual-pathway recurrent
//! model, the hybrid supervised/policy-gradient training losses, dataset
//! synthesis, and the PGD/SPSA attack kernels. File formats, checkpoints and
//! the CLI live in the companion `glimpse` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod adam;
pub mod attack;
pub mod autodiff;
pub mod data;
pub mod gradcheck;
pub mod image;
pub mod layers;
pub mod model;
pub mod real;
pub mod sampler;
pub mod seeds;
pub mod train;

pub use adam::AdamState;
pub use autodiff::{Tape, TensorId};
pub use image::ImageBuffer;
pub use model::{Episode, FixationPolicy, Model, ModelConfig};
pub use real::Real;
pub use sampler::{Fixation, FovConfig, GlimpseTensor};
