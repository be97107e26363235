//! Saliency-masked unsupervised domain adaptation at desk scale.
//!
//! The pipeline trains an image classifier on a labeled source domain and
//! adapts it to an unlabeled target domain by
//!
//! * masking target images with a GrabCut-style segmenter that blurs the
//!   background ([`grabmask`]),
//! * purifying feature vectors with a denoising auto-encoder ([`dae`]),
//! * aligning domains adversarially through a conditional discriminator
//!   behind a gradient-reversal layer ([`model`]),
//! * and self-training a student against pseudo-labels from an EMA teacher
//!   ([`train`]).
//!
//! Everything runs on a small tape-based autodiff engine ([`nn`]) and a
//! self-contained data layer ([`data`]) with PPM/PGM codecs, a synthetic
//! two-domain benchmark generator, and bit-exact checkpoints.

pub mod dae;
pub mod data;
pub mod error;
pub mod grabmask;
pub mod image;
pub mod model;
pub mod nn;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
