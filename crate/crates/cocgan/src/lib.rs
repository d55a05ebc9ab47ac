//! CoC-GAN: a GAN whose generator and discriminator are built entirely from
//! point-set clustering blocks and fully-connected layers — no convolutions,
//! no attention. Images are carried as sets of feature points on a
//! normalized grid; upsampling and downsampling happen by increasing and
//! reducing the point count.
//!
//! The crate bundles its own reverse-mode tensor core ([`tensor`]), the
//! clustering blocks ([`cluster`]), both network assemblies ([`model`]),
//! adversarial training ([`train`]), FID/KID/IS evaluation against a small
//! trained feature extractor ([`metrics`]), IDX dataset ingestion
//! ([`data`]), and an operator CLI ([`cli`]).

pub mod checkpoint;
pub mod cluster;
pub mod error;
pub mod data;
pub mod imgio;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod points;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
