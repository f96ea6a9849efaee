//! Self-supervised consistency training for single-image super-resolution.
//!
//! An online SR network with a projection head is trained on the usual L1
//! reconstruction loss plus a consistency loss against an EMA-updated target
//! network that sees a differently flipped/rotated copy of the same patch.

pub mod augment;
pub mod config;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod models;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
