//! Background-preserving image editing on a small rectified-flow diffusion
//! transformer.
//!
//! The engine trains a tiny class-conditioned DiT on synthetic images and
//! edits them by inverting to noise while caching background key/value pairs
//! per timestep and attention layer, then regenerating only the foreground
//! with queries restricted to foreground tokens. Background pixels are
//! composited from the source image and are bit-exact by construction. An
//! inversion-free variant keeps at most one timestep of cache resident.

pub mod cli;
pub mod error;
pub mod flow;
pub mod imageio;
pub mod infedit;
pub mod kvcache;
pub mod kvedit;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
