//! Bidirectional long-range parser: segment-level attention with a latent
//! block carried across segments in both directions.

pub mod attention;
pub mod ablate;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod fsutil;
pub mod gradcheck;
pub mod latent;
pub mod manifest;
pub mod mask;
pub mod model;
pub mod params;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use config::{Direction, ModelConfig};
pub use error::{Error, Result};
pub use latent::{InitVariant, ProjectionSharing};
pub use mask::BoolMask;
pub use model::{param_count, Model};
pub use tensor::Tensor;
