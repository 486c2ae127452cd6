//! Evidence estimation from posterior samples with a normalizing flow.
//!
//! The pipeline reads samples with their unnormalized log posterior,
//! preprocesses them into a whitened unbounded space, trains a masked
//! autoregressive flow with a cyclic multi-term loss, and averages the
//! per-sample evidence ratio over a ball in the flow's latent space.

pub mod benchmarks;
pub mod cli;
pub mod diffkernel;
pub mod error;
pub mod evidence;
pub mod flow;
pub mod losses;
pub mod pipeline;
pub mod preprocess;
pub mod sampleio;
pub mod trainer;

pub use error::{FlozError, Result};
