//! Minimal feed-forward network machinery: parameter storage, forward
//! evaluation, reverse-pass gradient accumulation, Adam updates and the
//! temporal embedding. Enough for every MLP head in the pipeline; not a
//! general autodiff graph.

mod adam;
mod embed;
mod mlp;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use embed::TemporalEmbedding;
pub use mlp::{Activation, MlpGrads, MlpNet};
pub(crate) use mlp::{read_f32, read_u32};
