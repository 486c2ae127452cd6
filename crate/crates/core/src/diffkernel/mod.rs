//! Reverse-mode differentiation and Adam, sized for training small flows.

mod adam;
mod mat;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use mat::Mat;
pub use tape::{evaluate_with_gradients, Gradients, Tape, Var};
