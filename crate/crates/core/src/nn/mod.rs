//! Feed-forward network stack: ReLU MLP with fixed affine scaling layers,
//! backpropagation, AdamW with decoupled weight decay, and
//! reduce-on-plateau learning-rate scheduling.
//!
//! Scaling layers sit outside the trainable parameters: the input scale
//! maps physical inputs into the unit box the network was fitted on, and
//! the output scale maps normalized outputs back to physical units. Both
//! pass gradients through but never receive any.

mod mlp;
mod optim;
mod scaling;

pub use mlp::{load_model, save_model, Mlp, MlpGrads};
pub use optim::{AdamW, AdamWConfig, LrPlateau, PlateauConfig};
pub use scaling::AffineScale;
