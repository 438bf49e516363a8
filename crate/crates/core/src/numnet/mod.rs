//! Minimal dense network engine: MLPs, reverse-mode gradients, Adam, and a
//! finite-difference gradient oracle.

mod adam;
mod checkpoint;
mod gradcheck;
mod mlp;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{decode_mlp, encode_mlp, load_mlp, save_mlp, NET_MAGIC, NET_VERSION};
pub use gradcheck::finite_diff_check;
pub use mlp::{tanh, tanh_slice, ForwardCache, Mlp, MlpGrads};
