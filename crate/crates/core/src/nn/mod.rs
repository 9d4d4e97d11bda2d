//! Minimal neural substrate: tensors, a reverse-mode tape, layers and Adam.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub(crate) mod linalg;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{AttentionPool, BilinearAttention, Gru, Linear, Mlp, Mode};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{avg_pool_pairs, sigmoid, softmax, Gradients, GruParams, Tape, Var};
pub use tensor::Tensor;

/// `-ln p[gold]`.
pub fn cross_entropy(p: &[f64], gold: usize) -> f64 {
    -p[gold].ln()
}
