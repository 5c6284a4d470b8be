//! Numeric substrate: dense tensors, reverse-mode differentiation, the
//! conditioning layers, parameter storage and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, rel_err, CheckStatus, GradCheckReport};
pub use graph::{Gradients, Graph, Var, MASK_SENTINEL};
pub use layers::{sinusoidal_table, AdaLn, FeedForward, Film, Init, LayerSpec, Linear, MultiHeadAttention, ZeroProj};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
