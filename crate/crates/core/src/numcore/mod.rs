//! Numeric substrate: dense tensors, counter-based random streams,
//! log-domain primitives and a small reverse-mode autodiff engine.

mod graph;
mod logspace;
mod optim;
mod rng;
mod tensor;

pub use graph::{Adjoints, Graph, NodeId};
pub use logspace::{log_softmax, log_sum_exp, softmax};
pub use optim::{Adam, AdamConfig};
pub use rng::{RngStream, RNG_SCHEME};
pub use tensor::Tensor;
