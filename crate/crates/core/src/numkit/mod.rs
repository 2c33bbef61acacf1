//! Deterministic numeric kernels shared by the rest of the crate.

mod kmeans;
mod rng;
mod tensor;

pub use kmeans::{kmeans, sse, KMeans};
pub use rng::Rng;
pub use tensor::{cosine, matmul, mul_nn, mul_nt, mul_tn, softmax_rows, Tensor, ZERO_NORM};

pub(crate) use tensor::softmax_in_place;
