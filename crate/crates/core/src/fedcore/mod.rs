//! Aggregation calculus: encoder averaging, partially personalized decoder
//! aggregation on both ends, per-filter update consistency and the
//! patience-driven personalization mask.

mod aggregate;
mod mask;

pub use aggregate::{
    aggregate_encoders, aggregate_server_decoder, build_client_decoder, compute_deltas,
    consistency_matrix, eta_weights, filter_consistency, DecoderSnapshot, EtaRule,
    DEFAULT_LAMBDA, ETA_EPS,
};
pub use mask::{MaskRow, PersonalizationMask};
