//! Shared fixtures for the criterion benches.

use kvpersona::decoder::{seeded_model, DecoderConfig, TokenId, ToyDecoder};

/// Deterministic token sequence over the byte vocabulary.
pub fn tokens(n: usize, salt: u32) -> Vec<TokenId> {
    (0..n as u32)
        .map(|i| ((i.wrapping_mul(2_654_435_761).wrapping_add(salt)) >> 7) % 256)
        .map(|t| t as TokenId)
        .collect()
}

pub fn model() -> ToyDecoder<f32> {
    seeded_model(7, DecoderConfig::new(2, 2, 16, 256)).expect("valid config")
}
