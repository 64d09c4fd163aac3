//! Shipped default settings.

use serde::Serialize;

use crate::kv::StorageDtype;
use crate::mining::MiningParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum Decoding {
    #[default]
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Defaults {
    pub grid_size: usize,
    pub fusion_exponent: f64,
    pub k_patch: usize,
    pub k_evidence_images: usize,
    pub k_attr: usize,
    pub min_mask_area: f64,
    pub min_coverage: f64,
    pub decoding: Decoding,
    pub cache_dtype: StorageDtype,
    pub resolution_floor: f64,
    pub max_new_tokens: usize,
    pub text_dim: usize,
    pub q_values: Vec<usize>,
    pub bench_query: String,
}

pub const BENCH_QUERY: &str = "Tell me <mam>'s ear shape, eye color, and hair length.";

impl Default for Defaults {
    fn default() -> Self {
        Self {
            grid_size: 12,
            fusion_exponent: 1.0,
            k_patch: 4,
            k_evidence_images: 5,
            k_attr: 3,
            min_mask_area: 0.01,
            min_coverage: 0.5,
            decoding: Decoding::Greedy,
            cache_dtype: StorageDtype::F16,
            resolution_floor: 0.2,
            max_new_tokens: 8,
            text_dim: 64,
            q_values: vec![1, 2, 4, 8, 16, 32],
            bench_query: BENCH_QUERY.to_string(),
        }
    }
}

impl Defaults {
    pub fn mining_params(&self) -> MiningParams {
        MiningParams {
            grid_size: self.grid_size,
            top_k: self.k_patch,
            fusion_exponent: self.fusion_exponent,
            min_mask_area: self.min_mask_area,
            min_coverage: self.min_coverage,
            evidence_images: self.k_evidence_images,
            ..MiningParams::default()
        }
    }
}
