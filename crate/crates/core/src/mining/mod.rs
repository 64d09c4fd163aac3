//! Concept-only hard patch mining over pluggable perception maps.

mod formats;
mod grid;
mod maps;
mod pipeline;
mod providers;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use formats::{
    read_jmap, read_manifest, read_mask, write_jmap, write_manifest, write_mask, ManifestRow,
    JMAP_MAGIC,
};
pub use grid::{
    candidate_order, cell_box, cell_span, grid_candidates, select_topk, Candidate, PixelRect,
};
pub use maps::{
    fuse, largest_cc, normalize_map, suppress_background, Connectivity, ScalarMap, SubjectMask,
};
pub use pipeline::{
    fused_map, mine_concept, relevance_prompt, HardPatch, ImageReport, ImageStatus, MiningOutcome,
    PatchDescriptor,
};
pub use providers::{
    crop_embedding, DifficultyProvider, FileProvider, MaskProvider, PatchEmbedder,
    PerceptionProviders, RelevanceMaps, RelevanceProvider, SyntheticProvider, CROP_GRID,
};

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite map value")]
    NonFinite,
    #[error("invalid mining parameters: {0}")]
    InvalidParams(String),
    #[error("grid {g}x{g} does not fit a {height}x{width} image")]
    GridTooLarge {
        g: usize,
        height: usize,
        width: usize,
    },
    #[error("provider failed for image {image_id:?}: {message}")]
    Provider { image_id: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

/// Knobs of the mining procedure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningParams {
    pub grid_size: usize,
    pub top_k: usize,
    pub fusion_exponent: f64,
    /// Minimum subject area as a fraction of the image.
    pub min_mask_area: f64,
    /// Minimum in-mask fraction of a cell.
    pub min_coverage: f64,
    pub connectivity: Connectivity,
    /// Only the first this-many images of a concept are mined.
    pub evidence_images: usize,
}

impl Default for MiningParams {
    fn default() -> Self {
        Self {
            grid_size: 12,
            top_k: 4,
            fusion_exponent: 1.0,
            min_mask_area: 0.01,
            min_coverage: 0.5,
            connectivity: Connectivity::Four,
            evidence_images: 5,
        }
    }
}

impl MiningParams {
    pub fn validate(&self) -> Result<(), MiningError> {
        let bad = |m: String| Err(MiningError::InvalidParams(m));
        if self.grid_size == 0 {
            return bad("grid size must be at least 1".into());
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if !(self.fusion_exponent.is_finite() && self.fusion_exponent >= 0.0) {
            return bad(format!("fusion exponent {}", self.fusion_exponent));
        }
        if !(0.0..=1.0).contains(&self.min_mask_area) {
            return bad(format!("min mask area {}", self.min_mask_area));
        }
        if !(self.min_coverage > 0.0 && self.min_coverage <= 1.0) {
            return bad(format!("min coverage {}", self.min_coverage));
        }
        if self.evidence_images == 0 {
            return bad("evidence_images must be at least 1".into());
        }
        Ok(())
    }
}
