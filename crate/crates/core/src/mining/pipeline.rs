use serde::Serialize;

use super::grid::{grid_candidates, select_topk, Candidate, PixelRect};
use super::maps::{fuse, largest_cc, normalize_map, suppress_background, ScalarMap, SubjectMask};
use super::providers::PerceptionProviders;
use super::{MiningError, MiningParams};
use crate::index::{patch_entry_id, Embedding, EntryKind, IndexEntry, Payload};
use crate::metadata::ConceptRecord;

/// Location and statistics of a mined patch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchDescriptor {
    pub concept_id: String,
    pub image_id: String,
    pub row: usize,
    pub col: usize,
    pub bbox: PixelRect,
    pub coverage: f64,
    /// Mean of the fused map over the box.
    pub score: f64,
    pub cell_max: f64,
}

impl PatchDescriptor {
    fn from_candidate(concept_id: &str, c: &Candidate) -> Self {
        Self {
            concept_id: concept_id.to_string(),
            image_id: c.image_id.clone(),
            row: c.row,
            col: c.col,
            bbox: c.bbox,
            coverage: c.coverage,
            score: c.score,
            cell_max: c.cell_max,
        }
    }

    /// Short text form used inside turn prompts.
    pub fn to_text(&self) -> String {
        let b = self.bbox;
        format!(
            "{} [{},{},{},{}] {:.2}",
            self.image_id, b.x0, b.y0, b.x1, b.y1, self.score
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardPatch {
    pub descriptor: PatchDescriptor,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ImageStatus {
    Mined { candidates: usize },
    MaskTooSmall,
    BeyondImageLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageReport {
    pub image_id: String,
    /// Largest-component area over image area.
    pub mask_fraction: f64,
    pub status: ImageStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningOutcome {
    pub concept_id: String,
    pub params: MiningParams,
    /// Selected patches, best first.
    pub patches: Vec<HardPatch>,
    pub entries: Vec<IndexEntry>,
    pub candidates: Vec<Candidate>,
    pub images: Vec<ImageReport>,
}

/// Text used to query the relevance provider for a concept.
pub fn relevance_prompt(record: &ConceptRecord) -> String {
    format!("{} {}", record.concept, record.category)
}

/// Fused map and cleaned mask of one image, or `None` with the mask fraction
/// when the subject is smaller than `min_mask_area`.
pub fn fused_map(
    providers: &PerceptionProviders<'_>,
    image_id: &str,
    prompt: &str,
    params: &MiningParams,
) -> Result<(f64, Option<(ScalarMap, SubjectMask)>), MiningError> {
    let mask = largest_cc(&providers.mask.mask(image_id)?, params.connectivity);
    let (h, w) = mask.shape();
    let fraction = if h * w == 0 {
        0.0
    } else {
        mask.area() as f64 / (h * w) as f64
    };
    if fraction < params.min_mask_area || mask.area() == 0 {
        return Ok((fraction, None));
    }
    let difficulty = normalize_map(&providers.difficulty.difficulty(image_id)?)?;
    let rel = providers.relevance.relevance(image_id, prompt)?;
    let relevance = suppress_background(&rel.positive, &rel.negatives)?;
    let fused = fuse(&difficulty, &relevance, params.fusion_exponent, &mask)?;
    Ok((fraction, Some((fused, mask))))
}

/// Mines the concept's images and returns the global top-k patch pool
/// together with ready-to-insert index entries.
pub fn mine_concept(
    concept_id: &str,
    image_ids: &[String],
    record: &ConceptRecord,
    providers: &PerceptionProviders<'_>,
    params: &MiningParams,
) -> Result<MiningOutcome, MiningError> {
    params.validate()?;
    let prompt = relevance_prompt(record);
    let mut candidates = Vec::new();
    let mut images = Vec::new();
    for (i, image_id) in image_ids.iter().enumerate() {
        if i >= params.evidence_images {
            images.push(ImageReport {
                image_id: image_id.clone(),
                mask_fraction: 0.0,
                status: ImageStatus::BeyondImageLimit,
            });
            continue;
        }
        let (mask_fraction, maps) = fused_map(providers, image_id, &prompt, params)?;
        let status = match maps {
            None => ImageStatus::MaskTooSmall,
            Some((fused, mask)) => {
                let found = grid_candidates(
                    &fused,
                    &mask,
                    params.grid_size,
                    params.min_coverage,
                    image_id,
                )?;
                let n = found.len();
                candidates.extend(found);
                ImageStatus::Mined { candidates: n }
            }
        };
        images.push(ImageReport {
            image_id: image_id.clone(),
            mask_fraction,
            status,
        });
    }

    let mut patches = Vec::new();
    let mut entries = Vec::new();
    for (rank, c) in select_topk(&candidates, params.top_k).iter().enumerate() {
        let descriptor = PatchDescriptor::from_candidate(concept_id, c);
        let embedding = providers.embedder.embed(&c.image_id, c.bbox)?;
        entries.push(IndexEntry {
            entry_id: patch_entry_id(concept_id, rank),
            concept_id: concept_id.to_string(),
            kind: EntryKind::Patch,
            payload: Payload::Patch(descriptor.clone()),
            embedding: embedding.clone(),
        });
        patches.push(HardPatch {
            descriptor,
            embedding,
        });
    }
    Ok(MiningOutcome {
        concept_id: concept_id.to_string(),
        params: *params,
        patches,
        entries,
        candidates,
        images,
    })
}
