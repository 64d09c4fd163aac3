use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::maps::{ScalarMap, SubjectMask};
use super::MiningError;

/// Pixel rectangle `[x0, x1) × [y0, y1)`; `x` is the column axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

/// Bounds of cell `i` of `g` along an axis of length `extent`. Cells differ
/// in size by at most one pixel.
pub fn cell_span(extent: usize, g: usize, i: usize) -> (usize, usize) {
    (i * extent / g, (i + 1) * extent / g)
}

/// Box of grid cell `(row, col)` on an `height × width` image.
pub fn cell_box(height: usize, width: usize, g: usize, row: usize, col: usize) -> PixelRect {
    let (y0, y1) = cell_span(height, g, row);
    let (x0, x1) = cell_span(width, g, col);
    PixelRect { x0, y0, x1, y1 }
}

/// A grid cell that passed the coverage threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub image_id: String,
    pub row: usize,
    pub col: usize,
    pub bbox: PixelRect,
    /// Fraction of the box inside the subject mask.
    pub coverage: f64,
    /// Mean of the fused map over the whole box.
    pub score: f64,
    /// Max of the fused map over the box.
    pub cell_max: f64,
}

/// Scores every `g × g` cell and keeps those with coverage `>= min_coverage`.
pub fn grid_candidates(
    fused: &ScalarMap,
    mask: &SubjectMask,
    g: usize,
    min_coverage: f64,
    image_id: &str,
) -> Result<Vec<Candidate>, MiningError> {
    let (h, w) = fused.shape();
    if mask.shape() != (h, w) {
        return Err(MiningError::Shape(format!(
            "mask {:?} vs fused map {:?}",
            mask.shape(),
            (h, w)
        )));
    }
    if g == 0 || g > h.min(w) {
        return Err(MiningError::GridTooLarge {
            g,
            height: h,
            width: w,
        });
    }
    let mut out = Vec::new();
    for row in 0..g {
        for col in 0..g {
            let bbox = cell_box(h, w, g, row, col);
            let mut inside = 0usize;
            let mut sum = 0.0;
            let mut max = f64::NEG_INFINITY;
            for y in bbox.y0..bbox.y1 {
                for x in bbox.x0..bbox.x1 {
                    inside += usize::from(mask.get(y, x));
                    let v = fused.get(y, x);
                    sum += v;
                    max = max.max(v);
                }
            }
            let area = bbox.area() as f64;
            let coverage = inside as f64 / area;
            if coverage < min_coverage {
                continue;
            }
            out.push(Candidate {
                image_id: image_id.to_string(),
                row,
                col,
                bbox,
                coverage,
                score: sum / area,
                cell_max: max,
            });
        }
    }
    Ok(out)
}

/// Descending score, ties by `(image_id, row, col)` ascending.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| a.row.cmp(&b.row))
        .then_with(|| a.col.cmp(&b.col))
}

/// Global top-`k` over the merged candidate list.
pub fn select_topk(candidates: &[Candidate], k: usize) -> Vec<Candidate> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(candidate_order);
    sorted.truncate(k);
    sorted
}
