//! Independent scalar-loop reference implementations used by integration
//! tests. Nothing here calls into the library's algorithms.

#![allow(dead_code)]

/// Raw per-image inputs to the mining oracle, row-major.
pub struct OracleImage {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    pub difficulty: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCell {
    pub image: String,
    pub row: usize,
    pub col: usize,
    pub coverage: f64,
    pub score: f64,
}

/// Largest 4-connected component by depth-first flood fill; the earliest
/// component in row-major order wins ties.
pub fn flood_largest(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut seen = vec![false; h * w];
    let mut best: Vec<usize> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let s = y * w + x;
            if !mask[s] || seen[s] {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![(y, x)];
            seen[s] = true;
            while let Some((cy, cx)) = stack.pop() {
                comp.push(cy * w + cx);
                let mut visit = |ny: usize, nx: usize| {
                    let q = ny * w + nx;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        stack.push((ny, nx));
                    }
                };
                if cy > 0 {
                    visit(cy - 1, cx);
                }
                if cy + 1 < h {
                    visit(cy + 1, cx);
                }
                if cx > 0 {
                    visit(cy, cx - 1);
                }
                if cx + 1 < w {
                    visit(cy, cx + 1);
                }
            }
            if comp.len() > best.len() {
                best = comp;
            }
        }
    }
    let mut out = vec![false; h * w];
    for p in best {
        out[p] = true;
    }
    out
}

pub fn minmax(v: &[f64]) -> Vec<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for x in v {
        if *x < lo {
            lo = *x;
        }
        if *x > hi {
            hi = *x;
        }
    }
    if hi - lo <= 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Candidate cells of every image and the global top-`k`, for `γ = 1`.
pub fn mine(
    images: &[OracleImage],
    g: usize,
    min_mask_area: f64,
    min_coverage: f64,
    k: usize,
) -> (Vec<OracleCell>, Vec<OracleCell>) {
    let mut cells = Vec::new();
    for img in images {
        let (h, w) = (img.height, img.width);
        let mask = flood_largest(&img.mask, h, w);
        let area = mask.iter().filter(|b| **b).count();
        if area == 0 || (area as f64) / ((h * w) as f64) < min_mask_area {
            continue;
        }
        let c = minmax(&img.difficulty);
        let mut diff = vec![0.0; h * w];
        for i in 0..h * w {
            let mut bg = 0.0;
            for (j, n) in img.negatives.iter().enumerate() {
                if j == 0 || n[i] > bg {
                    bg = n[i];
                }
            }
            let d = img.positive[i] - bg;
            diff[i] = if d > 0.0 { d } else { 0.0 };
        }
        let r = minmax(&diff);
        let prod: Vec<f64> = (0..h * w).map(|i| c[i] * r[i]).collect();
        let mut fused = minmax(&prod);
        for i in 0..h * w {
            if !mask[i] {
                fused[i] = 0.0;
            }
        }
        for row in 0..g {
            for col in 0..g {
                let (y0, y1) = (row * h / g, (row + 1) * h / g);
                let (x0, x1) = (col * w / g, (col + 1) * w / g);
                let mut inside = 0usize;
                let mut sum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        if mask[y * w + x] {
                            inside += 1;
                        }
                        sum += fused[y * w + x];
                    }
                }
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                let coverage = inside as f64 / n;
                if coverage >= min_coverage {
                    cells.push(OracleCell {
                        image: img.id.clone(),
                        row,
                        col,
                        coverage,
                        score: sum / n,
                    });
                }
            }
        }
    }
    let mut sorted = cells.clone();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.image.cmp(&b.image))
            .then(a.row.cmp(&b.row))
            .then(a.col.cmp(&b.col))
    });
    sorted.truncate(k);
    (cells, sorted)
}

/// Cosine in f64 with sequential accumulation.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut d, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..a.len() {
        let (x, y) = (a[i] as f64, b[i] as f64);
        d += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    d / (na.sqrt() * nb.sqrt())
}

/// Exhaustive top-`k` positions with scores; ties by position.
pub fn scan_top_k(entries: &[Vec<f32>], query: &[f32], k: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| (i, cosine(e, query)))
        .collect();
    // Stable sort keeps insertion order among equal scores.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    scored.truncate(k);
    scored
}
