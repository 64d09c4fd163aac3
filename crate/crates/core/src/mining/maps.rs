use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::MiningError;

/// H×W real-valued map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ScalarMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, MiningError> {
        if values.len() != height * width {
            return Err(MiningError::Shape(format!(
                "{} values for a {height}x{width} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MiningError::NonFinite);
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Binary subject mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl SubjectMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, MiningError> {
        if bits.len() != height * width {
            return Err(MiningError::Shape(format!(
                "{} bits for a {height}x{width} mask",
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Self::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Self::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Keeps only the largest connected component. Equal-sized components are
/// resolved in favour of the one whose first pixel comes first in
/// row-major order.
pub fn largest_cc(mask: &SubjectMask, connectivity: Connectivity) -> SubjectMask {
    let (h, w) = mask.shape();
    let mut label = vec![0u32; h * w];
    let mut best: (usize, u32) = (0, 0);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for (dy, dx) in connectivity.offsets() {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if mask.bits[q] && label[q] == 0 {
                    label[q] = next;
                    queue.push_back(q);
                }
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    SubjectMask {
        height: h,
        width: w,
        bits: label.iter().map(|&l| best.0 > 0 && l == best.1).collect(),
    }
}

/// Min-max rescale to `[0, 1]`; constant maps become all zeros.
pub fn normalize_map(m: &ScalarMap) -> Result<ScalarMap, MiningError> {
    if m.values.iter().any(|v| !v.is_finite()) {
        return Err(MiningError::NonFinite);
    }
    let min = m.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = m.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let values = if m.values.is_empty() || range <= 0.0 {
        vec![0.0; m.values.len()]
    } else {
        m.values.iter().map(|v| (v - min) / range).collect()
    };
    Ok(ScalarMap {
        height: m.height,
        width: m.width,
        values,
    })
}

fn same_shape(a: (usize, usize), b: (usize, usize), what: &str) -> Result<(), MiningError> {
    if a != b {
        return Err(MiningError::Shape(format!(
            "{what} is {}x{}, expected {}x{}",
            b.0, b.1, a.0, a.1
        )));
    }
    Ok(())
}

/// `normalize(ReLU(R⁺ − max_b R⁻_b))`; with no negatives the max is 0.
pub fn suppress_background(
    positive: &ScalarMap,
    negatives: &[ScalarMap],
) -> Result<ScalarMap, MiningError> {
    for n in negatives {
        same_shape(positive.shape(), n.shape(), "background map")?;
    }
    let values = (0..positive.values.len())
        .map(|i| {
            let background = negatives
                .iter()
                .map(|n| n.values[i])
                .fold(None, |acc: Option<f64>, v| {
                    Some(acc.map_or(v, |a| a.max(v)))
                })
                .unwrap_or(0.0);
            (positive.values[i] - background).max(0.0)
        })
        .collect();
    normalize_map(&ScalarMap::new(positive.height, positive.width, values)?)
}

/// `normalize(C · R^γ) ⊙ M`.
pub fn fuse(
    difficulty: &ScalarMap,
    relevance: &ScalarMap,
    gamma: f64,
    mask: &SubjectMask,
) -> Result<ScalarMap, MiningError> {
    same_shape(difficulty.shape(), relevance.shape(), "relevance map")?;
    same_shape(difficulty.shape(), mask.shape(), "subject mask")?;
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(MiningError::InvalidParams(format!(
            "fusion exponent {gamma}"
        )));
    }
    let product: Vec<f64> = difficulty
        .values
        .iter()
        .zip(&relevance.values)
        .map(|(c, r)| c * r.powf(gamma))
        .collect();
    let mut fused = normalize_map(&ScalarMap::new(
        difficulty.height,
        difficulty.width,
        product,
    )?)?;
    for (v, inside) in fused.values.iter_mut().zip(&mask.bits) {
        if !inside {
            *v = 0.0;
        }
    }
    Ok(fused)
}
