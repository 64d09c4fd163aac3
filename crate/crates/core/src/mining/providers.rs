use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::formats::{read_jmap, read_mask};
use super::grid::PixelRect;
use super::maps::{ScalarMap, SubjectMask};
use super::MiningError;
use crate::index::Embedding;

/// Side of the pooled grid used by [`crop_embedding`].
pub const CROP_GRID: usize = 8;

/// Positive relevance for the concept text plus one map per background prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMaps {
    pub positive: ScalarMap,
    pub negatives: Vec<ScalarMap>,
}

pub trait MaskProvider {
    fn mask(&self, image_id: &str) -> Result<SubjectMask, MiningError>;
}

pub trait DifficultyProvider {
    fn difficulty(&self, image_id: &str) -> Result<ScalarMap, MiningError>;
}

pub trait RelevanceProvider {
    fn relevance(&self, image_id: &str, prompt: &str) -> Result<RelevanceMaps, MiningError>;
}

pub trait PatchEmbedder {
    fn embed(&self, image_id: &str, bbox: PixelRect) -> Result<Embedding, MiningError>;
}

#[derive(Clone, Copy)]
pub struct PerceptionProviders<'a> {
    pub mask: &'a dyn MaskProvider,
    pub difficulty: &'a dyn DifficultyProvider,
    pub relevance: &'a dyn RelevanceProvider,
    pub embedder: &'a dyn PatchEmbedder,
}

impl<'a> PerceptionProviders<'a> {
    /// Uses one object for every role.
    pub fn uniform<P>(p: &'a P) -> Self
    where
        P: MaskProvider + DifficultyProvider + RelevanceProvider + PatchEmbedder,
    {
        Self {
            mask: p,
            difficulty: p,
            relevance: p,
            embedder: p,
        }
    }
}

/// Average-pools the crop to `CROP_GRID × CROP_GRID`, removes the mean and
/// L2-normalizes. A flat crop yields the zero vector.
pub fn crop_embedding(image: &ScalarMap, bbox: PixelRect) -> Result<Embedding, MiningError> {
    let (h, w) = image.shape();
    if bbox.x1 > w || bbox.y1 > h || bbox.x0 >= bbox.x1 || bbox.y0 >= bbox.y1 {
        return Err(MiningError::Shape(format!(
            "crop {bbox:?} outside {h}x{w} image"
        )));
    }
    let span = |lo: usize, len: usize, i: usize| {
        let a = lo + i * len / CROP_GRID;
        let b = (lo + (i + 1) * len / CROP_GRID).max(a + 1);
        a..b
    };
    let mut pooled = Vec::with_capacity(CROP_GRID * CROP_GRID);
    for i in 0..CROP_GRID {
        for j in 0..CROP_GRID {
            let (mut sum, mut n) = (0.0, 0usize);
            for y in span(bbox.y0, bbox.height(), i) {
                for x in span(bbox.x0, bbox.width(), j) {
                    sum += image.get(y, x);
                    n += 1;
                }
            }
            pooled.push(sum / n as f64);
        }
    }
    let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
    pooled.iter_mut().for_each(|v| *v -= mean);
    let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
    let values = pooled
        .iter()
        .map(|v| if norm > 1e-12 { (v / norm) as f32 } else { 0.0 })
        .collect();
    Embedding::new(values).map_err(|_| MiningError::NonFinite)
}

/// Reads precomputed maps laid out as
/// `<root>/<image_id>/{mask,difficulty,relevance,image}.jmap` plus any
/// `background_*.jmap` negatives (sorted by file name).
#[derive(Debug, Clone)]
pub struct FileProvider {
    root: PathBuf,
}

impl FileProvider {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn file(&self, image_id: &str, name: &str) -> PathBuf {
        self.root.join(image_id).join(name)
    }

    /// Image ids are the sub-directories holding a `mask.jmap`, sorted.
    pub fn image_ids(&self) -> Result<Vec<String>, MiningError> {
        let io = |source| MiningError::Io {
            path: self.root.clone(),
            source,
        };
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(&self.root).map_err(io)? {
            let entry = entry.map_err(io)?;
            if entry.path().join("mask.jmap").is_file() {
                if let Some(name) = entry.file_name().to_str() {
                    ids.push(name.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }
}

impl MaskProvider for FileProvider {
    fn mask(&self, image_id: &str) -> Result<SubjectMask, MiningError> {
        read_mask(&self.file(image_id, "mask.jmap"))
    }
}

impl DifficultyProvider for FileProvider {
    fn difficulty(&self, image_id: &str) -> Result<ScalarMap, MiningError> {
        read_jmap(&self.file(image_id, "difficulty.jmap"))
    }
}

impl RelevanceProvider for FileProvider {
    fn relevance(&self, image_id: &str, _prompt: &str) -> Result<RelevanceMaps, MiningError> {
        let positive = read_jmap(&self.file(image_id, "relevance.jmap"))?;
        let dir = self.root.join(image_id);
        let mut names: Vec<String> = std::fs::read_dir(&dir)
            .map_err(|source| MiningError::Io {
                path: dir.clone(),
                source,
            })?
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter(|n| n.starts_with("background_") && n.ends_with(".jmap"))
            .collect();
        names.sort();
        let negatives = names
            .iter()
            .map(|n| read_jmap(&dir.join(n)))
            .collect::<Result<_, _>>()?;
        Ok(RelevanceMaps {
            positive,
            negatives,
        })
    }
}

impl PatchEmbedder for FileProvider {
    fn embed(&self, image_id: &str, bbox: PixelRect) -> Result<Embedding, MiningError> {
        crop_embedding(&read_jmap(&self.file(image_id, "image.jmap"))?, bbox)
    }
}

/// Seeded Gaussian-bump maps for tests and benchmarks. Planted rectangles
/// get maximal difficulty and relevance.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    seed: u64,
    height: usize,
    width: usize,
    negatives: usize,
    planted: BTreeMap<String, Vec<PixelRect>>,
}

#[derive(Debug, Clone)]
struct Scene {
    mask: SubjectMask,
    difficulty: ScalarMap,
    positive: ScalarMap,
    negatives: Vec<ScalarMap>,
    image: ScalarMap,
}

fn bump_field(rng: &mut ChaCha8Rng, h: usize, w: usize, bumps: usize) -> ScalarMap {
    let params: Vec<(f64, f64, f64, f64)> = (0..bumps)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(1.5..(h.min(w) as f64 / 3.0).max(2.0)),
                rng.random_range(0.2..1.0),
            )
        })
        .collect();
    let noise: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..0.05)).collect();
    ScalarMap::from_fn(h, w, |y, x| {
        let bumps: f64 = params
            .iter()
            .map(|(cy, cx, s, a)| {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                a * (-d2 / (2.0 * s * s)).exp()
            })
            .sum();
        bumps + noise[y * w + x]
    })
}

impl SyntheticProvider {
    pub fn new(seed: u64, height: usize, width: usize) -> Self {
        Self {
            seed,
            height,
            width,
            negatives: 2,
            planted: BTreeMap::new(),
        }
    }

    pub fn with_negatives(mut self, n: usize) -> Self {
        self.negatives = n;
        self
    }

    pub fn plant(mut self, image_id: &str, rect: PixelRect) -> Self {
        self.planted
            .entry(image_id.to_string())
            .or_default()
            .push(rect);
        self
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn scene(&self, image_id: &str) -> Scene {
        let mut key = self.seed.to_le_bytes().to_vec();
        key.extend_from_slice(image_id.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(sha2_seed(&key));
        let (h, w) = (self.height, self.width);
        let cy = rng.random_range(0.35..0.65) * h as f64;
        let cx = rng.random_range(0.35..0.65) * w as f64;
        let ry = rng.random_range(0.25..0.45) * h as f64;
        let rx = rng.random_range(0.25..0.45) * w as f64;
        let planted = self.planted.get(image_id).cloned().unwrap_or_default();
        let inside = |y: usize, x: usize| {
            planted
                .iter()
                .any(|r| (r.y0..r.y1).contains(&y) && (r.x0..r.x1).contains(&x))
        };
        let mask = SubjectMask::from_fn(h, w, |y, x| {
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dx = (x as f64 + 0.5 - cx) / rx;
            dy * dy + dx * dx <= 1.0 || inside(y, x)
        });
        let lift = |m: ScalarMap, level: f64| {
            ScalarMap::from_fn(h, w, |y, x| if inside(y, x) { level } else { m.get(y, x) })
        };
        let difficulty = lift(bump_field(&mut rng, h, w, 4), 10.0);
        let positive = lift(bump_field(&mut rng, h, w, 3), 10.0);
        let negatives = (0..self.negatives)
            .map(|_| lift(bump_field(&mut rng, h, w, 2), 0.0))
            .collect();
        let image = bump_field(&mut rng, h, w, 6);
        Scene {
            mask,
            difficulty,
            positive,
            negatives,
            image,
        }
    }
}

fn sha2_seed(bytes: &[u8]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).into()
}

impl MaskProvider for SyntheticProvider {
    fn mask(&self, image_id: &str) -> Result<SubjectMask, MiningError> {
        Ok(self.scene(image_id).mask)
    }
}

impl DifficultyProvider for SyntheticProvider {
    fn difficulty(&self, image_id: &str) -> Result<ScalarMap, MiningError> {
        Ok(self.scene(image_id).difficulty)
    }
}

impl RelevanceProvider for SyntheticProvider {
    fn relevance(&self, image_id: &str, _prompt: &str) -> Result<RelevanceMaps, MiningError> {
        let s = self.scene(image_id);
        Ok(RelevanceMaps {
            positive: s.positive,
            negatives: s.negatives,
        })
    }
}

impl PatchEmbedder for SyntheticProvider {
    fn embed(&self, image_id: &str, bbox: PixelRect) -> Result<Embedding, MiningError> {
        crop_embedding(&self.scene(image_id).image, bbox)
    }
}

impl SyntheticProvider {
    /// Grayscale image the embedder crops from.
    pub fn image(&self, image_id: &str) -> ScalarMap {
        self.scene(image_id).image
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::formats::{write_jmap, write_mask};

    #[test]
    fn crop_embedding_is_unit_or_zero() {
        let img = ScalarMap::from_fn(16, 16, |y, x| (y * 16 + x) as f64);
        let e = crop_embedding(
            &img,
            PixelRect {
                x0: 2,
                y0: 3,
                x1: 9,
                y1: 7,
            },
        )
        .unwrap();
        assert_eq!(e.dim(), CROP_GRID * CROP_GRID);
        assert!((e.norm() - 1.0).abs() < 1e-6);
        let flat = ScalarMap::from_fn(16, 16, |_, _| 2.0);
        let z = crop_embedding(
            &flat,
            PixelRect {
                x0: 0,
                y0: 0,
                x1: 4,
                y1: 4,
            },
        )
        .unwrap();
        assert_eq!(z.norm(), 0.0);
        assert!(crop_embedding(
            &img,
            PixelRect {
                x0: 0,
                y0: 0,
                x1: 17,
                y1: 4
            }
        )
        .is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_planted() {
        let rect = PixelRect {
            x0: 4,
            y0: 4,
            x1: 8,
            y1: 8,
        };
        let p = SyntheticProvider::new(7, 32, 32).plant("a", rect);
        assert_eq!(p.difficulty("a").unwrap(), p.difficulty("a").unwrap());
        assert_ne!(p.difficulty("a").unwrap(), p.difficulty("b").unwrap());
        assert_eq!(p.difficulty("a").unwrap().get(5, 5), 10.0);
        assert!(p.mask("a").unwrap().get(5, 5));
        assert_eq!(p.relevance("a", "dog").unwrap().negatives.len(), 2);
    }

    #[test]
    fn file_provider_reads_layout() {
        let dir = tempfile::tempdir().unwrap();
        let syn = SyntheticProvider::new(1, 16, 16);
        let img_dir = dir.path().join("img0");
        std::fs::create_dir_all(&img_dir).unwrap();
        write_mask(&img_dir.join("mask.jmap"), &syn.mask("img0").unwrap()).unwrap();
        write_jmap(
            &img_dir.join("difficulty.jmap"),
            &syn.difficulty("img0").unwrap(),
        )
        .unwrap();
        let rel = syn.relevance("img0", "").unwrap();
        write_jmap(&img_dir.join("relevance.jmap"), &rel.positive).unwrap();
        write_jmap(&img_dir.join("background_b.jmap"), &rel.negatives[1]).unwrap();
        write_jmap(&img_dir.join("background_a.jmap"), &rel.negatives[0]).unwrap();
        write_jmap(&img_dir.join("image.jmap"), &syn.image("img0")).unwrap();

        let fp = FileProvider::new(dir.path());
        assert_eq!(fp.image_ids().unwrap(), ["img0"]);
        assert_eq!(fp.mask("img0").unwrap(), syn.mask("img0").unwrap());
        let back = fp.relevance("img0", "").unwrap();
        assert_eq!(back.negatives.len(), 2);
        let to_f32 = |m: &ScalarMap| m.values().iter().map(|v| *v as f32).collect::<Vec<_>>();
        assert_eq!(to_f32(&back.negatives[0]), to_f32(&rel.negatives[0]));
        assert!(matches!(fp.mask("missing"), Err(MiningError::Io { .. })));
    }
}
