//! Exact flat cosine index over attribute and patch embeddings, a
//! deterministic hashed-trigram text embedder, and per-turn evidence
//! selection.

use std::collections::{BTreeMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metadata::ConceptRecord;
use crate::mining::{HardPatch, PatchDescriptor};

pub const MIN_TEXT_DIM: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("embedding dim {got} does not match index dim {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("text embeddings need dim >= {MIN_TEXT_DIM}, got {0}")]
    DimTooSmall(usize),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("duplicate entry id {0:?}")]
    DuplicateId(String),
    #[error("non-finite embedding value")]
    NonFinite,
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
    #[error("embedding file line {line}: {message}")]
    Exchange { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f32>,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self, IndexError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// Cosine similarity accumulated in f64; zero vectors score 0.
pub fn cosine(a: &Embedding, b: &Embedding) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.values.iter().zip(&b.values) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Embedding;
}

/// Bag of character trigrams, each mapped to a seeded Gaussian direction,
/// summed and L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedTrigramEmbedder {
    dim: usize,
    seed: u64,
}

impl HashedTrigramEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self, IndexError> {
        if dim < MIN_TEXT_DIM {
            return Err(IndexError::DimTooSmall(dim));
        }
        Ok(Self { dim, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

fn trigram_counts(s: &str) -> BTreeMap<u64, u32> {
    let chars: Vec<char> = s.chars().collect();
    let mut counts = BTreeMap::new();
    if chars.len() < 3 {
        *counts.entry(fnv1a(s.as_bytes())).or_insert(0) += 1;
        return counts;
    }
    let mut buf = String::new();
    for w in chars.windows(3) {
        buf.clear();
        buf.extend(w);
        *counts.entry(fnv1a(buf.as_bytes())).or_insert(0) += 1;
    }
    counts
}

impl TextEmbedder for HashedTrigramEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Embedding {
        let mut acc = vec![0.0f64; self.dim];
        for (gram, count) in trigram_counts(text) {
            let mut key = self.seed.to_le_bytes().to_vec();
            key.extend_from_slice(&gram.to_le_bytes());
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&key));
            for a in acc.iter_mut() {
                let x: f64 = StandardNormal.sample(&mut rng);
                *a += count as f64 * x;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        let values = acc.iter().map(|v| (v / norm) as f32).collect();
        Embedding { values }
    }
}

/// Convenience form of [`HashedTrigramEmbedder::embed`].
pub fn embed_text(s: &str, dim: usize, seed: u64) -> Result<Embedding, IndexError> {
    Ok(HashedTrigramEmbedder::new(dim, seed)?.embed(s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntryKind {
    Attribute,
    Patch,
    /// Concept name or caption, used for concept resolution.
    Profile,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Text(String),
    Patch(PatchDescriptor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub entry_id: String,
    pub concept_id: String,
    pub kind: EntryKind,
    pub payload: Payload,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalHit {
    pub entry_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
    /// Insertion position inside the index.
    pub position: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Filter<'a> {
    pub concept: Option<&'a str>,
    pub kind: Option<EntryKind>,
}

impl Filter<'_> {
    fn accepts(&self, e: &IndexEntry) -> bool {
        self.concept.is_none_or(|c| c == e.concept_id) && self.kind.is_none_or(|k| k == e.kind)
    }
}

/// Exhaustive cosine scan; hits are ordered by score, then insertion order.
#[derive(Debug, Clone)]
pub struct FlatIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
    ids: HashSet<String>,
}

impl FlatIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
            ids: HashSet::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, position: usize) -> &IndexEntry {
        &self.entries[position]
    }

    pub fn insert(&mut self, entry: IndexEntry) -> Result<(), IndexError> {
        if entry.embedding.dim() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                got: entry.embedding.dim(),
            });
        }
        if !self.ids.insert(entry.entry_id.clone()) {
            return Err(IndexError::DuplicateId(entry.entry_id));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn top_k(
        &self,
        query: &Embedding,
        k: usize,
        filter: Filter<'_>,
    ) -> Result<Vec<RetrievalHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| filter.accepts(e))
            .map(|(i, e)| (cosine(query, &e.embedding), i))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(r, (score, position))| RetrievalHit {
                entry_id: self.entries[position].entry_id.clone(),
                score,
                rank: r + 1,
                position,
            })
            .collect())
    }
}

/// Serializes `(entry_id, embedding)` pairs as `dim=<d>` followed by
/// `entry_id<TAB>v1 v2 ... vd` lines.
pub fn write_embeddings<'a>(
    dim: usize,
    rows: impl IntoIterator<Item = (&'a str, &'a Embedding)>,
) -> String {
    let mut out = format!("dim={dim}\n");
    for (id, e) in rows {
        out.push_str(id);
        out.push('\t');
        let values: Vec<String> = e.values().iter().map(|v| v.to_string()).collect();
        out.push_str(&values.join(" "));
        out.push('\n');
    }
    out
}

pub fn read_embeddings(text: &str) -> Result<(usize, Vec<(String, Embedding)>), IndexError> {
    let err = |line: usize, message: String| IndexError::Exchange { line, message };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let dim: usize = header
        .strip_prefix("dim=")
        .and_then(|d| d.trim().parse().ok())
        .ok_or_else(|| err(1, format!("bad header {header:?}")))?;
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (id, values) = line
            .split_once('\t')
            .ok_or_else(|| err(i + 1, "missing tab".into()))?;
        let values: Vec<f32> = values
            .split_whitespace()
            .map(|v| {
                v.parse()
                    .map_err(|_| err(i + 1, format!("bad value {v:?}")))
            })
            .collect::<Result<_, _>>()?;
        if values.len() != dim {
            return Err(err(
                i + 1,
                format!("{} values, expected {dim}", values.len()),
            ));
        }
        let e = Embedding::new(values).map_err(|e| err(i + 1, e.to_string()))?;
        rows.push((id.to_string(), e));
    }
    Ok((dim, rows))
}

/// Evidence chosen for one turn.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceBundle {
    pub concept_id: String,
    pub attributes: Vec<(String, f64)>,
    pub patches: Vec<(PatchDescriptor, f64)>,
}

pub fn attribute_entry_id(concept_id: &str, i: usize) -> String {
    format!("attr:{concept_id}:{i}")
}

pub fn patch_entry_id(concept_id: &str, rank: usize) -> String {
    format!("patch:{concept_id}:{rank}")
}

/// Text and visual evidence indexes for a set of concepts.
pub struct EvidenceStore {
    embedder: Box<dyn TextEmbedder>,
    records: BTreeMap<String, ConceptRecord>,
    attributes: FlatIndex,
    profiles: FlatIndex,
    patches: Option<FlatIndex>,
    patch_pool: BTreeMap<String, Vec<PatchDescriptor>>,
}

impl EvidenceStore {
    pub fn new(embedder: Box<dyn TextEmbedder>) -> Self {
        let dim = embedder.dim();
        Self {
            embedder,
            records: BTreeMap::new(),
            attributes: FlatIndex::new(dim),
            profiles: FlatIndex::new(dim),
            patches: None,
            patch_pool: BTreeMap::new(),
        }
    }

    pub fn embedder(&self) -> &dyn TextEmbedder {
        self.embedder.as_ref()
    }

    pub fn records(&self) -> &BTreeMap<String, ConceptRecord> {
        &self.records
    }

    pub fn record(&self, concept_id: &str) -> Option<&ConceptRecord> {
        self.records.get(concept_id)
    }

    pub fn attribute_index(&self) -> &FlatIndex {
        &self.attributes
    }

    pub fn patch_index(&self) -> Option<&FlatIndex> {
        self.patches.as_ref()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Indexes a concept's attributes (embedded with the store's embedder).
    pub fn add_concept(
        &mut self,
        concept_id: &str,
        record: ConceptRecord,
    ) -> Result<(), IndexError> {
        let embedded: Vec<Embedding> = record
            .fingerprint_attributes
            .iter()
            .map(|a| self.embedder.embed(a))
            .collect();
        self.add_concept_embedded(concept_id, record, embedded)
    }

    /// Indexes a concept with externally supplied attribute embeddings, in
    /// attribute order.
    pub fn add_concept_embedded(
        &mut self,
        concept_id: &str,
        record: ConceptRecord,
        attribute_embeddings: Vec<Embedding>,
    ) -> Result<(), IndexError> {
        if self.records.contains_key(concept_id) {
            return Err(IndexError::DuplicateId(concept_id.to_string()));
        }
        if attribute_embeddings.len() != record.fingerprint_attributes.len() {
            return Err(IndexError::Exchange {
                line: 0,
                message: format!(
                    "{concept_id}: {} embeddings for {} attributes",
                    attribute_embeddings.len(),
                    record.fingerprint_attributes.len()
                ),
            });
        }
        for (i, (text, embedding)) in record
            .fingerprint_attributes
            .iter()
            .zip(attribute_embeddings)
            .enumerate()
        {
            self.attributes.insert(IndexEntry {
                entry_id: attribute_entry_id(concept_id, i),
                concept_id: concept_id.to_string(),
                kind: EntryKind::Attribute,
                payload: Payload::Text(text.clone()),
                embedding,
            })?;
        }
        for (field, text) in [("name", &record.concept), ("caption", &record.caption)] {
            self.profiles.insert(IndexEntry {
                entry_id: format!("profile:{concept_id}:{field}"),
                concept_id: concept_id.to_string(),
                kind: EntryKind::Profile,
                payload: Payload::Text(text.clone()),
                embedding: self.embedder.embed(text),
            })?;
        }
        self.records.insert(concept_id.to_string(), record);
        Ok(())
    }

    /// Adds a mined patch pool (in selection order) to the visual index.
    pub fn add_patches(
        &mut self,
        concept_id: &str,
        patches: &[HardPatch],
    ) -> Result<(), IndexError> {
        for (rank, p) in patches.iter().enumerate() {
            let index = self
                .patches
                .get_or_insert_with(|| FlatIndex::new(p.embedding.dim()));
            index.insert(IndexEntry {
                entry_id: patch_entry_id(concept_id, rank),
                concept_id: concept_id.to_string(),
                kind: EntryKind::Patch,
                payload: Payload::Patch(p.descriptor.clone()),
                embedding: p.embedding.clone(),
            })?;
        }
        self.patch_pool
            .entry(concept_id.to_string())
            .or_default()
            .extend(patches.iter().map(|p| p.descriptor.clone()));
        Ok(())
    }

    pub fn patch_pool(&self, concept_id: &str) -> &[PatchDescriptor] {
        self.patch_pool.get(concept_id).map_or(&[], Vec::as_slice)
    }

    /// Best text (and optionally visual) similarity of `query` to each
    /// concept, in concept id order.
    pub fn concept_scores(
        &self,
        query: &str,
        image: Option<&Embedding>,
    ) -> Result<Vec<(String, f64)>, IndexError> {
        let q = self.embedder.embed(query);
        let mut best: BTreeMap<&str, f64> = self
            .records
            .keys()
            .map(|k| (k.as_str(), f64::NEG_INFINITY))
            .collect();
        let mut bump = |concept: &str, score: f64| {
            if let Some(b) = best.get_mut(concept) {
                *b = b.max(score);
            }
        };
        for e in self
            .profiles
            .entries()
            .iter()
            .chain(self.attributes.entries())
        {
            bump(&e.concept_id, cosine(&q, &e.embedding));
        }
        if let (Some(img), Some(index)) = (image, &self.patches) {
            if img.dim() != index.dim() {
                return Err(IndexError::DimMismatch {
                    expected: index.dim(),
                    got: img.dim(),
                });
            }
            for e in index.entries() {
                bump(&e.concept_id, cosine(img, &e.embedding));
            }
        }
        Ok(best.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }

    /// Top attributes of `concept_id` for `query`, plus its top patches.
    ///
    /// Patches are ranked by cosine to `query_image` when one is given and
    /// otherwise keep their mining order (descending mining score).
    pub fn select_evidence(
        &self,
        concept_id: &str,
        query: &str,
        query_image: Option<&Embedding>,
        k_attr: usize,
        k_patch: usize,
    ) -> Result<EvidenceBundle, IndexError> {
        if !self.records.contains_key(concept_id) {
            return Err(IndexError::UnknownConcept(concept_id.to_string()));
        }
        let filter = Filter {
            concept: Some(concept_id),
            kind: None,
        };
        let attributes = if k_attr == 0 {
            Vec::new()
        } else {
            let q = self.embedder.embed(query);
            self.attributes
                .top_k(&q, k_attr, filter)?
                .into_iter()
                .map(|h| match &self.attributes.get(h.position).payload {
                    Payload::Text(t) => (t.clone(), h.score),
                    Payload::Patch(_) => unreachable!("attribute index holds text"),
                })
                .collect()
        };
        let patches = match (k_patch, query_image, &self.patches) {
            (0, _, _) => Vec::new(),
            (k, Some(img), Some(index)) => index
                .top_k(img, k, filter)?
                .into_iter()
                .map(|h| match &index.get(h.position).payload {
                    Payload::Patch(p) => (p.clone(), h.score),
                    Payload::Text(_) => unreachable!("patch index holds patches"),
                })
                .collect(),
            (k, _, _) => self
                .patch_pool(concept_id)
                .iter()
                .take(k)
                .map(|p| (p.clone(), p.score))
                .collect(),
        };
        Ok(EvidenceBundle {
            concept_id: concept_id.to_string(),
            attributes,
            patches,
        })
    }
}
