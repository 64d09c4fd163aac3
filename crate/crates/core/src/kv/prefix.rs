use std::collections::BTreeSet;

use super::cache::ConceptKVCache;
use super::KvError;
use crate::decoder::{concat_layers, LayerKv};
use crate::tensor::Scalar;

/// Ordered concatenation of concept caches along the sequence axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalPrefix<T> {
    ordered_concepts: Vec<String>,
    l_ext: usize,
    layers: Vec<LayerKv<T>>,
    fingerprint: Option<[u8; 32]>,
    width: usize,
}

impl<T: Scalar> Default for ExternalPrefix<T> {
    fn default() -> Self {
        Self::empty()
    }
}

impl<T: Scalar> ExternalPrefix<T> {
    pub fn empty() -> Self {
        Self {
            ordered_concepts: Vec::new(),
            l_ext: 0,
            layers: Vec::new(),
            fingerprint: None,
            width: 0,
        }
    }

    pub fn ordered_concepts(&self) -> &[String] {
        &self.ordered_concepts
    }

    pub fn l_ext(&self) -> usize {
        self.l_ext
    }

    pub fn layers(&self) -> &[LayerKv<T>] {
        &self.layers
    }

    pub fn fingerprint(&self) -> Option<[u8; 32]> {
        self.fingerprint
    }

    pub fn is_empty(&self) -> bool {
        self.l_ext == 0
    }

    pub fn contains(&self, concept_id: &str) -> bool {
        self.ordered_concepts.iter().any(|c| c == concept_id)
    }

    /// The prefix as decoder `past`, or `None` when nothing is attached.
    pub fn as_past(&self) -> Option<&[LayerKv<T>]> {
        (!self.is_empty()).then_some(self.layers.as_slice())
    }

    /// Appends one more concept cache behind the current prefix.
    pub fn extend(&self, cache: &ConceptKVCache<T>) -> Result<Self, KvError> {
        if self.contains(&cache.concept_id) {
            return Err(KvError::DuplicateConcept(cache.concept_id.clone()));
        }
        if let Some(fp) = self.fingerprint {
            if fp != cache.model_fingerprint {
                return Err(KvError::FingerprintMismatch(cache.concept_id.clone()));
            }
            if self.layers.len() != cache.num_layers() || self.width != cache.width() {
                return Err(KvError::Layout(format!(
                    "{:?} has {} layers of width {}, prefix has {} of width {}",
                    cache.concept_id,
                    cache.num_layers(),
                    cache.width(),
                    self.layers.len(),
                    self.width
                )));
            }
        }
        for (i, layer) in cache.layers.iter().enumerate() {
            if layer.k.rows() != cache.prefix_len() || layer.v.rows() != cache.prefix_len() {
                return Err(KvError::Layout(format!(
                    "{:?} layer {i} rows do not match prefix length {}",
                    cache.concept_id,
                    cache.prefix_len()
                )));
            }
        }
        let layers = concat_layers(&self.layers, &cache.layers)
            .map_err(|e| KvError::Layout(e.to_string()))?;
        let mut ordered_concepts = self.ordered_concepts.clone();
        ordered_concepts.push(cache.concept_id.clone());
        Ok(Self {
            ordered_concepts,
            l_ext: self.l_ext + cache.prefix_len(),
            layers,
            fingerprint: Some(cache.model_fingerprint),
            width: cache.width(),
        })
    }

    /// Raw little-endian bytes of every K/V value, layer-major.
    pub fn payload_bytes(&self) -> Vec<u8> {
        self.layers
            .iter()
            .flat_map(|l| l.k.data().iter().chain(l.v.data()))
            .flat_map(|v| v.as_f64().to_le_bytes())
            .collect()
    }
}

/// Concatenates caches in exactly the given order.
pub fn assemble<'a, T: Scalar + 'a>(
    caches: impl IntoIterator<Item = &'a ConceptKVCache<T>>,
) -> Result<ExternalPrefix<T>, KvError> {
    let caches: Vec<_> = caches.into_iter().collect();
    let mut seen = BTreeSet::new();
    for c in &caches {
        if !seen.insert(c.concept_id.as_str()) {
            return Err(KvError::DuplicateConcept(c.concept_id.clone()));
        }
    }
    caches
        .into_iter()
        .try_fold(ExternalPrefix::empty(), |acc, c| acc.extend(c))
}

/// Assembles in the canonical (lexicographic concept id) order.
pub fn assemble_canonical<'a, T: Scalar + 'a>(
    caches: impl IntoIterator<Item = &'a ConceptKVCache<T>>,
) -> Result<ExternalPrefix<T>, KvError> {
    let mut caches: Vec<_> = caches.into_iter().collect();
    caches.sort_by(|a, b| a.concept_id.cmp(&b.concept_id));
    assemble(caches)
}
