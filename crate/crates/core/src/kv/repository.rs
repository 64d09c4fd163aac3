use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::format::{load_cache, read_header, write_cache};
use super::{ConceptKVCache, KvError, CACHE_EXTENSION};
use crate::decoder::TokenId;
use crate::tensor::Scalar;

/// Directory of `<root>/<concept_id>.jkv` files, one per concept.
///
/// Writers replace files atomically via rename, so concurrent readers see
/// either the old or the new cache.
#[derive(Debug, Clone)]
pub struct CacheRepository {
    root: PathBuf,
}

pub(crate) fn validate_concept_id(id: &str) -> Result<(), KvError> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_alphanumeric() || matches!(c, '_' | '-' | '.' | '+' | '@'));
    if ok {
        Ok(())
    } else {
        Err(KvError::InvalidConceptId(id.to_string()))
    }
}

impl CacheRepository {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, KvError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, concept_id: &str) -> Result<PathBuf, KvError> {
        validate_concept_id(concept_id)?;
        Ok(self.root.join(format!("{concept_id}.{CACHE_EXTENSION}")))
    }

    pub fn contains(&self, concept_id: &str) -> bool {
        self.path_for(concept_id).is_ok_and(|p| p.is_file())
    }

    pub fn store<T: Scalar>(&self, cache: &ConceptKVCache<T>) -> Result<PathBuf, KvError> {
        let path = self.path_for(&cache.concept_id)?;
        let tmp = path.with_extension(format!("{CACHE_EXTENSION}.tmp{}", std::process::id()));
        let mut buf = Vec::new();
        write_cache(cache, &mut buf)?;
        fs::write(&tmp, buf)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn load<T: Scalar>(&self, concept_id: &str) -> Result<ConceptKVCache<T>, KvError> {
        let path = self.path_for(concept_id)?;
        if !path.is_file() {
            return Err(KvError::NotFound(concept_id.to_string()));
        }
        load_cache(&path)
    }

    /// True when a stored cache was built by `fingerprint` from exactly
    /// `tokens`.
    pub fn is_current(&self, concept_id: &str, fingerprint: &[u8; 32], tokens: &[TokenId]) -> bool {
        self.path_for(concept_id)
            .ok()
            .filter(|p| p.is_file())
            .and_then(|p| read_header(&p).ok())
            .is_some_and(|h| &h.model_fingerprint == fingerprint && h.prefix_tokens == tokens)
    }

    /// Stored concept ids, sorted.
    pub fn concept_ids(&self) -> Result<Vec<String>, KvError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some(CACHE_EXTENSION) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Model fingerprint of every stored cache.
    pub fn fingerprints(&self) -> Result<BTreeMap<String, [u8; 32]>, KvError> {
        self.concept_ids()?
            .into_iter()
            .map(|id| {
                let header = read_header(&self.path_for(&id)?)?;
                Ok((id, header.model_fingerprint))
            })
            .collect()
    }
}
