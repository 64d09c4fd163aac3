//! On-disk repository layout and loaders.
//!
//! ```text
//! <repo>/metadata.json
//! <repo>/patches/<concept>.tsv   manifest
//! <repo>/patches/<concept>.emb   patch embeddings, one row per manifest line
//! <repo>/index/embedder.conf     text_dim, seed
//! <repo>/index/attributes.emb
//! <repo>/caches/<concept>.jkv
//! <repo>/turns.log
//! <repo>/bench/bench.{tsv,json}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use kvpersona::index::{
    attribute_entry_id, read_embeddings, Embedding, EvidenceStore, HashedTrigramEmbedder,
};
use kvpersona::metadata::{load_metadata, ConceptRecord};
use kvpersona::mining::{read_manifest, HardPatch};

use crate::error::CliError;

pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn metadata(&self) -> PathBuf {
        self.root.join("metadata.json")
    }

    pub fn patches_dir(&self) -> PathBuf {
        self.root.join("patches")
    }

    pub fn manifest(&self, concept_id: &str) -> PathBuf {
        self.patches_dir().join(format!("{concept_id}.tsv"))
    }

    pub fn patch_embeddings(&self, concept_id: &str) -> PathBuf {
        self.patches_dir().join(format!("{concept_id}.emb"))
    }

    pub fn index_dir(&self) -> PathBuf {
        self.root.join("index")
    }

    pub fn embedder_conf(&self) -> PathBuf {
        self.index_dir().join("embedder.conf")
    }

    pub fn attribute_embeddings(&self) -> PathBuf {
        self.index_dir().join("attributes.emb")
    }

    pub fn caches(&self) -> PathBuf {
        self.root.join("caches")
    }

    pub fn turn_log(&self) -> PathBuf {
        self.root.join("turns.log")
    }

    pub fn bench_dir(&self) -> PathBuf {
        self.root.join("bench")
    }

    pub fn ensure_dir(path: &Path) -> Result<(), CliError> {
        fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
    }

    pub fn write(path: &Path, text: &str) -> Result<(), CliError> {
        if let Some(parent) = path.parent() {
            Self::ensure_dir(parent)?;
        }
        fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<String, CliError> {
        fs::read_to_string(path).map_err(|e| CliError::io(path, e))
    }

    pub fn records(&self) -> Result<BTreeMap<String, ConceptRecord>, CliError> {
        let path = self.metadata();
        if !path.is_file() {
            return Err(CliError::Data(format!(
                "{}: not found (run `kvpersona validate` first)",
                path.display()
            )));
        }
        Ok(load_metadata(&path)?)
    }

    /// Mined patches of `concept_id`, or an empty pool when none were mined.
    pub fn patches(&self, concept_id: &str) -> Result<Vec<HardPatch>, CliError> {
        let manifest = self.manifest(concept_id);
        if !manifest.is_file() {
            return Ok(Vec::new());
        }
        let rows = read_manifest(&manifest, &Self::read(&manifest)?)?;
        let emb_path = self.patch_embeddings(concept_id);
        let (_, embeddings) = read_embeddings(&Self::read(&emb_path)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", emb_path.display())))?;
        rows.into_iter()
            .map(|row| {
                let embedding = embeddings
                    .get(row.emb_offset)
                    .map(|(_, e)| e.clone())
                    .ok_or_else(|| {
                        CliError::Data(format!(
                            "{}: no embedding row {}",
                            emb_path.display(),
                            row.emb_offset
                        ))
                    })?;
                Ok(HardPatch {
                    descriptor: row.descriptor,
                    embedding,
                })
            })
            .collect()
    }

    pub fn embedder(&self) -> Result<HashedTrigramEmbedder, CliError> {
        let path = self.embedder_conf();
        if !path.is_file() {
            return Err(CliError::Data(format!(
                "{}: not found (run `kvpersona index` first)",
                path.display()
            )));
        }
        let conf = crate::settings::parse_config(&Self::read(&path)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let field = |k: &str| -> Result<u64, CliError> {
            conf.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::Data(format!("{}: missing {k}", path.display())))
        };
        Ok(HashedTrigramEmbedder::new(
            field("text_dim")? as usize,
            field("seed")?,
        )?)
    }

    /// Evidence store rebuilt from metadata, the attribute index and the
    /// mined patch pools.
    pub fn store(&self) -> Result<EvidenceStore, CliError> {
        let records = self.records()?;
        let embedder = self.embedder()?;
        let emb_path = self.attribute_embeddings();
        let (_, rows) = read_embeddings(&Self::read(&emb_path)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", emb_path.display())))?;
        let mut by_id: BTreeMap<String, Embedding> = rows.into_iter().collect();
        let mut store = EvidenceStore::new(Box::new(embedder));
        for (id, record) in records {
            let embeddings = (0..record.fingerprint_attributes.len())
                .map(|i| {
                    by_id.remove(&attribute_entry_id(&id, i)).ok_or_else(|| {
                        CliError::Data(format!(
                            "index is stale for {id:?} (rerun `kvpersona index`)"
                        ))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let patches = self.patches(&id)?;
            store.add_concept_embedded(&id, record, embeddings)?;
            store.add_patches(&id, &patches)?;
        }
        Ok(store)
    }
}
