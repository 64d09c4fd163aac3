//! External KV caches: per-concept prefill, ordered assembly into an
//! external prefix, incremental extension and on-disk persistence.

mod cache;
mod format;
mod prefix;
mod repository;

use thiserror::Error;

use crate::decoder::DecoderError;

pub use cache::{prefill_after, prefill_concept, ConceptKVCache, StorageDtype};
pub use format::{load_cache, read_cache, read_header, save_cache, write_cache, CacheHeader};
pub use prefix::{assemble, assemble_canonical, ExternalPrefix};
pub use repository::CacheRepository;

pub const CACHE_MAGIC: &[u8; 4] = b"JKV1";
pub const CACHE_VERSION: u16 = 1;
pub const CACHE_EXTENSION: &str = "jkv";

#[derive(Debug, Error)]
pub enum KvError {
    #[error("concept prefix is empty")]
    EmptyPrefix,
    #[error("cache for {0:?} was built by a different model")]
    FingerprintMismatch(String),
    #[error("concept {0:?} appears twice")]
    DuplicateConcept(String),
    #[error("incompatible cache layout: {0}")]
    Layout(String),
    #[error("not a cache file (bad magic)")]
    BadMagic,
    #[error("unsupported cache version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("cache file truncated: need {expected} bytes, have {got}")]
    Truncated { expected: usize, got: usize },
    #[error("cache file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("corrupt cache: {0}")]
    Corrupt(String),
    #[error("invalid concept id {0:?}")]
    InvalidConceptId(String),
    #[error("no cache stored for {0:?}")]
    NotFound(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
}
