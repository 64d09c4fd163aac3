//! `JKV1` cache files, little-endian throughout:
//!
//! ```text
//! magic "JKV1" | u16 version | u8 dtype | u32 layers | u32 heads | u32 head_dim
//! | u32 prefix_len | 32-byte model fingerprint | prefix_len × u32 token ids
//! | for each layer: K rows then V rows (prefix_len × heads·head_dim, dtype)
//! | u32 CRC32 of every preceding byte
//! ```
//!
//! The concept id is not stored; it is the file stem.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::cache::{ConceptKVCache, StorageDtype};
use super::{KvError, CACHE_MAGIC, CACHE_VERSION};
use crate::decoder::{LayerKv, TokenId};
use crate::tensor::{Matrix2D, Scalar};

const FIXED_HEADER: usize = 4 + 2 + 1 + 4 * 4 + 32;

/// Header fields of a cache file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheHeader {
    pub dtype: StorageDtype,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub model_fingerprint: [u8; 32],
    pub prefix_tokens: Vec<TokenId>,
}

impl CacheHeader {
    fn payload_len(&self) -> usize {
        let n = self.prefix_tokens.len();
        2 * self.num_layers * n * self.num_heads * self.head_dim * self.dtype.size()
    }
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn write_cache<T: Scalar, W: Write>(
    cache: &ConceptKVCache<T>,
    mut w: W,
) -> Result<(), KvError> {
    let n = cache.prefix_len();
    let mut buf = Vec::with_capacity(FIXED_HEADER + 4 * n + 8);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.push(cache.dtype.code());
    for v in [cache.num_layers(), cache.num_heads, cache.head_dim, n] {
        let v = u32::try_from(v).map_err(|_| KvError::Layout(format!("{v} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&cache.model_fingerprint);
    for t in &cache.prefix_tokens {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    for layer in &cache.layers {
        if layer.k.rows() != n || layer.v.rows() != n {
            return Err(KvError::Layout(
                "layer rows differ from prefix length".into(),
            ));
        }
    }
    for v in cache.payload() {
        cache.dtype.encode(v.as_f64(), &mut buf);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    w.write_all(&buf)?;
    Ok(())
}

fn parse_header(bytes: &[u8]) -> Result<CacheHeader, KvError> {
    if bytes.len() < 4 || &bytes[..4] != CACHE_MAGIC {
        return Err(KvError::BadMagic);
    }
    if bytes.len() < FIXED_HEADER {
        return Err(KvError::Truncated {
            expected: FIXED_HEADER,
            got: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CACHE_VERSION {
        return Err(KvError::UnsupportedVersion(version));
    }
    let dtype = StorageDtype::from_code(bytes[6]).ok_or(KvError::UnknownDtype(bytes[6]))?;
    let num_layers = u32_at(bytes, 7) as usize;
    let num_heads = u32_at(bytes, 11) as usize;
    let head_dim = u32_at(bytes, 15) as usize;
    let prefix_len = u32_at(bytes, 19) as usize;
    let model_fingerprint: [u8; 32] = bytes[23..55].try_into().expect("32 bytes");
    let tokens_end = FIXED_HEADER + 4 * prefix_len;
    if bytes.len() < tokens_end {
        return Err(KvError::Truncated {
            expected: tokens_end,
            got: bytes.len(),
        });
    }
    let prefix_tokens = (0..prefix_len)
        .map(|i| u32_at(bytes, FIXED_HEADER + 4 * i))
        .collect();
    Ok(CacheHeader {
        dtype,
        num_layers,
        num_heads,
        head_dim,
        model_fingerprint,
        prefix_tokens,
    })
}

/// Reads a cache, converting stored values into `T`.
pub fn read_cache<T: Scalar, R: Read>(
    mut r: R,
    concept_id: &str,
) -> Result<ConceptKVCache<T>, KvError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let header = parse_header(&bytes)?;
    let n = header.prefix_tokens.len();
    let payload_start = FIXED_HEADER + 4 * n;
    let expected = payload_start + header.payload_len() + 4;
    if bytes.len() < expected {
        return Err(KvError::Truncated {
            expected,
            got: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(KvError::TrailingBytes(bytes.len() - expected));
    }
    let stored = u32_at(&bytes, expected - 4);
    let computed = crc32fast::hash(&bytes[..expected - 4]);
    if stored != computed {
        return Err(KvError::ChecksumMismatch { stored, computed });
    }
    if n == 0 || header.num_layers == 0 || header.num_heads == 0 || header.head_dim == 0 {
        return Err(KvError::Corrupt("zero-sized dimension".into()));
    }

    let width = header.num_heads * header.head_dim;
    let size = header.dtype.size();
    let mut values = bytes[payload_start..expected - 4]
        .chunks_exact(size)
        .map(|c| {
            let v = header.dtype.decode(c);
            if v.is_finite() {
                Ok(T::of(v))
            } else {
                Err(KvError::Corrupt("non-finite value".into()))
            }
        });
    let take = |values: &mut dyn Iterator<Item = Result<T, KvError>>| {
        let data = values.take(n * width).collect::<Result<Vec<_>, _>>()?;
        Matrix2D::new(n, width, data).map_err(|e| KvError::Corrupt(e.to_string()))
    };
    let mut layers = Vec::with_capacity(header.num_layers);
    for _ in 0..header.num_layers {
        let k = take(&mut values)?;
        let v = take(&mut values)?;
        layers.push(LayerKv { k, v });
    }
    Ok(ConceptKVCache {
        concept_id: concept_id.to_string(),
        prefix_tokens: header.prefix_tokens,
        num_heads: header.num_heads,
        head_dim: header.head_dim,
        layers,
        dtype: header.dtype,
        model_fingerprint: header.model_fingerprint,
    })
}

/// Reads only the header (through the token ids) of a cache file.
pub fn read_header(path: &Path) -> Result<CacheHeader, KvError> {
    let mut file = fs::File::open(path)?;
    let mut fixed = vec![0u8; FIXED_HEADER];
    let got = read_up_to(&mut file, &mut fixed)?;
    fixed.truncate(got);
    if got < FIXED_HEADER {
        return parse_header(&fixed);
    }
    let prefix_len = u32_at(&fixed, 19) as usize;
    let mut tokens = vec![0u8; 4 * prefix_len];
    let got = read_up_to(&mut file, &mut tokens)?;
    fixed.extend_from_slice(&tokens[..got]);
    parse_header(&fixed)
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            k => filled += k,
        }
    }
    Ok(filled)
}

pub fn save_cache<T: Scalar>(cache: &ConceptKVCache<T>, path: &Path) -> Result<(), KvError> {
    let mut buf = Vec::new();
    write_cache(cache, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Loads a cache; the concept id is taken from the file stem.
pub fn load_cache<T: Scalar>(path: &Path) -> Result<ConceptKVCache<T>, KvError> {
    let concept_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| KvError::InvalidConceptId(path.display().to_string()))?;
    read_cache(fs::File::open(path)?, concept_id)
}
