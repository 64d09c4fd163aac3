use half::f16;
use serde::{Deserialize, Serialize};

use super::prefix::ExternalPrefix;
use super::KvError;
use crate::decoder::{decoder_forward, LayerKv, TokenId, ToyDecoder};
use crate::tensor::{Matrix2D, Precision, Scalar};

/// Element encoding of a persisted cache. In-memory values of a cache are
/// always exactly representable in its dtype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StorageDtype {
    F16,
    F32,
    F64,
}

impl StorageDtype {
    pub fn code(self) -> u8 {
        match self {
            Self::F16 => 1,
            Self::F32 => 2,
            Self::F64 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Self::F16),
            2 => Some(Self::F32),
            3 => Some(Self::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::F16 => 2,
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    pub fn native(precision: Precision) -> Self {
        match precision {
            Precision::F32 => Self::F32,
            Precision::F64 => Self::F64,
        }
    }

    /// Rounds `v` to the nearest value this dtype can hold.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            Self::F16 => f16::from_f64(v).to_f64(),
            Self::F32 => v as f32 as f64,
            Self::F64 => v,
        }
    }

    pub(crate) fn encode(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Self::F16 => out.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
            Self::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Self::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }

    pub(crate) fn decode(self, bytes: &[u8]) -> f64 {
        match self {
            Self::F16 => f16::from_le_bytes([bytes[0], bytes[1]]).to_f64(),
            Self::F32 => f32::from_le_bytes(bytes.try_into().expect("4 bytes")) as f64,
            Self::F64 => f64::from_le_bytes(bytes.try_into().expect("8 bytes")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::F16 => "f16",
            Self::F32 => "f32",
            Self::F64 => "f64",
        }
    }
}

impl std::str::FromStr for StorageDtype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f16" => Ok(Self::F16),
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(format!("unknown dtype {other:?}")),
        }
    }
}

/// Query-independent key/value states of one concept's text prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptKVCache<T> {
    pub concept_id: String,
    pub prefix_tokens: Vec<TokenId>,
    pub num_heads: usize,
    pub head_dim: usize,
    pub layers: Vec<LayerKv<T>>,
    pub dtype: StorageDtype,
    pub model_fingerprint: [u8; 32],
}

impl<T: Scalar> ConceptKVCache<T> {
    pub fn prefix_len(&self) -> usize {
        self.prefix_tokens.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Re-encodes the cache so every value is representable in `dtype`.
    pub fn with_dtype(mut self, dtype: StorageDtype) -> Self {
        let round = |m: &Matrix2D<T>| {
            let data = m
                .data()
                .iter()
                .map(|v| T::of(dtype.quantize(v.as_f64())))
                .collect();
            Matrix2D::new(m.rows(), m.cols(), data).expect("rounded values stay finite")
        };
        for layer in &mut self.layers {
            layer.k = round(&layer.k);
            layer.v = round(&layer.v);
        }
        self.dtype = dtype;
        self
    }

    /// Every K/V value in file order (layer-major, K before V).
    pub fn payload(&self) -> impl Iterator<Item = T> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.k.data().iter().chain(l.v.data()).copied())
    }
}

fn build_cache<T: Scalar>(
    model: &ToyDecoder<T>,
    concept_id: &str,
    prefix_tokens: &[TokenId],
    past: Option<&[LayerKv<T>]>,
) -> Result<ConceptKVCache<T>, KvError> {
    if prefix_tokens.is_empty() {
        return Err(KvError::EmptyPrefix);
    }
    let out = decoder_forward(model, prefix_tokens, past)?;
    Ok(ConceptKVCache {
        concept_id: concept_id.to_string(),
        prefix_tokens: prefix_tokens.to_vec(),
        num_heads: model.config().num_heads,
        head_dim: model.config().head_dim,
        layers: out.new_kv,
        dtype: StorageDtype::native(T::PRECISION),
        model_fingerprint: model.fingerprint(),
    })
}

/// One-time prefill of a concept prefix at positions `0..prefix_len`.
pub fn prefill_concept<T: Scalar>(
    model: &ToyDecoder<T>,
    concept_id: &str,
    prefix_tokens: &[TokenId],
) -> Result<ConceptKVCache<T>, KvError> {
    build_cache(model, concept_id, prefix_tokens, None)
}

/// Prefill of a concept prefix conditioned on an existing external prefix:
/// positions start at `prefix.l_ext()` and the new tokens attend to it.
///
/// The resulting cache is only meaningful when attached directly behind
/// `prefix`; `prefix.extend(&cache)` then equals prefilling the joint token
/// sequence in one pass.
pub fn prefill_after<T: Scalar>(
    model: &ToyDecoder<T>,
    prefix: &ExternalPrefix<T>,
    concept_id: &str,
    prefix_tokens: &[TokenId],
) -> Result<ConceptKVCache<T>, KvError> {
    if let Some(fp) = prefix.fingerprint() {
        if fp != model.fingerprint() {
            return Err(KvError::FingerprintMismatch(concept_id.to_string()));
        }
    }
    build_cache(model, concept_id, prefix_tokens, prefix.as_past())
}
