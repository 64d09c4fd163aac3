//! Seeded toy transformer decoder used as the frozen backbone and as the
//! correctness oracle for external KV attachment.
//!
//! Architecture: token embedding, `num_layers` pre-norm blocks (multi-head
//! attention with rotary keys/queries, then a ReLU² MLP), final norm and a
//! linear output head. No biases, no dropout, no learnable norm gains.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{
    attend_head, prefix_causal_mask, rotate_in_place, HeadView, Matrix2D, Scalar, TensorError,
};

pub type TokenId = u32;

const NORM_EPS: f64 = 1e-5;
const MLP_RATIO: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum DecoderError {
    #[error("invalid decoder config: {0}")]
    InvalidConfig(String),
    #[error("token {token} outside vocabulary of {vocab}")]
    OutOfVocab { token: TokenId, vocab: usize },
    #[error("past KV has {got} layers, model has {expected}")]
    LayerMismatch { expected: usize, got: usize },
    #[error("past KV malformed: {0}")]
    PastShape(String),
    #[error("no input tokens")]
    EmptyInput,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
}

impl DecoderConfig {
    /// Config with `model_dim = num_heads * head_dim` and the usual rotary base.
    pub fn new(num_layers: usize, num_heads: usize, head_dim: usize, vocab_size: usize) -> Self {
        Self {
            num_layers,
            num_heads,
            head_dim,
            model_dim: num_heads * head_dim,
            vocab_size,
            rope_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        let counts = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("model_dim", self.model_dim),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(DecoderError::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.model_dim != self.num_heads * self.head_dim {
            return Err(DecoderError::InvalidConfig(format!(
                "model_dim {} is not num_heads {} x head_dim {}",
                self.model_dim, self.num_heads, self.head_dim
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(DecoderError::InvalidConfig(format!(
                "head_dim {} must be even for rotary encoding",
                self.head_dim
            )));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(DecoderError::InvalidConfig(
                "rope_base must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Identity of the frozen model built from `(seed, self)`.
    pub fn fingerprint(&self, seed: u64) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"kvpersona-toy-decoder/v1");
        h.update(seed.to_le_bytes());
        for v in [
            self.num_layers,
            self.num_heads,
            self.head_dim,
            self.model_dim,
            self.vocab_size,
        ] {
            h.update((v as u64).to_le_bytes());
        }
        h.update(self.rope_base.to_bits().to_le_bytes());
        h.finalize().into()
    }
}

/// Key and value rows for one layer; each row is `num_heads * head_dim` wide
/// and keys are already rotary-encoded at their absolute positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv<T> {
    pub k: Matrix2D<T>,
    pub v: Matrix2D<T>,
}

impl<T: Scalar> LayerKv<T> {
    pub fn empty(width: usize) -> Self {
        Self {
            k: Matrix2D::zeros(0, width),
            v: Matrix2D::zeros(0, width),
        }
    }

    pub fn len(&self) -> usize {
        self.k.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.rows() == 0
    }

    pub fn concat(&self, tail: &Self) -> Result<Self, TensorError> {
        Ok(Self {
            k: self.k.vstack(&tail.k)?,
            v: self.v.vstack(&tail.v)?,
        })
    }
}

/// Concatenates two per-layer KV stacks along the sequence axis.
pub fn concat_layers<T: Scalar>(
    head: &[LayerKv<T>],
    tail: &[LayerKv<T>],
) -> Result<Vec<LayerKv<T>>, TensorError> {
    if head.is_empty() {
        return Ok(tail.to_vec());
    }
    if head.len() != tail.len() {
        return Err(TensorError::Shape(format!(
            "{} layers vs {} layers",
            head.len(),
            tail.len()
        )));
    }
    head.iter().zip(tail).map(|(a, b)| a.concat(b)).collect()
}

#[derive(Debug, Clone)]
struct Block<T> {
    wq: Matrix2D<T>,
    wk: Matrix2D<T>,
    wv: Matrix2D<T>,
    wo: Matrix2D<T>,
    up: Matrix2D<T>,
    down: Matrix2D<T>,
}

impl<T> Block<T> {
    fn weights(&self) -> [&Matrix2D<T>; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.up, &self.down]
    }
}

#[derive(Debug, Clone)]
pub struct ToyDecoder<T> {
    config: DecoderConfig,
    seed: u64,
    embed: Matrix2D<T>,
    blocks: Vec<Block<T>>,
    head: Matrix2D<T>,
}

/// Output of one forward call.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `len(tokens) × vocab_size`.
    pub logits: Matrix2D<T>,
    /// Keys and values of the input tokens only, one entry per layer.
    pub new_kv: Vec<LayerKv<T>>,
}

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix2D<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Matrix2D::from_fn(rows, cols, |_, _| T::of(dist.sample(rng)))
}

/// Builds the deterministic model for `(seed, config)`.
///
/// Weights are drawn in f64 from a ChaCha8 stream in a fixed order and then
/// cast, so the f32 and f64 models of one seed are roundings of each other.
pub fn seeded_model<T: Scalar>(
    seed: u64,
    config: DecoderConfig,
) -> Result<ToyDecoder<T>, DecoderError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.model_dim;
    let hidden = MLP_RATIO * d;
    let embed = gaussian(&mut rng, config.vocab_size, d, 1.0);
    let inv = |n: usize| 1.0 / (n as f64).sqrt();
    let blocks = (0..config.num_layers)
        .map(|_| Block {
            wq: gaussian(&mut rng, d, d, inv(d)),
            wk: gaussian(&mut rng, d, d, inv(d)),
            wv: gaussian(&mut rng, d, d, inv(d)),
            wo: gaussian(&mut rng, d, d, inv(d)),
            up: gaussian(&mut rng, hidden, d, inv(d)),
            down: gaussian(&mut rng, d, hidden, inv(hidden)),
        })
        .collect();
    let head = gaussian(&mut rng, config.vocab_size, d, inv(d));
    Ok(ToyDecoder {
        config,
        seed,
        embed,
        blocks,
        head,
    })
}

fn rms_norm<T: Scalar>(x: &Matrix2D<T>) -> Matrix2D<T> {
    let mut out = x.clone();
    let eps = T::of(NORM_EPS);
    let n = T::of(x.cols() as f64);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| *v * *v).sum::<T>() / n;
        let inv = T::one() / (ms + eps).sqrt();
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
    out
}

fn add_in_place<T: Scalar>(acc: &mut Matrix2D<T>, delta: &Matrix2D<T>) {
    for r in 0..acc.rows() {
        for (a, b) in acc.row_mut(r).iter_mut().zip(delta.row(r)) {
            *a = *a + *b;
        }
    }
}

impl<T: Scalar> ToyDecoder<T> {
    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.config.fingerprint(self.seed)
    }

    fn all_weights(&self) -> impl Iterator<Item = &Matrix2D<T>> {
        std::iter::once(&self.embed)
            .chain(self.blocks.iter().flat_map(|b| b.weights()))
            .chain(std::iter::once(&self.head))
    }

    /// Every weight in construction order as little-endian f64 bytes.
    pub fn weight_bytes(&self) -> Vec<u8> {
        self.all_weights()
            .flat_map(|m| m.data().iter())
            .flat_map(|v| v.as_f64().to_le_bytes())
            .collect()
    }

    /// SHA-256 over [`Self::weight_bytes`], hex encoded.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.weight_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn rotate_heads(&self, x: &mut Matrix2D<T>, offset: usize) {
        let hd = self.config.head_dim;
        for r in 0..x.rows() {
            for head in x.row_mut(r).chunks_exact_mut(hd) {
                rotate_in_place(head, offset + r, self.config.rope_base);
            }
        }
    }
}

fn check_past<T: Scalar>(
    config: &DecoderConfig,
    past: &[LayerKv<T>],
) -> Result<usize, DecoderError> {
    if past.len() != config.num_layers {
        return Err(DecoderError::LayerMismatch {
            expected: config.num_layers,
            got: past.len(),
        });
    }
    let l_ext = past[0].len();
    for (i, layer) in past.iter().enumerate() {
        if layer.k.rows() != l_ext || layer.v.rows() != l_ext {
            return Err(DecoderError::PastShape(format!(
                "layer {i} has {}/{} rows, expected {l_ext}",
                layer.k.rows(),
                layer.v.rows()
            )));
        }
        if l_ext > 0 && (layer.k.cols() != config.model_dim || layer.v.cols() != config.model_dim) {
            return Err(DecoderError::PastShape(format!(
                "layer {i} width {} != model_dim {}",
                layer.k.cols(),
                config.model_dim
            )));
        }
    }
    Ok(l_ext)
}

/// Runs `tokens` through the model behind an optional external prefix.
///
/// With `past` of length `l_ext`, current tokens are rotary-encoded at
/// absolute positions `l_ext..l_ext+n`, attend to every prefix row and
/// causally to each other.
pub fn decoder_forward<T: Scalar>(
    model: &ToyDecoder<T>,
    tokens: &[TokenId],
    past: Option<&[LayerKv<T>]>,
) -> Result<ForwardOutput<T>, DecoderError> {
    let cfg = &model.config;
    if tokens.is_empty() {
        return Err(DecoderError::EmptyInput);
    }
    if let Some(&token) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(DecoderError::OutOfVocab {
            token,
            vocab: cfg.vocab_size,
        });
    }
    let past = past.filter(|p| !p.is_empty());
    let l_ext = match past {
        Some(p) => check_past(cfg, p)?,
        None => 0,
    };
    let n = tokens.len();
    let mask = prefix_causal_mask(l_ext, n)?;
    let scale = T::one() / T::of(cfg.head_dim as f64).sqrt();

    let mut h = Matrix2D::from_fn(n, cfg.model_dim, |r, c| {
        model.embed.get(tokens[r] as usize, c)
    });
    let mut new_kv = Vec::with_capacity(cfg.num_layers);
    let mut scores = Vec::new();

    for (layer, block) in model.blocks.iter().enumerate() {
        let a = rms_norm(&h);
        let mut q = a.matmul_t(&block.wq);
        let mut k = a.matmul_t(&block.wk);
        let v = a.matmul_t(&block.wv);
        model.rotate_heads(&mut q, l_ext);
        model.rotate_heads(&mut k, l_ext);
        let current = LayerKv { k, v };
        let full = match past {
            Some(p) => p[layer].concat(&current)?,
            None => current.clone(),
        };

        let mut attn = Matrix2D::zeros(n, cfg.model_dim);
        for head in 0..cfg.num_heads {
            let view = HeadView {
                offset: head * cfg.head_dim,
                width: cfg.head_dim,
            };
            attend_head(
                &q,
                &full.k,
                &full.v,
                &mask,
                view,
                view,
                scale,
                &mut attn,
                &mut scores,
            );
        }
        add_in_place(&mut h, &attn.matmul_t(&block.wo));

        let m = rms_norm(&h);
        let mut up = m.matmul_t(&block.up);
        for r in 0..up.rows() {
            for x in up.row_mut(r) {
                let relu = x.max(T::zero());
                *x = relu * relu;
            }
        }
        add_in_place(&mut h, &up.matmul_t(&block.down));
        new_kv.push(current);
    }

    let logits = rms_norm(&h).matmul_t(&model.head);
    Ok(ForwardOutput { logits, new_kv })
}
