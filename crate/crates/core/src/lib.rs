//! Training-free personalization through reusable external KV caches.

pub mod decoder;
pub mod defaults;
pub mod harness;
pub mod index;
pub mod kv;
pub mod metadata;
pub mod mining;
pub mod session;
pub mod tensor;
pub mod tokenizer;

pub use decoder::{decoder_forward, seeded_model, DecoderConfig, LayerKv, TokenId, ToyDecoder};
pub use defaults::Defaults;
pub use index::{EvidenceBundle, EvidenceStore, FlatIndex, RetrievalHit};
pub use kv::{assemble, ConceptKVCache, ExternalPrefix, StorageDtype};
pub use metadata::ConceptRecord;
pub use mining::{HardPatch, MiningParams, PatchDescriptor};
pub use session::{Engine, EngineConfig, Session, TurnResult};
pub use tensor::{Matrix2D, Precision, Scalar};
pub use tokenizer::ByteTokenizer;
