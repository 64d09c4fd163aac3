//! Query-time pipeline: resolve the concept, attach its external KV cache,
//! select evidence and decode greedily behind the attached prefix.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use regex::Regex;
use thiserror::Error;

use crate::decoder::{concat_layers, decoder_forward, DecoderError, LayerKv, TokenId, ToyDecoder};
use crate::defaults::Defaults;
use crate::index::{Embedding, EvidenceBundle, EvidenceStore, IndexError};
use crate::kv::{
    assemble_canonical, prefill_concept, CacheRepository, ConceptKVCache, ExternalPrefix, KvError,
    StorageDtype,
};
use crate::metadata::ConceptRecord;
use crate::mining::PatchDescriptor;
use crate::tensor::Scalar;
use crate::tokenizer::ByteTokenizer;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("no concept resolved (best similarity {best:?})")]
    Unresolved { best: Option<f64> },
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
    #[error("empty query")]
    EmptyQuery,
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub k_attr: usize,
    pub k_patch: usize,
    pub max_new_tokens: usize,
    pub resolution_floor: f64,
    pub cache_dtype: StorageDtype,
    /// Store freshly prefilled caches in the repository.
    pub write_back: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let d = Defaults::default();
        Self {
            k_attr: d.k_attr,
            k_patch: d.k_patch,
            max_new_tokens: d.max_new_tokens,
            resolution_floor: d.resolution_floor,
            cache_dtype: d.cache_dtype,
            write_back: false,
        }
    }
}

/// Token sequence whose KV forms a concept's external cache.
pub fn concept_prefix_tokens(record: &ConceptRecord, tokenizer: &ByteTokenizer) -> Vec<TokenId> {
    tokenizer.encode(&record.linearize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    pub concept_id: String,
    /// True when named by an explicit `<tag>`.
    pub explicit: bool,
    pub score: f64,
}

fn tag_pattern() -> &'static Regex {
    static TAG: OnceLock<Regex> = OnceLock::new();
    TAG.get_or_init(|| Regex::new(r"<([^<>\s]+)>").expect("valid regex"))
}

fn strip_tag(s: &str) -> &str {
    s.trim().trim_start_matches('<').trim_end_matches('>')
}

/// Explicit `<tag>` naming a concept id (or concept name) wins; otherwise the
/// best retrieval score, which must reach `floor`.
pub fn resolve_concept(
    query: &str,
    image: Option<&Embedding>,
    store: &EvidenceStore,
    floor: f64,
) -> Result<Resolution, SessionError> {
    if store.is_empty() {
        return Err(SessionError::Unresolved { best: None });
    }
    for cap in tag_pattern().captures_iter(query) {
        let tag = &cap[1];
        let hit = store.records().iter().find(|(id, rec)| {
            id.as_str() == tag || strip_tag(&rec.concept).eq_ignore_ascii_case(tag)
        });
        if let Some((id, _)) = hit {
            return Ok(Resolution {
                concept_id: id.clone(),
                explicit: true,
                score: 1.0,
            });
        }
    }
    let scores = store.concept_scores(query, image)?;
    let mut best: Option<(String, f64)> = None;
    for (id, s) in scores {
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((id, s));
        }
    }
    match best {
        Some((concept_id, score)) if score >= floor => Ok(Resolution {
            concept_id,
            explicit: false,
            score,
        }),
        other => Err(SessionError::Unresolved {
            best: other.map(|(_, s)| s),
        }),
    }
}

/// Fixed prompt frame around the evidence and the query.
pub fn build_turn_text(attributes: &[String], patch_lines: &[String], query: &str) -> String {
    let mut s = String::new();
    if !attributes.is_empty() {
        s.push_str("evidence:\n");
        for a in attributes {
            let _ = writeln!(s, "- {a}");
        }
    }
    if !patch_lines.is_empty() {
        s.push_str("patches:\n");
        for p in patch_lines {
            let _ = writeln!(s, "- {p}");
        }
    }
    let _ = write!(s, "question: {query}\nanswer:");
    s
}

/// Attributes, then patch descriptors, then the query.
pub fn build_turn_tokens(
    bundle: &EvidenceBundle,
    query: &str,
    tokenizer: &ByteTokenizer,
) -> Vec<TokenId> {
    build_turn_tokens_with(bundle, query, tokenizer, None)
}

/// Maps a patch to the token ids that stand for it in the turn context.
pub type PatchTokenizer<'a> = &'a dyn Fn(&PatchDescriptor) -> Vec<TokenId>;

/// Like [`build_turn_tokens`] but patches are replaced by caller-supplied
/// token ids (for example from a vision adapter) when `patch_tokens` is set.
pub fn build_turn_tokens_with(
    bundle: &EvidenceBundle,
    query: &str,
    tokenizer: &ByteTokenizer,
    patch_tokens: Option<PatchTokenizer<'_>>,
) -> Vec<TokenId> {
    let attributes: Vec<String> = bundle.attributes.iter().map(|(a, _)| a.clone()).collect();
    match patch_tokens {
        None => {
            let lines: Vec<String> = bundle.patches.iter().map(|(p, _)| p.to_text()).collect();
            tokenizer.encode(&build_turn_text(&attributes, &lines, query))
        }
        Some(f) => {
            let head = build_turn_text(&attributes, &[], "");
            let (evidence, _) = head.split_at(head.len() - "question: \nanswer:".len());
            let mut tokens = tokenizer.encode(evidence);
            for (p, _) in &bundle.patches {
                tokens.extend(f(p));
            }
            tokens.extend(tokenizer.encode(&format!("question: {query}\nanswer:")));
            tokens
        }
    }
}

/// Index of the largest value; ties go to the smallest id.
pub fn argmax<T: Scalar>(row: &[T]) -> TokenId {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Output of greedy decoding behind a prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded<T> {
    pub tokens: Vec<TokenId>,
    /// Logits of the last input token, which choose the first output token.
    pub first_logits: Vec<T>,
}

/// Prefills `input` behind `past` and decodes `max_new` tokens greedily.
pub fn greedy_decode<T: Scalar>(
    model: &ToyDecoder<T>,
    past: Option<&[LayerKv<T>]>,
    input: &[TokenId],
    max_new: usize,
) -> Result<Decoded<T>, DecoderError> {
    let out = decoder_forward(model, input, past)?;
    let last = out.logits.row(out.logits.rows() - 1).to_vec();
    let mut cache = concat_layers(past.unwrap_or(&[]), &out.new_kv)?;
    let mut tokens = Vec::with_capacity(max_new);
    let mut next = argmax(&last);
    while tokens.len() < max_new {
        tokens.push(next);
        if tokens.len() == max_new {
            break;
        }
        let step = decoder_forward(model, &[next], Some(&cache))?;
        next = argmax(step.logits.row(0));
        cache = concat_layers(&cache, &step.new_kv)?;
    }
    Ok(Decoded {
        tokens,
        first_logits: last,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnResult<T> {
    pub session_id: String,
    /// 1-based.
    pub turn: usize,
    pub resolution: Resolution,
    pub evidence: EvidenceBundle,
    pub l_ext: usize,
    /// Tokens prefilled to attach concepts this turn.
    pub concept_prefill_tokens: usize,
    pub turn_prefill_tokens: usize,
    pub decode_tokens: usize,
    pub output: Vec<TokenId>,
    pub first_logits: Vec<T>,
    pub latency: Duration,
}

impl<T> TurnResult<T> {
    pub fn prefill_tokens(&self) -> usize {
        self.concept_prefill_tokens + self.turn_prefill_tokens
    }
}

/// Per-session state: attached caches and the canonical prefix built from
/// them.
#[derive(Debug, Clone)]
pub struct Session<T> {
    session_id: String,
    attached: Vec<ConceptKVCache<T>>,
    prefix: ExternalPrefix<T>,
    turns: usize,
}

impl<T: Scalar> Session<T> {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            attached: Vec::new(),
            prefix: ExternalPrefix::empty(),
            turns: 0,
        }
    }

    pub fn id(&self) -> &str {
        &self.session_id
    }

    pub fn prefix(&self) -> &ExternalPrefix<T> {
        &self.prefix
    }

    pub fn attached(&self) -> &[ConceptKVCache<T>] {
        &self.attached
    }

    pub fn turns(&self) -> usize {
        self.turns
    }
}

/// How a concept got attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attach {
    AlreadyAttached,
    Loaded,
    Prefilled { tokens: usize },
}

impl Attach {
    pub fn prefill_tokens(self) -> usize {
        match self {
            Self::Prefilled { tokens } => tokens,
            _ => 0,
        }
    }
}

/// Shared read-only model, evidence and caches used by many sessions.
pub struct Engine<'a, T> {
    pub model: &'a ToyDecoder<T>,
    pub store: &'a EvidenceStore,
    pub repo: Option<&'a CacheRepository>,
    pub tokenizer: ByteTokenizer,
    pub config: EngineConfig,
}

impl<'a, T: Scalar> Engine<'a, T> {
    pub fn new(model: &'a ToyDecoder<T>, store: &'a EvidenceStore, config: EngineConfig) -> Self {
        Self {
            model,
            store,
            repo: None,
            tokenizer: ByteTokenizer,
            config,
        }
    }

    pub fn with_repository(mut self, repo: &'a CacheRepository) -> Self {
        self.repo = Some(repo);
        self
    }

    pub fn concept_tokens(&self, concept_id: &str) -> Result<Vec<TokenId>, SessionError> {
        let record = self
            .store
            .record(concept_id)
            .ok_or_else(|| SessionError::UnknownConcept(concept_id.to_string()))?;
        Ok(concept_prefix_tokens(record, &self.tokenizer))
    }

    fn obtain_cache(&self, concept_id: &str) -> Result<(ConceptKVCache<T>, Attach), SessionError> {
        let record = self.store.record(concept_id);
        let tokens = record.map(|r| concept_prefix_tokens(r, &self.tokenizer));
        if let Some(repo) = self.repo {
            let usable = match &tokens {
                Some(t) => repo.is_current(concept_id, &self.model.fingerprint(), t),
                None => repo.contains(concept_id),
            };
            if usable {
                let cache = repo.load::<T>(concept_id)?;
                if cache.model_fingerprint != self.model.fingerprint() {
                    return Err(KvError::FingerprintMismatch(concept_id.to_string()).into());
                }
                return Ok((cache, Attach::Loaded));
            }
        }
        let tokens = tokens.ok_or_else(|| SessionError::UnknownConcept(concept_id.to_string()))?;
        let cache =
            prefill_concept(self.model, concept_id, &tokens)?.with_dtype(self.config.cache_dtype);
        if let (Some(repo), true) = (self.repo, self.config.write_back) {
            repo.store(&cache)?;
        }
        let n = tokens.len();
        Ok((cache, Attach::Prefilled { tokens: n }))
    }

    /// Attaches `concept_id` unless already present, keeping the prefix in
    /// canonical order.
    pub fn ensure_attached(
        &self,
        session: &mut Session<T>,
        concept_id: &str,
    ) -> Result<Attach, SessionError> {
        if session.prefix.contains(concept_id) {
            return Ok(Attach::AlreadyAttached);
        }
        let (cache, how) = self.obtain_cache(concept_id)?;
        let appends_last = session
            .attached
            .last()
            .is_none_or(|c| c.concept_id.as_str() < concept_id);
        let prefix = if appends_last {
            session.prefix.extend(&cache)?
        } else {
            assemble_canonical(session.attached.iter().chain(std::iter::once(&cache)))?
        };
        session.attached.push(cache);
        session
            .attached
            .sort_by(|a, b| a.concept_id.cmp(&b.concept_id));
        session.prefix = prefix;
        Ok(how)
    }

    /// One turn: resolve, attach, select evidence, decode.
    pub fn answer(
        &self,
        session: &mut Session<T>,
        query: &str,
        image: Option<&Embedding>,
    ) -> Result<TurnResult<T>, SessionError> {
        let start = Instant::now();
        if query.trim().is_empty() {
            return Err(SessionError::EmptyQuery);
        }
        let resolution = resolve_concept(query, image, self.store, self.config.resolution_floor)?;
        let attach = self.ensure_attached(session, &resolution.concept_id)?;
        let evidence = self.store.select_evidence(
            &resolution.concept_id,
            query,
            image,
            self.config.k_attr,
            self.config.k_patch,
        )?;
        let turn_tokens = build_turn_tokens(&evidence, query, &self.tokenizer);
        let decoded = greedy_decode(
            self.model,
            session.prefix.as_past(),
            &turn_tokens,
            self.config.max_new_tokens,
        )?;
        session.turns += 1;
        Ok(TurnResult {
            session_id: session.session_id.clone(),
            turn: session.turns,
            resolution,
            evidence,
            l_ext: session.prefix.l_ext(),
            concept_prefill_tokens: attach.prefill_tokens(),
            turn_prefill_tokens: turn_tokens.len(),
            decode_tokens: decoded.tokens.len(),
            output: decoded.tokens,
            first_logits: decoded.first_logits,
            latency: start.elapsed(),
        })
    }
}

/// Header of the tab-separated turn log.
pub const TURN_LOG_HEADER: &str =
    "session_id\tturn\tconcept\tl_ext\tprefill_tokens\tdecode_tokens\tlatency_us";

pub fn turn_log_line<T>(r: &TurnResult<T>) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.session_id,
        r.turn,
        r.resolution.concept_id,
        r.l_ext,
        r.prefill_tokens(),
        r.decode_tokens,
        r.latency.as_micros()
    )
}

/// Appends turns to `path`, writing the header when the file is new.
pub fn append_turn_log<T>(path: &Path, results: &[TurnResult<T>]) -> std::io::Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        writeln!(f, "{TURN_LOG_HEADER}")?;
    }
    for r in results {
        writeln!(f, "{}", turn_log_line(r))?;
    }
    Ok(())
}
