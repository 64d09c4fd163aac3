//! Latency/throughput comparison of cached-prefix sessions against per-turn
//! prompt concatenation on a seeded toy workload.

use std::time::{Duration, Instant};

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::decoder::{seeded_model, DecoderConfig, DecoderError, TokenId, ToyDecoder};
use crate::defaults::{Defaults, BENCH_QUERY};
use crate::index::{EvidenceBundle, EvidenceStore, HashedTrigramEmbedder, IndexError};
use crate::kv::StorageDtype;
use crate::metadata::ConceptRecord;
use crate::mining::{
    mine_concept, normalize_map, MiningError, PerceptionProviders, ScalarMap, SyntheticProvider,
};
use crate::session::{
    build_turn_tokens, concept_prefix_tokens, greedy_decode, Engine, EngineConfig, Session,
    SessionError,
};
use crate::tokenizer::ByteTokenizer;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Mining(#[from] MiningError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Pipeline {
    #[serde(rename = "kv_prefix")]
    KvPrefix,
    #[serde(rename = "prompt_concat")]
    PromptConcat,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Self::KvPrefix => "kv_prefix",
            Self::PromptConcat => "prompt_concat",
        }
    }
}

impl std::str::FromStr for Pipeline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "kv_prefix" => Ok(Self::KvPrefix),
            "prompt_concat" => Ok(Self::PromptConcat),
            other => Err(format!("unknown pipeline {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub q_values: Vec<usize>,
    pub pipelines: Vec<Pipeline>,
    pub client_concurrency: usize,
    pub max_new_tokens: usize,
    /// The first repetition is warmup and is not reported.
    pub repetitions: usize,
    pub seed: u64,
    pub decoder: DecoderConfig,
    /// Side of the pooled grid per image in the concatenated context, so
    /// each image costs `image_grid²` tokens.
    pub image_grid: usize,
    pub evidence_images: usize,
    pub image_size: usize,
    pub query: String,
    pub cache_dtype: StorageDtype,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let d = Defaults::default();
        Self {
            q_values: d.q_values,
            pipelines: vec![Pipeline::KvPrefix, Pipeline::PromptConcat],
            client_concurrency: 1,
            max_new_tokens: 4,
            repetitions: 3,
            seed: 0,
            decoder: DecoderConfig::new(2, 2, 16, ByteTokenizer::VOCAB),
            image_grid: 12,
            evidence_images: d.k_evidence_images,
            image_size: 48,
            query: BENCH_QUERY.to_string(),
            cache_dtype: d.cache_dtype,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.to_string()));
        if self.q_values.is_empty() || self.q_values.contains(&0) {
            return bad("q_values must be non-empty and positive");
        }
        if self.pipelines.is_empty() {
            return bad("no pipelines selected");
        }
        if self.repetitions < 3 {
            return bad("repetitions must be at least 3");
        }
        if self.client_concurrency == 0 {
            return bad("client_concurrency must be at least 1");
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be at least 1");
        }
        if self.decoder.vocab_size < ByteTokenizer::VOCAB {
            return bad("decoder vocabulary must cover byte tokens");
        }
        if self.query.trim().is_empty() {
            return bad("empty query");
        }
        self.decoder
            .validate()
            .map_err(|e| BenchError::Config(e.to_string()))
    }
}

/// Pools an image to `grid × grid` cells and maps each cell to a byte token.
pub fn image_tokens(image: &ScalarMap, grid: usize) -> Result<Vec<TokenId>, MiningError> {
    let norm = normalize_map(image)?;
    let (h, w) = norm.shape();
    let mut out = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        for j in 0..grid {
            let (y0, y1) = (i * h / grid, ((i + 1) * h / grid).max(i * h / grid + 1));
            let (x0, x1) = (j * w / grid, ((j + 1) * w / grid).max(j * w / grid + 1));
            let mut sum = 0.0;
            for y in y0..y1.min(h) {
                for x in x0..x1.min(w) {
                    sum += norm.get(y, x);
                }
            }
            let mean = sum / ((y1.min(h) - y0) * (x1.min(w) - x0)) as f64;
            out.push((mean * 255.0).round() as TokenId);
        }
    }
    Ok(out)
}

pub const BENCH_CONCEPT: &str = "mam";

fn bench_record() -> ConceptRecord {
    ConceptRecord {
        concept: BENCH_CONCEPT.into(),
        category: "animal<dog>".into(),
        caption: "a small tan dog with floppy ears dark brown eyes and short fur \
                  sitting on a grey couch next to a red knitted blanket at home"
            .into(),
        fingerprint_attributes: [
            "ear: floppy and folded",
            "eye: dark brown",
            "hair: short tan",
            "muzzle: black tip",
            "nose: black",
            "tail: curled up",
            "chest: white patch",
            "paws: white socks",
            "collar: red leather",
            "build: small and stocky",
            "forehead: wrinkled",
            "tongue: often visible",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
    }
}

/// Model, evidence and image tokens shared by every benchmark session.
pub struct ToyWorkload {
    pub model: ToyDecoder<f32>,
    pub store: EvidenceStore,
    pub concept_id: String,
    pub image_tokens: Vec<TokenId>,
}

impl ToyWorkload {
    pub fn build(cfg: &BenchConfig) -> Result<Self, BenchError> {
        cfg.validate()?;
        let model = seeded_model::<f32>(cfg.seed, cfg.decoder)?;
        let embedder = HashedTrigramEmbedder::new(Defaults::default().text_dim, cfg.seed)?;
        let mut store = EvidenceStore::new(Box::new(embedder));
        let record = bench_record();
        let provider = SyntheticProvider::new(cfg.seed, cfg.image_size, cfg.image_size);
        let image_ids: Vec<String> = (0..cfg.evidence_images)
            .map(|i| format!("img{i}"))
            .collect();
        let params = Defaults::default().mining_params();
        let mined = mine_concept(
            BENCH_CONCEPT,
            &image_ids,
            &record,
            &PerceptionProviders::uniform(&provider),
            &params,
        )?;
        store.add_concept(BENCH_CONCEPT, record)?;
        store.add_patches(BENCH_CONCEPT, &mined.patches)?;
        let mut tokens = Vec::new();
        for id in &image_ids {
            tokens.extend(image_tokens(&provider.image(id), cfg.image_grid)?);
        }
        Ok(Self {
            model,
            store,
            concept_id: BENCH_CONCEPT.to_string(),
            image_tokens: tokens,
        })
    }

    fn record(&self) -> &ConceptRecord {
        self.store
            .record(&self.concept_id)
            .expect("bench concept is indexed")
    }

    /// Every attribute and every mined patch, in stored order.
    pub fn full_bundle(&self) -> EvidenceBundle {
        EvidenceBundle {
            concept_id: self.concept_id.clone(),
            attributes: self
                .record()
                .fingerprint_attributes
                .iter()
                .map(|a| (a.clone(), 1.0))
                .collect(),
            patches: self
                .store
                .patch_pool(&self.concept_id)
                .iter()
                .map(|p| (p.clone(), p.score))
                .collect(),
        }
    }

    /// Context rebuilt on every prompt-concatenation turn: metadata, image
    /// tokens, all evidence, then the query.
    pub fn concat_tokens(&self, query: &str) -> Vec<TokenId> {
        let t = ByteTokenizer;
        let mut tokens = concept_prefix_tokens(self.record(), &t);
        tokens.extend_from_slice(&self.image_tokens);
        tokens.extend(build_turn_tokens(&self.full_bundle(), query, &t));
        tokens
    }

    pub fn engine_config(&self, cfg: &BenchConfig) -> EngineConfig {
        EngineConfig {
            max_new_tokens: cfg.max_new_tokens,
            cache_dtype: cfg.cache_dtype,
            ..EngineConfig::default()
        }
    }
}

/// Per-turn measurements of one session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionTrace {
    pub latencies: Vec<Duration>,
    pub prefill_tokens: Vec<usize>,
    pub concept_prefills: usize,
    pub outputs: Vec<Vec<TokenId>>,
}

/// `q` stateless turns, each prefilling the whole concatenated context.
pub fn run_prompt_concat(
    wl: &ToyWorkload,
    query: &str,
    q: usize,
    max_new: usize,
) -> Result<SessionTrace, BenchError> {
    let mut trace = SessionTrace::default();
    for _ in 0..q {
        let start = Instant::now();
        let tokens = wl.concat_tokens(query);
        let out = greedy_decode(&wl.model, None, &tokens, max_new)?;
        trace.latencies.push(start.elapsed());
        trace.prefill_tokens.push(tokens.len());
        trace.concept_prefills += 1;
        trace.outputs.push(out.tokens);
    }
    Ok(trace)
}

/// `q` turns of one session; the concept cache is built on the first turn
/// and reused afterwards.
pub fn run_kv_prefix(
    engine: &Engine<'_, f32>,
    session_id: &str,
    query: &str,
    q: usize,
) -> Result<SessionTrace, BenchError> {
    let mut session = Session::new(session_id);
    let mut trace = SessionTrace::default();
    for _ in 0..q {
        let r = engine.answer(&mut session, query, None)?;
        trace.latencies.push(r.latency);
        trace.prefill_tokens.push(r.prefill_tokens());
        trace.concept_prefills += usize::from(r.concept_prefill_tokens > 0);
        trace.outputs.push(r.output);
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub pipeline: Pipeline,
    pub q: usize,
    pub mean_latency_ms: f64,
    pub latency_ci95_ms: f64,
    /// Completed turns over summed wall time of the measured repetitions.
    pub qps: f64,
    pub median_qps: f64,
    pub turns: usize,
    pub mean_prefill_tokens: f64,
    pub concept_prefills_per_session: f64,
}

/// Half-width of the 95% Student-t interval of the mean.
pub fn ci95_half_width(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    t * (var / n as f64).sqrt()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

struct Repetition {
    wall: Duration,
    traces: Vec<SessionTrace>,
}

fn run_repetition(
    wl: &ToyWorkload,
    engine: &Engine<'_, f32>,
    cfg: &BenchConfig,
    pipeline: Pipeline,
    q: usize,
    rep: usize,
) -> Result<Repetition, BenchError> {
    let start = Instant::now();
    let results: Vec<Result<SessionTrace, BenchError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.client_concurrency)
            .map(|w| {
                let id = format!("{}-q{q}-r{rep}-w{w}", pipeline.name());
                scope.spawn(move || match pipeline {
                    Pipeline::KvPrefix => run_kv_prefix(engine, &id, &cfg.query, q),
                    Pipeline::PromptConcat => {
                        run_prompt_concat(wl, &cfg.query, q, cfg.max_new_tokens)
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bench worker panicked"))
            .collect()
    });
    let wall = start.elapsed();
    let traces = results.into_iter().collect::<Result<_, _>>()?;
    Ok(Repetition { wall, traces })
}

fn summarize(pipeline: Pipeline, q: usize, reps: &[Repetition]) -> BenchRow {
    let mut latencies = Vec::new();
    let mut prefill = Vec::new();
    let mut rep_means = Vec::new();
    let mut rep_qps = Vec::new();
    let mut prefills = 0usize;
    let mut sessions = 0usize;
    let mut wall = 0.0;
    for r in reps {
        let lat: Vec<f64> = r
            .traces
            .iter()
            .flat_map(|t| t.latencies.iter().map(|d| d.as_secs_f64() * 1e3))
            .collect();
        rep_means.push(lat.iter().sum::<f64>() / lat.len() as f64);
        rep_qps.push(lat.len() as f64 / r.wall.as_secs_f64());
        wall += r.wall.as_secs_f64();
        latencies.extend(lat);
        for t in &r.traces {
            prefill.extend(t.prefill_tokens.iter().map(|p| *p as f64));
            prefills += t.concept_prefills;
            sessions += 1;
        }
    }
    let turns = latencies.len();
    BenchRow {
        pipeline,
        q,
        mean_latency_ms: latencies.iter().sum::<f64>() / turns as f64,
        latency_ci95_ms: ci95_half_width(&rep_means),
        qps: turns as f64 / wall,
        median_qps: median(&rep_qps),
        turns,
        mean_prefill_tokens: prefill.iter().sum::<f64>() / prefill.len() as f64,
        concept_prefills_per_session: prefills as f64 / sessions as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub client_concurrency: usize,
    pub repetitions: usize,
    pub max_new_tokens: usize,
    pub concat_context_tokens: usize,
}

impl BenchReport {
    pub fn row(&self, pipeline: Pipeline, q: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.pipeline == pipeline && r.q == q)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "pipeline\tq\tmean_latency_ms\tlatency_ci95_ms\tqps\tmedian_qps\tturns\tmean_prefill_tokens\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{}\t{:.1}\n",
                r.pipeline.name(),
                r.q,
                r.mean_latency_ms,
                r.latency_ci95_ms,
                r.qps,
                r.median_qps,
                r.turns,
                r.mean_prefill_tokens
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Runs every `(pipeline, Q)` cell `repetitions` times and reports all but
/// the first repetition.
pub fn run_benchmark(cfg: &BenchConfig, wl: &ToyWorkload) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    let engine = Engine::new(&wl.model, &wl.store, wl.engine_config(cfg));
    let mut rows = Vec::new();
    for &q in &cfg.q_values {
        let mut reps: Vec<(Pipeline, Repetition)> = Vec::new();
        for rep in 0..cfg.repetitions {
            for &p in &cfg.pipelines {
                let r = run_repetition(wl, &engine, cfg, p, q, rep)?;
                if rep > 0 {
                    reps.push((p, r));
                }
            }
        }
        for &p in &cfg.pipelines {
            let mine: Vec<Repetition> = reps
                .iter()
                .filter(|(pp, _)| *pp == p)
                .map(|(_, r)| Repetition {
                    wall: r.wall,
                    traces: r.traces.clone(),
                })
                .collect();
            rows.push(summarize(p, q, &mine));
        }
    }
    rows.sort_by_key(|r| (r.pipeline, r.q));
    Ok(BenchReport {
        rows,
        client_concurrency: cfg.client_concurrency,
        repetitions: cfg.repetitions,
        max_new_tokens: cfg.max_new_tokens,
        concat_context_tokens: wl.concat_tokens(&cfg.query).len(),
    })
}

/// Outputs of both pipelines when they see the same evidence in the same
/// order: the cached path uses an exact-precision cache holding the
/// metadata, and the concatenated path prefills metadata ‖ turn tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Agreement {
    pub kv_output: Vec<TokenId>,
    pub concat_output: Vec<TokenId>,
    pub max_abs_logit_diff: f64,
}

pub fn pipeline_agreement(
    wl: &ToyWorkload,
    query: &str,
    max_new: usize,
) -> Result<Agreement, BenchError> {
    let record = wl.record();
    let config = EngineConfig {
        k_attr: record.fingerprint_attributes.len(),
        k_patch: wl.store.patch_pool(&wl.concept_id).len(),
        max_new_tokens: max_new,
        cache_dtype: StorageDtype::F32,
        ..EngineConfig::default()
    };
    let engine = Engine::new(&wl.model, &wl.store, config);
    let kv = engine.answer(&mut Session::new("agreement"), query, None)?;
    let t = ByteTokenizer;
    let mut tokens = concept_prefix_tokens(record, &t);
    tokens.extend(build_turn_tokens(&kv.evidence, query, &t));
    let concat = greedy_decode(&wl.model, None, &tokens, max_new)?;
    let max_abs_logit_diff = kv
        .first_logits
        .iter()
        .zip(&concat.first_logits)
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    Ok(Agreement {
        kv_output: kv.output,
        concat_output: concat.tokens,
        max_abs_logit_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> BenchConfig {
        BenchConfig {
            q_values: vec![1, 3],
            decoder: DecoderConfig::new(1, 2, 8, 256),
            image_grid: 4,
            evidence_images: 2,
            image_size: 24,
            max_new_tokens: 2,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn ci95_matches_hand_value() {
        // n=3, sd=1, t(0.975, 2) = 4.302653
        let hw = ci95_half_width(&[1.0, 2.0, 3.0]);
        assert!((hw - 4.302653 / 3f64.sqrt()).abs() < 1e-5);
        assert_eq!(ci95_half_width(&[5.0]), 0.0);
    }

    #[test]
    fn image_tokens_are_bytes() {
        let m = ScalarMap::from_fn(8, 8, |y, x| (y * 8 + x) as f64);
        let t = image_tokens(&m, 4).unwrap();
        assert_eq!(t.len(), 16);
        assert_eq!(t[0], 18);
        assert_eq!(*t.last().unwrap(), 237);
    }

    #[test]
    fn config_validation() {
        assert!(BenchConfig {
            repetitions: 2,
            ..quick()
        }
        .validate()
        .is_err());
        assert!(BenchConfig {
            q_values: vec![],
            ..quick()
        }
        .validate()
        .is_err());
        quick().validate().unwrap();
    }

    #[test]
    fn concat_is_stateless_and_kv_amortizes() {
        let cfg = quick();
        let wl = ToyWorkload::build(&cfg).unwrap();
        let concat = run_prompt_concat(&wl, &cfg.query, 4, 2).unwrap();
        let first = concat.prefill_tokens[0];
        assert!(concat.prefill_tokens.iter().all(|p| *p == first));
        assert_eq!(concat.prefill_tokens.iter().sum::<usize>(), 4 * first);
        let tokens = wl.concat_tokens(&cfg.query);
        for (a, _) in &wl.full_bundle().attributes {
            let needle = ByteTokenizer.encode(&format!("- {a}\n"));
            assert!(tokens.windows(needle.len()).any(|w| w == needle.as_slice()));
        }

        let engine = Engine::new(&wl.model, &wl.store, wl.engine_config(&cfg));
        let kv = run_kv_prefix(&engine, "s", &cfg.query, 4).unwrap();
        assert_eq!(kv.concept_prefills, 1);
        assert!(kv.prefill_tokens[1..].iter().all(|p| *p < first));
    }

    #[test]
    fn agreement_on_identical_evidence() {
        let wl = ToyWorkload::build(&quick()).unwrap();
        let a = pipeline_agreement(&wl, BENCH_QUERY, 3).unwrap();
        assert_eq!(a.kv_output, a.concat_output);
        assert!(a.max_abs_logit_diff <= 1e-5);
    }

    #[test]
    fn benchmark_rows_cover_grid() {
        let cfg = quick();
        let wl = ToyWorkload::build(&cfg).unwrap();
        let report = run_benchmark(&cfg, &wl).unwrap();
        assert_eq!(report.rows.len(), 4);
        let kv = report.row(Pipeline::KvPrefix, 3).unwrap();
        assert_eq!(kv.turns, 3 * 2);
        assert!((kv.concept_prefills_per_session - 1.0).abs() < 1e-12);
        assert!(report.to_tsv().lines().count() == 5);
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["rows"].as_array().unwrap().len(), 4);
    }
}
