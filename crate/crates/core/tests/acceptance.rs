//! Acceptance run: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod oracle;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use kvpersona::decoder::{decoder_forward, seeded_model, DecoderConfig, TokenId, ToyDecoder};
use kvpersona::defaults::{Decoding, Defaults};
use kvpersona::harness::{pipeline_agreement, run_benchmark, BenchConfig, Pipeline, ToyWorkload};
use kvpersona::index::{
    Embedding, EntryKind, EvidenceStore, Filter, FlatIndex, HashedTrigramEmbedder, IndexEntry,
    Payload,
};
use kvpersona::kv::{assemble, prefill_after, prefill_concept, ExternalPrefix, StorageDtype};
use kvpersona::metadata::{ingest, normalize_record, ConceptRecord, FileResponses, MAX_ATTRIBUTES};
use kvpersona::mining::{
    mine_concept, DifficultyProvider, MaskProvider, MiningParams, PerceptionProviders, PixelRect,
    RelevanceProvider, SyntheticProvider,
};
use kvpersona::session::{Attach, Engine, EngineConfig, Session};
use kvpersona::tensor::{Matrix2D, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use oracle::{mine as oracle_mine, scan_top_k, OracleImage};

struct Outcome {
    passed: bool,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome {
        passed: true,
        detail: detail.into(),
    }
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome {
        passed: false,
        detail: detail.into(),
    }
}

/// Checksums of every model touched by the run, taken at creation.
#[derive(Default)]
struct FrozenLedger {
    seen: Vec<(String, String)>,
}

impl FrozenLedger {
    fn note<T: Scalar>(&mut self, name: &str, model: &ToyDecoder<T>, at_creation: String) {
        self.seen.push((name.to_string(), at_creation.clone()));
        if model.checksum() != at_creation {
            self.seen
                .push((format!("{name} (changed)"), model.checksum()));
        }
    }
}

fn rows_diff<T: Scalar>(a: &Matrix2D<T>, b: &Matrix2D<T>, b_offset: usize) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..a.rows() {
        for (x, y) in a.row(r).iter().zip(b.row(b_offset + r)) {
            worst = worst.max((x.as_f64() - y.as_f64()).abs());
        }
    }
    worst
}

fn random_tokens(rng: &mut ChaCha8Rng, max_len: usize, vocab: usize) -> Vec<TokenId> {
    let n = rng.random_range(1..=max_len);
    (0..n)
        .map(|_| rng.random_range(0..vocab as TokenId))
        .collect()
}

/// External-prefix logits vs full-context logits for one trial.
fn attach_gap<T: Scalar>(
    model: &ToyDecoder<T>,
    prefixes: &[Vec<TokenId>],
    query: &[TokenId],
) -> f64 {
    let mut ext = ExternalPrefix::empty();
    for (i, p) in prefixes.iter().enumerate() {
        let cache = prefill_after(model, &ext, &format!("c{i}"), p).unwrap();
        ext = ext.extend(&cache).unwrap();
    }
    let attached = decoder_forward(model, query, ext.as_past()).unwrap();
    let mut full: Vec<TokenId> = prefixes.concat();
    full.extend_from_slice(query);
    let oracle = decoder_forward(model, &full, None).unwrap();
    rows_diff(&attached.logits, &oracle.logits, ext.l_ext())
}

fn criterion_1(ledger: &mut FrozenLedger) -> Outcome {
    let start = Instant::now();
    let cfg = DecoderConfig::new(4, 4, 16, 256);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst32, mut worst64, mut worst_chain32) = (0.0f64, 0.0f64, 0.0f64);
    let mut independent32 = 0.0f64;
    let trials = 24;
    for trial in 0..trials {
        let seed = rng.random::<u64>();
        let m32 = seeded_model::<f32>(seed, cfg).unwrap();
        let m64 = seeded_model::<f64>(seed, cfg).unwrap();
        let (c32, c64) = (m32.checksum(), m64.checksum());
        let prefix = random_tokens(&mut rng, 48, 256);
        let query = random_tokens(&mut rng, 16, 256);

        // Single concept: standalone prefill is exactly the joint context.
        let cache = prefill_concept(&m32, "c", &prefix).unwrap();
        let ext = assemble([&cache]).unwrap();
        let attached = decoder_forward(&m32, &query, ext.as_past()).unwrap();
        let mut full = prefix.clone();
        full.extend_from_slice(&query);
        let oracle = decoder_forward(&m32, &full, None).unwrap();
        worst32 = worst32.max(rows_diff(&attached.logits, &oracle.logits, prefix.len()));
        worst64 = worst64.max(attach_gap(&m64, std::slice::from_ref(&prefix), &query));

        // Two concepts, second one prefilled behind the first.
        if trial % 2 == 0 {
            let split = rng.random_range(1..=prefix.len().max(1));
            if split < prefix.len() {
                let parts = [prefix[..split].to_vec(), prefix[split..].to_vec()];
                worst_chain32 = worst_chain32.max(attach_gap(&m32, &parts, &query));
                let a = prefill_concept(&m32, "a", &parts[0]).unwrap();
                let b = prefill_concept(&m32, "b", &parts[1]).unwrap();
                let joint = assemble([&a, &b]).unwrap();
                let out = decoder_forward(&m32, &query, joint.as_past()).unwrap();
                independent32 =
                    independent32.max(rows_diff(&out.logits, &oracle.logits, prefix.len()));
            }
        }
        ledger.note(&format!("c1-trial{trial}-f32"), &m32, c32);
        ledger.note(&format!("c1-trial{trial}-f64"), &m64, c64);
    }
    let elapsed = start.elapsed();
    println!(
        "    independently prefilled 2-concept caches: max|Δ| {independent32:.2e} (informational)"
    );
    let detail = format!(
        "{trials} trials, max|Δ| f32 {worst32:.2e}, f64 {worst64:.2e}, chained 2-concept f32 {worst_chain32:.2e}, {:.2}s",
        elapsed.as_secs_f64()
    );
    if worst32 <= 1e-5
        && worst64 <= 1e-10
        && worst_chain32 <= 1e-5
        && elapsed < Duration::from_secs(5)
    {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn small_store(dim: usize) -> EvidenceStore {
    let mut store = EvidenceStore::new(Box::new(HashedTrigramEmbedder::new(dim, 5).unwrap()));
    for (id, attrs) in [
        ("bo", vec!["ear: pointed", "tail: long and thin"]),
        (
            "mam",
            vec!["ear: floppy", "eye: dark brown", "hair: short tan"],
        ),
    ] {
        let rec = ConceptRecord {
            concept: id.to_string(),
            category: "animal<dog>".into(),
            caption: format!("{id} the dog"),
            fingerprint_attributes: attrs.into_iter().map(String::from).collect(),
        };
        store.add_concept(id, rec).unwrap();
    }
    store
}

fn criterion_2(ledger: &mut FrozenLedger) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = 0;
    for pair in 0..10 {
        let cfg = DecoderConfig::new(2, 2, 8, 64);
        let model = seeded_model::<f32>(pair, cfg).unwrap();
        let before = model.checksum();
        let a_tokens = random_tokens(&mut rng, 20, 64);
        let b_tokens = random_tokens(&mut rng, 20, 64);
        let a = prefill_concept(&model, "a", &a_tokens).unwrap();
        let b = prefill_concept(&model, "b", &b_tokens).unwrap();
        let extended = assemble([&a]).unwrap().extend(&b).unwrap();
        let joint = assemble([&a, &b]).unwrap();
        if extended.payload_bytes() != joint.payload_bytes()
            || extended.ordered_concepts() != joint.ordered_concepts()
            || extended.l_ext() != joint.l_ext()
        {
            mismatches += 1;
        }
        ledger.note(&format!("c2-pair{pair}"), &model, before);
    }

    let model = seeded_model::<f32>(3, DecoderConfig::new(2, 2, 8, 256)).unwrap();
    let before = model.checksum();
    let store = small_store(32);
    let config = EngineConfig {
        cache_dtype: StorageDtype::F32,
        max_new_tokens: 2,
        ..EngineConfig::default()
    };
    let engine = Engine::new(&model, &store, config);
    let mut session = Session::new("c2");
    let first = engine.ensure_attached(&mut session, "mam").unwrap();
    let again = engine.ensure_attached(&mut session, "mam").unwrap();
    let t1 = engine.answer(&mut session, "<mam> ears?", None).unwrap();
    let t2 = engine.answer(&mut session, "<mam> ears?", None).unwrap();
    ledger.note("c2-session", &model, before);
    let idempotent = first.prefill_tokens() > 0
        && again == Attach::AlreadyAttached
        && again.prefill_tokens() == 0
        && t1.concept_prefill_tokens == 0
        && t2.concept_prefill_tokens == 0;
    let detail = format!(
        "10 pairs, {mismatches} byte mismatches; repeat attach spends {} prefill tokens",
        again.prefill_tokens() + t2.concept_prefill_tokens
    );
    if mismatches == 0 && idempotent {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn criterion_3() -> Outcome {
    let params = MiningParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut problems = Vec::new();
    let mut total_candidates = 0;
    for concept in 0..10u64 {
        let h = rng.random_range(24..=64usize);
        let w = rng.random_range(24..=64usize);
        let n_images = rng.random_range(2..=5usize);
        let ids: Vec<String> = (0..n_images).map(|i| format!("img{i}")).collect();
        let mut provider =
            SyntheticProvider::new(100 + concept, h, w).with_negatives(rng.random_range(0..=3));
        // Cell-aligned plants give exact score ties.
        for id in &ids {
            if rng.random_bool(0.5) {
                let (row, col) = (params.grid_size / 2, params.grid_size / 2);
                let rect = PixelRect {
                    x0: col * w / params.grid_size,
                    y0: row * h / params.grid_size,
                    x1: (col + 1) * w / params.grid_size,
                    y1: (row + 1) * h / params.grid_size,
                };
                provider = provider.plant(id, rect);
            }
        }
        let record = ConceptRecord::placeholder(&format!("c{concept}"));
        let out = mine_concept(
            &format!("c{concept}"),
            &ids,
            &record,
            &PerceptionProviders::uniform(&provider),
            &params,
        )
        .unwrap();

        let images: Vec<OracleImage> = ids
            .iter()
            .map(|id| {
                let rel = provider.relevance(id, "").unwrap();
                OracleImage {
                    id: id.clone(),
                    height: h,
                    width: w,
                    mask: provider.mask(id).unwrap().bits().to_vec(),
                    difficulty: provider.difficulty(id).unwrap().values().to_vec(),
                    positive: rel.positive.values().to_vec(),
                    negatives: rel.negatives.iter().map(|n| n.values().to_vec()).collect(),
                }
            })
            .collect();
        let (cells, top) = oracle_mine(
            &images,
            params.grid_size,
            params.min_mask_area,
            params.min_coverage,
            params.top_k,
        );
        total_candidates += cells.len();
        let got: Vec<_> = out
            .candidates
            .iter()
            .map(|c| (c.image_id.clone(), c.row, c.col, c.coverage, c.score))
            .collect();
        let want: Vec<_> = cells
            .iter()
            .map(|c| (c.image.clone(), c.row, c.col, c.coverage, c.score))
            .collect();
        if got != want {
            problems.push(format!("c{concept}: candidate set differs"));
        }
        let got_top: Vec<_> = out
            .patches
            .iter()
            .map(|p| {
                (
                    p.descriptor.image_id.clone(),
                    p.descriptor.row,
                    p.descriptor.col,
                    p.descriptor.score,
                )
            })
            .collect();
        let want_top: Vec<_> = top
            .iter()
            .map(|c| (c.image.clone(), c.row, c.col, c.score))
            .collect();
        if got_top != want_top {
            problems.push(format!("c{concept}: top-k differs"));
        }
        let bounds_ok = out.patches.iter().all(|p| {
            p.descriptor.coverage >= params.min_coverage
                && p.descriptor.bbox.x1 <= w
                && p.descriptor.bbox.y1 <= h
        });
        if !bounds_ok || out.patches.len() > params.top_k {
            problems.push(format!("c{concept}: pool invariant violated"));
        }
    }
    let detail = format!(
        "10 concepts, {total_candidates} oracle candidates, {} problems",
        problems.len()
    );
    if problems.is_empty() {
        pass(detail)
    } else {
        fail(format!("{detail}: {}", problems.join("; ")))
    }
}

fn criterion_4() -> Outcome {
    let d = Defaults::default();
    let m = MiningParams::default();
    let e = EngineConfig::default();
    let b = BenchConfig::default();
    let checks = [
        ("g=12", d.grid_size == 12 && m.grid_size == 12),
        (
            "gamma=1",
            d.fusion_exponent == 1.0 && m.fusion_exponent == 1.0,
        ),
        (
            "k_patch=4",
            d.k_patch == 4 && m.top_k == 4 && e.k_patch == 4,
        ),
        (
            "k_evidence_images=5",
            d.k_evidence_images == 5 && m.evidence_images == 5 && b.evidence_images == 5,
        ),
        ("greedy", d.decoding == Decoding::Greedy),
        (
            "f16 caches",
            d.cache_dtype == StorageDtype::F16 && e.cache_dtype == StorageDtype::F16,
        ),
        (
            "Q set",
            d.q_values == [1, 2, 4, 8, 16, 32] && b.q_values == d.q_values,
        ),
    ];
    let failed: Vec<&str> = checks
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| *n)
        .collect();
    if failed.is_empty() {
        pass("g=12, gamma=1, k_patch=4, 5 evidence images, greedy, f16 caches")
    } else {
        fail(format!("wrong defaults: {}", failed.join(", ")))
    }
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let dim = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut vectors: Vec<Vec<f32>> = Vec::with_capacity(1000);
    for i in 0..1000 {
        let v = if i % 10 == 9 {
            // Exact copy of an earlier entry: a guaranteed tie.
            vectors[rng.random_range(0..i)].clone()
        } else {
            (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
        };
        vectors.push(v);
    }
    let mut index = FlatIndex::new(dim);
    for (i, v) in vectors.iter().enumerate() {
        index
            .insert(IndexEntry {
                entry_id: format!("e{i}"),
                concept_id: "c".into(),
                kind: EntryKind::Attribute,
                payload: Payload::Text(String::new()),
                embedding: Embedding::new(v.clone()).unwrap(),
            })
            .unwrap();
    }
    let mut queries: Vec<Vec<f32>> = (0..40)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    queries.extend((0..10).map(|j| vectors[10 * j + 9].clone()));
    let mut mismatches = 0;
    let mut ties_at_top = 0;
    for q in &queries {
        let qe = Embedding::new(q.clone()).unwrap();
        for k in [1, 3, 5] {
            let hits = index.top_k(&qe, k, Filter::default()).unwrap();
            let want = scan_top_k(&vectors, q, k);
            let got: Vec<(usize, f64)> = hits.iter().map(|h| (h.position, h.score)).collect();
            if got != want {
                mismatches += 1;
            }
            if k == 3 && want.len() > 1 && want[0].1 == want[1].1 {
                ties_at_top += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "1000 entries x 50 queries x k in {{1,3,5}}, {mismatches} mismatches, {ties_at_top} queries with tied leaders, {:.2}s",
        elapsed.as_secs_f64()
    );
    if mismatches == 0 && ties_at_top >= 10 && elapsed < Duration::from_secs(2) {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn criterion_6() -> Outcome {
    let path = concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/data/metadata_golden.json"
    );
    let cases: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut expected = BTreeMap::new();
    for c in &cases {
        let id = c["id"].as_str().unwrap();
        let case_dir = dir.path().join(id);
        std::fs::create_dir_all(&case_dir).unwrap();
        std::fs::write(
            case_dir.join("response.txt"),
            c["response"].as_str().unwrap(),
        )
        .unwrap();
        let rec: ConceptRecord = serde_json::from_value(c["expected"].clone()).unwrap();
        expected.insert(id.to_string(), rec);
    }
    let outcomes = ingest(&FileResponses::new(dir.path())).unwrap();
    let mut problems = Vec::new();
    for o in &outcomes {
        let r = &o.record;
        if Some(r) != expected.get(&o.concept_id) {
            problems.push(format!("{}: differs from golden", o.concept_id));
        }
        let json = serde_json::to_string(r).unwrap();
        let keys: Vec<String> = match serde_json::from_str::<serde_json::Map<String, Value>>(&json)
        {
            Ok(m) => m.keys().cloned().collect(),
            Err(_) => Vec::new(),
        };
        let ordered = json.find("\"concept\"") < json.find("\"category\"")
            && json.find("\"category\"") < json.find("\"caption\"")
            && json.find("\"caption\"") < json.find("\"fingerprint_attributes\"");
        if keys.len() != 4 || !ordered {
            problems.push(format!("{}: key layout", o.concept_id));
        }
        if r.fingerprint_attributes.is_empty() || r.fingerprint_attributes.len() > MAX_ATTRIBUTES {
            problems.push(format!("{}: attribute cap", o.concept_id));
        }
        let (again, report) = normalize_record(&r.to_raw(), &o.concept_id);
        if &again != r || !report.repairs.is_empty() {
            problems.push(format!("{}: not idempotent", o.concept_id));
        }
    }
    let detail = format!("{} records, {} problems", outcomes.len(), problems.len());
    if outcomes.len() == 20 && problems.is_empty() {
        pass(detail)
    } else {
        fail(format!("{detail}: {}", problems.join("; ")))
    }
}

fn criterion_7(ledger: &mut FrozenLedger) -> Outcome {
    let start = Instant::now();
    let cfg = BenchConfig::default();
    let wl = ToyWorkload::build(&cfg).unwrap();
    let before = wl.model.checksum();
    let report = run_benchmark(&cfg, &wl).unwrap();
    let agreement = pipeline_agreement(&wl, &cfg.query, cfg.max_new_tokens).unwrap();
    ledger.note("c7-bench", &wl.model, before);
    let elapsed = start.elapsed();

    let mut slower = Vec::new();
    for &q in &cfg.q_values {
        let kv = report.row(Pipeline::KvPrefix, q).unwrap();
        let concat = report.row(Pipeline::PromptConcat, q).unwrap();
        if kv.mean_latency_ms > concat.mean_latency_ms {
            slower.push(q);
        }
    }
    let ratio = report.row(Pipeline::KvPrefix, 32).unwrap().qps
        / report.row(Pipeline::PromptConcat, 32).unwrap().qps;
    let same = agreement.kv_output == agreement.concat_output;
    // Amortization trend on medians, with slack for scheduler noise.
    let kv_medians: Vec<f64> = cfg
        .q_values
        .iter()
        .map(|&q| report.row(Pipeline::KvPrefix, q).unwrap().median_qps)
        .collect();
    let trend_ok = kv_medians.windows(2).all(|w| w[1] >= 0.8 * w[0]);
    for r in &report.rows {
        println!(
            "    {:<13} Q={:<2} latency {:>8.2} ± {:>6.2} ms  qps {:>8.2}  prefill {:>7.1} tok/turn",
            r.pipeline.name(),
            r.q,
            r.mean_latency_ms,
            r.latency_ci95_ms,
            r.qps,
            r.mean_prefill_tokens
        );
    }
    let detail = format!(
        "QPS ratio at Q=32 {ratio:.1}x, kv slower at Q={slower:?}, identical answers {same}, kv QPS trend nondecreasing (20% slack) {trend_ok}, {:.1}s",
        elapsed.as_secs_f64()
    );
    if slower.is_empty() && ratio >= 5.0 && same && trend_ok && elapsed < Duration::from_secs(60) {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn criterion_8(ledger: &FrozenLedger) -> Outcome {
    let changed: Vec<&str> = ledger
        .seen
        .iter()
        .filter(|(n, _)| n.ends_with("(changed)"))
        .map(|(n, _)| n.as_str())
        .collect();
    let detail = format!("{} models checked", ledger.seen.len() - changed.len());
    if changed.is_empty() && !ledger.seen.is_empty() {
        pass(detail)
    } else {
        fail(format!("{detail}; changed: {}", changed.join(", ")))
    }
}

fn main() {
    let mut ledger = FrozenLedger::default();
    let results = [
        ("1 kv-attach equivalence", criterion_1(&mut ledger)),
        ("2 incremental prefill", criterion_2(&mut ledger)),
        ("3 mining oracle", criterion_3()),
        ("4 defaults", criterion_4()),
        ("5 retrieval exactness", criterion_5()),
        ("6 metadata normalization", criterion_6()),
        ("7 benchmark trend", criterion_7(&mut ledger)),
    ];
    let c8 = criterion_8(&ledger);
    let mut failed = 0;
    for (name, o) in results
        .iter()
        .chain(std::iter::once(&("8 frozen backbone", c8)))
    {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("{tag} criterion {name}: {}", o.detail);
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
