use std::collections::BTreeMap;
use std::path::Path;

use kvpersona::decoder::seeded_model;
use kvpersona::harness::{run_benchmark, BenchConfig, Pipeline, ToyWorkload};
use kvpersona::index::HashedTrigramEmbedder;
use kvpersona::index::{attribute_entry_id, patch_entry_id, write_embeddings, TextEmbedder};
use kvpersona::kv::{read_header, CacheRepository};
use kvpersona::metadata::{ingest, to_metadata_json, ConceptRecord, FileResponses};
use kvpersona::mining::{
    mine_concept, write_manifest, FileProvider, ImageStatus, ManifestRow, PerceptionProviders,
    SyntheticProvider,
};
use kvpersona::session::{
    append_turn_log, concept_prefix_tokens, Engine, EngineConfig, Session, TurnResult,
};
use kvpersona::tensor::Scalar;
use kvpersona::tokenizer::ByteTokenizer;

use crate::error::CliError;
use crate::layout::Layout;
use crate::settings::{PrecisionFlag, Settings};

pub fn validate(settings: &Settings, dir: &Path) -> Result<(), CliError> {
    let outcomes = ingest(&FileResponses::new(dir))?;
    if outcomes.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no <concept>/response.txt files",
            dir.display()
        )));
    }
    let mut fatal = Vec::new();
    let mut records = BTreeMap::new();
    for o in &outcomes {
        println!(
            "{}\trepairs={}\twarnings={}",
            o.concept_id,
            o.report.repairs.len(),
            o.report.warnings.len()
        );
        for r in &o.report.repairs {
            println!(
                "  repair {}: {} ({:?} -> {:?})",
                r.field, r.rule, r.before, r.after
            );
        }
        for w in &o.report.warnings {
            println!("  warning: {w}");
        }
        if let Some(f) = &o.report.fatal {
            println!("  fatal: {f}");
            fatal.push(o.concept_id.clone());
        }
        records.insert(o.concept_id.clone(), o.record.clone());
    }
    if !fatal.is_empty() {
        return Err(CliError::Data(format!(
            "fatal validation errors for {}",
            fatal.join(", ")
        )));
    }
    let layout = Layout::new(&settings.repo);
    Layout::write(&layout.metadata(), &to_metadata_json(&records))?;
    println!(
        "wrote {} records to {}",
        records.len(),
        layout.metadata().display()
    );
    Ok(())
}

/// Source of the perception maps for `mine`.
pub enum MapSource<'a> {
    Dir(&'a Path),
    Synthetic { images: usize, size: usize },
}

pub fn mine(settings: &Settings, concept_id: &str, source: MapSource<'_>) -> Result<(), CliError> {
    let layout = Layout::new(&settings.repo);
    let record = if layout.metadata().is_file() {
        layout.records()?.remove(concept_id)
    } else {
        None
    };
    let record = record.unwrap_or_else(|| {
        eprintln!("note: no metadata for {concept_id:?}; relevance prompt uses a placeholder");
        ConceptRecord::placeholder(concept_id)
    });
    let params = settings.mining;
    let outcome = match source {
        MapSource::Dir(dir) => {
            let provider = FileProvider::new(dir);
            let ids = provider.image_ids()?;
            if ids.is_empty() {
                return Err(CliError::Data(format!(
                    "{}: no <image>/mask.jmap directories",
                    dir.display()
                )));
            }
            mine_concept(
                concept_id,
                &ids,
                &record,
                &PerceptionProviders::uniform(&provider),
                &params,
            )?
        }
        MapSource::Synthetic { images, size } => {
            let provider = SyntheticProvider::new(settings.seed, size, size);
            let ids: Vec<String> = (0..images).map(|i| format!("img{i}")).collect();
            mine_concept(
                concept_id,
                &ids,
                &record,
                &PerceptionProviders::uniform(&provider),
                &params,
            )?
        }
    };
    if outcome.patches.len() > params.top_k
        || outcome
            .patches
            .iter()
            .any(|p| p.descriptor.coverage < params.min_coverage)
    {
        return Err(CliError::Internal(
            "mined pool violates its size or coverage bound".into(),
        ));
    }
    for img in &outcome.images {
        let status = match img.status {
            ImageStatus::Mined { candidates } => format!("{candidates} candidates"),
            ImageStatus::MaskTooSmall => "skipped: subject mask too small".into(),
            ImageStatus::BeyondImageLimit => "skipped: beyond evidence image limit".into(),
        };
        println!("{}\tmask={:.3}\t{status}", img.image_id, img.mask_fraction);
    }
    let rows: Vec<ManifestRow> = outcome
        .patches
        .iter()
        .enumerate()
        .map(|(i, p)| ManifestRow {
            descriptor: p.descriptor.clone(),
            emb_offset: i,
        })
        .collect();
    let ids: Vec<String> = (0..outcome.patches.len())
        .map(|r| patch_entry_id(concept_id, r))
        .collect();
    let dim = outcome.patches.first().map_or(0, |p| p.embedding.dim());
    let emb = write_embeddings(
        dim,
        ids.iter()
            .map(String::as_str)
            .zip(outcome.patches.iter().map(|p| &p.embedding)),
    );
    Layout::write(&layout.manifest(concept_id), &write_manifest(&rows))?;
    Layout::write(&layout.patch_embeddings(concept_id), &emb)?;
    for p in &outcome.patches {
        println!("patch {}", p.descriptor.to_text());
    }
    println!(
        "{concept_id}: {} patches from {} candidates",
        outcome.patches.len(),
        outcome.candidates.len()
    );
    Ok(())
}

pub fn index(settings: &Settings) -> Result<(), CliError> {
    let layout = Layout::new(&settings.repo);
    let records = layout.records()?;
    let embedder = HashedTrigramEmbedder::new(settings.text_dim, settings.seed)?;
    let mut ids = Vec::new();
    let mut embeddings = Vec::new();
    let mut patch_count = 0;
    for (id, rec) in &records {
        for (i, a) in rec.fingerprint_attributes.iter().enumerate() {
            ids.push(attribute_entry_id(id, i));
            embeddings.push(embedder.embed(a));
        }
        patch_count += layout.patches(id)?.len();
    }
    Layout::write(
        &layout.embedder_conf(),
        &format!(
            "text_dim = {}\nseed = {}\n",
            settings.text_dim, settings.seed
        ),
    )?;
    Layout::write(
        &layout.attribute_embeddings(),
        &write_embeddings(
            settings.text_dim,
            ids.iter().map(String::as_str).zip(embeddings.iter()),
        ),
    )?;
    // Loading back checks that every file agrees.
    layout.store()?;
    println!(
        "indexed {} concepts, {} attributes, {} patches",
        records.len(),
        ids.len(),
        patch_count
    );
    Ok(())
}

pub fn prefill(settings: &Settings, concepts: &[String]) -> Result<(), CliError> {
    match settings.precision {
        PrecisionFlag::F64 => prefill_as::<f64>(settings, concepts),
        _ => prefill_as::<f32>(settings, concepts),
    }
}

fn prefill_as<T: Scalar>(settings: &Settings, concepts: &[String]) -> Result<(), CliError> {
    let layout = Layout::new(&settings.repo);
    let records = layout.records()?;
    let targets: Vec<String> = if concepts.is_empty() {
        records.keys().cloned().collect()
    } else {
        concepts.to_vec()
    };
    let model = seeded_model::<T>(settings.seed, settings.decoder)?;
    Layout::ensure_dir(&layout.caches())?;
    let repo = CacheRepository::open(layout.caches())?;
    let dtype = settings.precision.cache_dtype();
    let tokenizer = ByteTokenizer;
    for id in &targets {
        let record = records
            .get(id)
            .ok_or_else(|| CliError::Data(format!("unknown concept {id:?}")))?;
        let tokens = concept_prefix_tokens(record, &tokenizer);
        let same_dtype = repo
            .path_for(id)
            .ok()
            .and_then(|p| read_header(&p).ok())
            .is_some_and(|h| h.dtype == dtype);
        if same_dtype && repo.is_current(id, &model.fingerprint(), &tokens) {
            println!("{id}\tup-to-date");
            continue;
        }
        let cache = kvpersona::kv::prefill_concept(&model, id, &tokens)?.with_dtype(dtype);
        let path = repo.store(&cache)?;
        println!(
            "{id}\tprefilled {} tokens -> {}",
            tokens.len(),
            path.display()
        );
    }
    Ok(())
}

pub fn query(settings: &Settings, session_id: &str, queries: &[String]) -> Result<(), CliError> {
    match settings.precision {
        PrecisionFlag::F64 => query_as::<f64>(settings, session_id, queries),
        _ => query_as::<f32>(settings, session_id, queries),
    }
}

fn query_as<T: Scalar>(
    settings: &Settings,
    session_id: &str,
    queries: &[String],
) -> Result<(), CliError> {
    let layout = Layout::new(&settings.repo);
    let store = layout.store()?;
    let model = seeded_model::<T>(settings.seed, settings.decoder)?;
    Layout::ensure_dir(&layout.caches())?;
    let repo = CacheRepository::open(layout.caches())?;
    let config = EngineConfig {
        k_attr: settings.k_attr,
        k_patch: settings.k_patch,
        max_new_tokens: settings.max_new_tokens,
        resolution_floor: settings.resolution_floor,
        cache_dtype: settings.precision.cache_dtype(),
        write_back: true,
    };
    let engine = Engine::new(&model, &store, config).with_repository(&repo);
    let mut session = Session::new(session_id);
    let mut results: Vec<TurnResult<T>> = Vec::new();
    let mut failure = None;
    for q in queries {
        let turn = match engine.answer(&mut session, q, None) {
            Ok(t) => t,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        let how = if turn.resolution.explicit {
            "tag".to_string()
        } else {
            format!("similarity {:.3}", turn.resolution.score)
        };
        println!(
            "turn {}\tconcept={} ({how})\tl_ext={}\tprefill={}\tdecode={}",
            turn.turn,
            turn.resolution.concept_id,
            turn.l_ext,
            turn.prefill_tokens(),
            turn.decode_tokens
        );
        for (a, s) in &turn.evidence.attributes {
            println!("  evidence {s:.3} {a}");
        }
        for (p, s) in &turn.evidence.patches {
            println!("  patch {s:.3} {}", p.to_text());
        }
        println!("  answer {:?}", engine.tokenizer.decode(&turn.output));
        results.push(turn);
    }
    let log = layout.turn_log();
    append_turn_log(&log, &results).map_err(|e| CliError::io(&log, e))?;
    failure.map_or(Ok(()), |e| Err(e.into()))
}

pub struct BenchArgs {
    pub q_values: Option<Vec<usize>>,
    pub pipelines: Option<Vec<Pipeline>>,
    pub repetitions: Option<usize>,
    pub concurrency: Option<usize>,
    pub max_new_tokens: Option<usize>,
}

pub fn bench(settings: &Settings, args: BenchArgs) -> Result<(), CliError> {
    let d = BenchConfig::default();
    let cfg = BenchConfig {
        q_values: args.q_values.unwrap_or(d.q_values),
        pipelines: args.pipelines.unwrap_or(d.pipelines),
        client_concurrency: args.concurrency.unwrap_or(d.client_concurrency),
        max_new_tokens: args.max_new_tokens.unwrap_or(d.max_new_tokens),
        repetitions: args.repetitions.unwrap_or(d.repetitions),
        seed: settings.seed,
        decoder: settings.decoder,
        image_grid: settings.mining.grid_size,
        evidence_images: settings.mining.evidence_images,
        cache_dtype: settings.precision.cache_dtype(),
        ..d
    };
    let workload = ToyWorkload::build(&cfg)?;
    let before = workload.model.checksum();
    let report = run_benchmark(&cfg, &workload)?;
    if workload.model.checksum() != before {
        return Err(CliError::Internal(
            "model weights changed during the benchmark".into(),
        ));
    }
    let layout = Layout::new(&settings.repo);
    let dir = layout.bench_dir();
    Layout::write(&dir.join("bench.tsv"), &report.to_tsv())?;
    Layout::write(&dir.join("bench.json"), &report.to_json())?;
    print!("{}", report.to_tsv());
    println!(
        "concat context {} tokens; concurrency {}; reports in {}",
        report.concat_context_tokens,
        report.client_concurrency,
        dir.display()
    );
    Ok(())
}
