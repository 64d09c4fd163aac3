use kvpersona::decoder::{decoder_forward, seeded_model, DecoderConfig, TokenId};
use kvpersona::index::HashedTrigramEmbedder;
use kvpersona::kv::{assemble, prefill_concept, CacheRepository, StorageDtype};
use kvpersona::session::{Attach, Engine, EngineConfig, Session};
use kvpersona::{ConceptRecord, EvidenceStore};
use proptest::prelude::*;

fn store() -> EvidenceStore {
    let mut s = EvidenceStore::new(Box::new(HashedTrigramEmbedder::new(32, 1).unwrap()));
    for (id, attrs) in [
        ("bo", ["ear: pointed", "tail: thin"]),
        ("mam", ["ear: floppy", "eye: dark brown"]),
        ("toby", ["fur: curly white", "collar: red"]),
    ] {
        let rec = ConceptRecord {
            concept: id.into(),
            category: "animal<dog>".into(),
            caption: format!("{id} sits on the grass"),
            fingerprint_attributes: attrs.iter().map(|a| a.to_string()).collect(),
        };
        s.add_concept(id, rec).unwrap();
    }
    s
}

fn config(dtype: StorageDtype) -> EngineConfig {
    EngineConfig {
        cache_dtype: dtype,
        max_new_tokens: 3,
        write_back: true,
        ..EngineConfig::default()
    }
}

#[test]
fn f16_cache_logits_stay_close() {
    let model = seeded_model::<f32>(11, DecoderConfig::new(2, 2, 16, 256)).unwrap();
    let prefix: Vec<TokenId> = (0..40).map(|i| (i * 7 % 256) as TokenId).collect();
    let query: Vec<TokenId> = vec![3, 14, 15, 92, 65];
    let exact = prefill_concept(&model, "c", &prefix).unwrap();
    let half = exact.clone().with_dtype(StorageDtype::F16);
    let a = decoder_forward(&model, &query, assemble([&exact]).unwrap().as_past()).unwrap();
    let b = decoder_forward(&model, &query, assemble([&half]).unwrap().as_past()).unwrap();
    let worst = a
        .logits
        .data()
        .iter()
        .zip(b.logits.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    assert!(worst <= 1e-2, "f16 drift {worst}");
}

#[test]
fn attach_order_does_not_change_prefix() {
    let model = seeded_model::<f32>(2, DecoderConfig::new(2, 2, 8, 256)).unwrap();
    let s = store();
    let engine = Engine::new(&model, &s, config(StorageDtype::F32));
    let mut forward = Session::new("a");
    let mut backward = Session::new("b");
    for id in ["bo", "mam", "toby"] {
        engine.ensure_attached(&mut forward, id).unwrap();
    }
    for id in ["toby", "bo", "mam"] {
        engine.ensure_attached(&mut backward, id).unwrap();
    }
    assert_eq!(forward.prefix().ordered_concepts(), ["bo", "mam", "toby"]);
    assert_eq!(
        forward.prefix().payload_bytes(),
        backward.prefix().payload_bytes()
    );
}

#[test]
fn repository_serves_later_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let repo = CacheRepository::open(dir.path()).unwrap();
    let model = seeded_model::<f32>(4, DecoderConfig::new(2, 2, 8, 256)).unwrap();
    let s = store();
    let engine = Engine::new(&model, &s, config(StorageDtype::F16)).with_repository(&repo);

    let mut first = Session::new("s1");
    let t1 = engine
        .answer(&mut first, "<mam> what eye color?", None)
        .unwrap();
    assert!(t1.concept_prefill_tokens > 0);
    assert!(repo.contains("mam"));

    let mut second = Session::new("s2");
    assert_eq!(
        engine.ensure_attached(&mut second, "mam").unwrap(),
        Attach::Loaded
    );
    let t2 = engine
        .answer(&mut second, "<mam> what eye color?", None)
        .unwrap();
    assert_eq!(t2.concept_prefill_tokens, 0);
    assert_eq!(t1.output, t2.output);
    assert_eq!(t1.first_logits, t2.first_logits);
}

#[test]
fn stale_repository_entry_is_rebuilt() {
    let dir = tempfile::tempdir().unwrap();
    let repo = CacheRepository::open(dir.path()).unwrap();
    let old = seeded_model::<f32>(1, DecoderConfig::new(1, 2, 8, 256)).unwrap();
    let new = seeded_model::<f32>(2, DecoderConfig::new(1, 2, 8, 256)).unwrap();
    let s = store();
    let mut sess = Session::new("x");
    Engine::new(&old, &s, config(StorageDtype::F32))
        .with_repository(&repo)
        .ensure_attached(&mut sess, "bo")
        .unwrap();
    let mut sess = Session::new("y");
    let how = Engine::new(&new, &s, config(StorageDtype::F32))
        .with_repository(&repo)
        .ensure_attached(&mut sess, "bo")
        .unwrap();
    assert!(matches!(how, Attach::Prefilled { .. }));
    assert_eq!(repo.fingerprints().unwrap()["bo"], new.fingerprint());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attached_prefix_matches_full_context(
        seed in 0u64..1000,
        prefix in prop::collection::vec(0u32..64, 1..24),
        query in prop::collection::vec(0u32..64, 1..8),
    ) {
        let model = seeded_model::<f64>(seed, DecoderConfig::new(2, 2, 8, 64)).unwrap();
        let prefix: Vec<TokenId> = prefix.into_iter().map(|t| t as TokenId).collect();
        let query: Vec<TokenId> = query.into_iter().map(|t| t as TokenId).collect();
        let cache = prefill_concept(&model, "c", &prefix).unwrap();
        let attached = decoder_forward(&model, &query, assemble([&cache]).unwrap().as_past()).unwrap();
        let mut full = prefix.clone();
        full.extend_from_slice(&query);
        let oracle = decoder_forward(&model, &full, None).unwrap();
        for r in 0..query.len() {
            for (x, y) in attached.logits.row(r).iter().zip(oracle.logits.row(prefix.len() + r)) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }
    }
}
