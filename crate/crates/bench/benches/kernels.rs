use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use kvpersona::decoder::decoder_forward;
use kvpersona::index::{Embedding, EntryKind, Filter, FlatIndex, IndexEntry, Payload};
use kvpersona::kv::{assemble, prefill_concept, StorageDtype};
use kvpersona::mining::{
    fused_map, grid_candidates, MiningParams, PerceptionProviders, SyntheticProvider,
};
use kvpersona::ConceptRecord;
use kvpersona_bench::{model, tokens};

fn forward(c: &mut Criterion) {
    let m = model();
    let mut group = c.benchmark_group("decoder_forward");
    for n in [32usize, 128, 512] {
        let input = tokens(n, 1);
        group.bench_with_input(BenchmarkId::new("full", n), &input, |b, input| {
            b.iter(|| decoder_forward(&m, black_box(input), None).unwrap())
        });
    }
    let cache = prefill_concept(&m, "c", &tokens(480, 2)).unwrap();
    let prefix = assemble([&cache]).unwrap();
    let turn = tokens(32, 3);
    group.bench_function("attached_32_after_480", |b| {
        b.iter(|| decoder_forward(&m, black_box(&turn), prefix.as_past()).unwrap())
    });
    group.finish();
}

fn caches(c: &mut Criterion) {
    let m = model();
    let a = prefill_concept(&m, "a", &tokens(200, 4))
        .unwrap()
        .with_dtype(StorageDtype::F16);
    let b = prefill_concept(&m, "b", &tokens(200, 5))
        .unwrap()
        .with_dtype(StorageDtype::F16);
    let base = assemble([&a]).unwrap();
    c.bench_function("prefix_extend_200", |bch| {
        bch.iter(|| base.extend(black_box(&b)).unwrap())
    });
    c.bench_function("prefix_assemble_2x200", |bch| {
        bch.iter(|| assemble([black_box(&a), black_box(&b)]).unwrap())
    });
}

fn mining(c: &mut Criterion) {
    let provider = SyntheticProvider::new(3, 64, 64);
    let providers = PerceptionProviders::uniform(&provider);
    let params = MiningParams::default();
    let record = ConceptRecord::placeholder("c");
    let prompt = kvpersona::mining::relevance_prompt(&record);
    c.bench_function("fused_map_64x64", |b| {
        b.iter(|| fused_map(&providers, black_box("img0"), &prompt, &params).unwrap())
    });
    let (_, maps) = fused_map(&providers, "img0", &prompt, &params).unwrap();
    let (fused, mask) = maps.expect("synthetic mask is large enough");
    c.bench_function("grid_candidates_g12", |b| {
        b.iter(|| grid_candidates(black_box(&fused), &mask, 12, 0.5, "img0").unwrap())
    });
}

fn retrieval(c: &mut Criterion) {
    let dim = 64;
    let mut index = FlatIndex::new(dim);
    for i in 0..1000u32 {
        let values = (0..dim as u32)
            .map(|j| ((i * 31 + j * 17) % 97) as f32 / 97.0 - 0.5)
            .collect();
        index
            .insert(IndexEntry {
                entry_id: format!("e{i}"),
                concept_id: "c".into(),
                kind: EntryKind::Attribute,
                payload: Payload::Text(String::new()),
                embedding: Embedding::new(values).unwrap(),
            })
            .unwrap();
    }
    let query = Embedding::new((0..dim).map(|j| (j as f32).sin()).collect()).unwrap();
    for k in [1usize, 5] {
        c.bench_function(&format!("flat_top{k}_1000x64"), |b| {
            b.iter(|| {
                index
                    .top_k(black_box(&query), k, Filter::default())
                    .unwrap()
            })
        });
    }
}

criterion_group!(benches, forward, caches, mining, retrieval);
criterion_main!(benches);
