use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gbuf_enhance::metrics::{mmd2_unbiased, pair_patches, TieBreak};
use gbuf_enhance::sampler::{normalize, MatchIndex, MatchTable};
use gbuf_enhance::scenegen::{generate_dataset, LayoutConfig, StyleTag};
use gbuf_enhance::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            normalize(&mut v).unwrap();
            v
        })
        .collect()
}

fn mmd(c: &mut Criterion) {
    let x = vectors(500, 256, 1);
    let y = vectors(500, 256, 2);
    let mut g = c.benchmark_group("mmd2_unbiased");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| mmd2_unbiased(&x, &y, exec).unwrap()));
    }
    g.finish();
}

fn matching(c: &mut Criterion) {
    let real = vectors(2000, 64, 3);
    let syn = vectors(500, 64, 4);
    let index = MatchIndex::build(&real, 0.5).unwrap();
    let mut g = c.benchmark_group("match_table");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| MatchTable::build(&index, &syn, exec).unwrap()));
    }
    g.finish();
}

fn pairing(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut codes = |n: usize| -> Vec<Vec<usize>> { (0..n).map(|_| (0..256).map(|_| r.random_range(0..5)).collect()).collect() };
    let syn = codes(300);
    let real = codes(1000);
    let mut g = c.benchmark_group("pair_patches");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| pair_patches(&syn, &real, 128, TieBreak::Seeded(0), exec)));
    }
    g.finish();
}

fn scenes(c: &mut Criterion) {
    let cfg = LayoutConfig::default();
    let mut g = c.benchmark_group("generate_dataset");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| generate_dataset(&cfg, 32, 7, StyleTag::Target, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, mmd, matching, pairing, scenes);
criterion_main!(benches);
