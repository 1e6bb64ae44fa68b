use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use forgetbench::attack::{
    lira_offline, lr_mia, update_leak_attack, LiraConfig, MatrixProvenance, PairedScoreMatrix, ScoreMatrix,
    UpdateLeakConfig,
};
use forgetbench::data::SyntheticSpec;
use forgetbench::metrics::{estimate_epsilon, roc_from_scores};
use forgetbench::nn::{ArchFamily, ArchitectureSpec};
use forgetbench::store::IndexSet;
use forgetbench::unlearn::ssd_dampen;
use forgetbench::zoo::{extract_scores, train_model, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let labels: Vec<u8> = (0..10_000).map(|i| (i % 2) as u8).collect();
    c.bench_function("roc_from_scores/10k", |b| b.iter(|| roc_from_scores(black_box(&scores), &labels).unwrap()));

    let m: Vec<Vec<bool>> = (0..1000).map(|_| (0..32).map(|_| rng.random()).collect()).collect();
    let n: Vec<Vec<bool>> = (0..1000).map(|_| (0..32).map(|_| rng.random()).collect()).collect();
    c.bench_function("estimate_epsilon/1k_examples", |b| {
        b.iter(|| estimate_epsilon(black_box(&m), &n, 1e-5, Some(0.95)).unwrap())
    });
}

fn attacks(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (s, q) = (16usize, 1000usize);
    let queries: Vec<u32> = (0..q as u32).collect();
    let labels: Vec<u8> = (0..q).map(|i| (i % 2) as u8).collect();
    let shadows = ScoreMatrix {
        shadows: s,
        queries: queries.clone(),
        query_classes: (0..q as u32).map(|i| i % 10).collect(),
        scores: (0..s * q).map(|_| rng.random_range(-3.0..3.0)).collect(),
        member: (0..s * q).map(|_| rng.random()).collect(),
        provenance: MatrixProvenance::default(),
    };
    let target: Vec<f64> = (0..q).map(|_| rng.random_range(-3.0..3.0)).collect();
    c.bench_function("lira_offline/16x1000", |b| {
        b.iter(|| lira_offline(&queries, black_box(&target), &labels, &shadows, &LiraConfig::default()).unwrap())
    });

    let losses: Vec<f64> = (0..q).map(|_| rng.random_range(0.0..3.0)).collect();
    c.bench_function("lr_mia/500+500", |b| b.iter(|| lr_mia(black_box(&losses[..500]), &losses[500..], 5).unwrap()));

    let p = 32;
    let pairs = PairedScoreMatrix {
        pairs: p,
        queries: queries.clone(),
        query_classes: (0..q as u32).map(|i| i % 10).collect(),
        base: (0..p * q).map(|_| rng.random_range(-3.0..3.0)).collect(),
        unlearned: (0..p * q).map(|_| rng.random_range(-3.0..3.0)).collect(),
        forgotten: (0..p * q).map(|_| rng.random()).collect(),
        provenance: MatrixProvenance::default(),
    };
    let unlearned: Vec<f64> = target.iter().map(|v| v * 0.9).collect();
    c.bench_function("update_leak/32x1000", |b| {
        b.iter(|| update_leak_attack(&queries, black_box(&target), &unlearned, &labels, &pairs, &UpdateLeakConfig::default()).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let ds = SyntheticSpec {
        shape: [3, 16, 16],
        train_pool: 512,
        test_pool: 64,
        ..SyntheticSpec::default()
    }
    .generate()
    .unwrap();
    let data = IndexSet::range(0, 512);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train_one_epoch_512");
    group.sample_size(10);
    for family in [ArchFamily::Mlp, ArchFamily::SmallCnn] {
        let arch = ArchitectureSpec::new(family, [3, 16, 16], 10).with_width(16);
        group.bench_function(format!("{family:?}"), |b| {
            b.iter(|| train_model(&arch, &ds, &data, &cfg).unwrap())
        });
    }
    group.finish();

    let arch = ArchitectureSpec::new(ArchFamily::SmallCnn, [3, 16, 16], 10).with_width(16);
    let net = train_model(&arch, &ds, &data, &cfg).unwrap().checkpoint.network;
    c.bench_function("extract_scores/small_cnn_512", |b| {
        b.iter(|| extract_scores(&net, &ds, black_box(data.as_slice())).unwrap())
    });

    let theta: Vec<f32> = net.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d: Vec<f64> = theta.iter().map(|_| rng.random()).collect();
    let f: Vec<f64> = theta.iter().map(|_| rng.random_range(0.0..20.0)).collect();
    c.bench_function("ssd_dampen", |b| {
        b.iter_batched(|| theta.clone(), |t: Vec<f32>| ssd_dampen(&t, &d, &f, 10.0, 1.0).unwrap(), BatchSize::LargeInput)
    });
}

criterion_group!(benches, metrics, attacks, model);
criterion_main!(benches);
