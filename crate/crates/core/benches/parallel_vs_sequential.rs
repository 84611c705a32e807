use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use drsl::codebook::Codebook;
use drsl::config::RunConfig;
use drsl::data::{self, Dataset, SyntheticSpec};
use drsl::experiment;
use drsl::par::Exec;
use drsl::trainer;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn fixture() -> (Dataset, RunConfig) {
    let ds = data::generate(&SyntheticSpec {
        slides_per_class: 32,
        tiles_min: 60,
        tiles_max: 80,
        seed: 1,
        ..Default::default()
    })
    .expect("synthetic data");
    let mut c = RunConfig::default();
    c.train.batch_size = 16;
    c.train.tiles_per_slide = 20;
    c.train.freeze_epochs = 0;
    c.train.codebook_k = 32;
    c.resolve(&ds).expect("config");
    (ds, c)
}

fn benches(crit: &mut Criterion) {
    let (ds, c) = fixture();
    let state = experiment::init_state(&c).unwrap();
    let (bank, cb) = trainer::prepare(&state.model, &ds, &c.train, Exec::Sequential).unwrap();
    let features: Vec<Vec<f32>> = bank.all_features().into_iter().map(<[f32]>::to_vec).collect();

    let mut g = crit.benchmark_group("train_epoch");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter_batched(
                || (state.clone(), bank.clone()),
                |(mut s, mut bk)| trainer::train_epoch(&mut s, &mut bk, &cb, &ds, &c.train, exec).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();

    let mut g = crit.benchmark_group("evaluate");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| trainer::evaluate(&state.model, &cb, &ds, exec).unwrap()));
    }
    g.finish();

    let mut g = crit.benchmark_group("kmeans");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| Codebook::build_traced(&features, &c.train.kmeans(), exec).unwrap()));
    }
    g.finish();
}

criterion_group!(parallel_vs_sequential, benches);
criterion_main!(parallel_vs_sequential);
