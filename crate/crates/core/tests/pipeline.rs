use drsl::checkpoint::{Checkpoint, Precision};
use drsl::config::RunConfig;
use drsl::contrastive::UnreportedPolicy;
use drsl::data::{self, Dataset, SyntheticSpec};
use drsl::experiment;
use drsl::metrics::roc_auc;
use drsl::par::Exec;

fn mean_tile(tiles: &[Vec<f32>]) -> Vec<f64> {
    let mut m = vec![0.0; tiles[0].len()];
    for t in tiles {
        for (a, &x) in m.iter_mut().zip(t) {
            *a += f64::from(x) / tiles.len() as f64;
        }
    }
    m
}

fn quick_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.train.epochs = 4;
    c.train.freeze_epochs = 2;
    c.train.batch_size = 4;
    c.train.tiles_per_slide = 4;
    c.train.codebook_k = 6;
    c.train.lr = 1e-3;
    c.train.seed = seed;
    c
}

fn small(seed: u64, report_fraction: f64) -> Dataset {
    data::generate(&SyntheticSpec {
        slides_per_class: 6,
        tiles_min: 10,
        tiles_max: 14,
        report_fraction,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn linear_probe_on_mean_tiles_separates_classes() {
    let ds = data::generate(&SyntheticSpec { seed: 2, ..Default::default() }).unwrap();
    let split = data::split(&ds, 0.5, 2).unwrap();
    let x: Vec<Vec<f64>> = ds.slides.iter().map(|s| mean_tile(&s.tiles)).collect();
    let y = ds.labels();
    let dim = ds.input_dim;
    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    for _ in 0..500 {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for &i in &split.train {
            let z: f64 = w.iter().zip(&x[i]).map(|(a, b)| a * b).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-z).exp()) - y[i] as f64;
            gw.iter_mut().zip(&x[i]).for_each(|(g, xi)| *g += err * xi);
            gb += err;
        }
        w.iter_mut().zip(&gw).for_each(|(a, g)| *a -= 0.5 * g / split.train.len() as f64);
        b -= 0.5 * gb / split.train.len() as f64;
    }
    let scores: Vec<f64> = split
        .test
        .iter()
        .map(|&i| w.iter().zip(&x[i]).map(|(a, b)| a * b).sum::<f64>() + b)
        .collect();
    let labels: Vec<usize> = split.test.iter().map(|&i| y[i]).collect();
    assert!(roc_auc(&scores, &labels).unwrap() >= 0.9);
}

#[test]
fn generate_write_load_round_trip_with_partial_reports() {
    let ds = small(4, 0.5);
    assert_eq!(ds.slides.iter().filter(|s| s.report.is_some()).count(), 6);
    let dir = tempfile::tempdir().unwrap();
    let manifest = data::write_dataset(dir.path(), &ds).unwrap();
    assert_eq!(data::load_manifest(&manifest).unwrap(), ds);
}

#[test]
fn parallel_and_sequential_runs_are_bit_identical() {
    let ds = small(5, 1.0);
    let mut c = quick_config(5);
    c.parallel = false;
    let a = experiment::run(&c, &ds).unwrap();
    c.parallel = true;
    let b = experiment::run(&c, &ds).unwrap();
    let bits = |o: &experiment::RunOutcome| -> Vec<u64> { o.reports.iter().map(|r| r.loss_total.to_bits()).collect() };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.state, b.state);
    assert_eq!(a.bank, b.bank);
    assert_eq!(a.eval, b.eval);
}

#[test]
fn both_unreported_policies_train_on_partial_reports() {
    let ds = small(6, 0.5);
    for policy in [UnreportedPolicy::Exclude, UnreportedPolicy::AsNegatives] {
        let mut c = quick_config(6);
        c.train.unreported = policy;
        let out = experiment::run(&c, &ds).unwrap();
        assert!(out.reports.iter().all(|r| r.loss_total.is_finite()), "{policy}");
    }
}

#[test]
fn report_free_dataset_trains_on_classification_alone() {
    let ds = small(7, 1.0).without_reports();
    let out = experiment::run(&quick_config(7), &ds).unwrap();
    assert!(out.reports.iter().all(|r| r.loss_contrastive == 0.0 && r.loss_total == r.loss_cls));
}

#[test]
fn f32_checkpoint_restores_within_single_precision() {
    let ds = small(8, 1.0);
    let c = quick_config(8);
    let out = experiment::run(&c, &ds).unwrap();
    let bytes = Checkpoint::from_state(&out.state, &c.to_text(), Some(&out.bank)).to_bytes(Precision::F32);
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let mut resolved = c.clone();
    resolved.resolve(&ds).unwrap();
    let mut state = experiment::init_state(&resolved).unwrap();
    ck.restore_into(&mut state).unwrap();
    assert_eq!(state.epoch, out.state.epoch);
    for (a, b) in state.model.params().iter().zip(out.state.model.params()) {
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert!((x - y).abs() <= 1e-6 * (1.0 + y.abs()), "{}", a.name);
        }
    }
    let eval = drsl::trainer::evaluate(&state.model, &out.codebook, &ds, Exec::Sequential).unwrap();
    assert!(eval.auc.is_finite());
}

#[test]
fn config_mismatching_the_dataset_is_rejected() {
    let ds = small(9, 1.0);
    let mut c = quick_config(9);
    c.input_dim = Some(ds.input_dim + 1);
    assert!(matches!(experiment::run(&c, &ds), Err(drsl::Error::Config(_))));
    let mut c = quick_config(9);
    c.train.codebook_k = ds.total_tiles() + 1;
    assert!(matches!(experiment::run(&c, &ds), Err(drsl::Error::Config(_))));
}
