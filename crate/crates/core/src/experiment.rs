//! In-memory end-to-end runs and the codebook-size / tiles-per-slide sweep.

use std::time::Instant;

use serde::Serialize;

use crate::bank::MemoryBank;
use crate::codebook::Codebook;
use crate::config::RunConfig;
use crate::data::{self, Dataset, Split};
use crate::error::Result;
use crate::metrics::EvalResult;
use crate::trainer::{self, EpochReport, TrainState};

/// Fresh state for a resolved config.
pub fn init_state(config: &RunConfig) -> Result<TrainState> {
    TrainState::new(
        &config.train,
        config.encoder()?,
        config.classes()?,
        config.report_dim,
        config.vlad(),
    )
}

pub struct RunOutcome {
    pub split: Split,
    pub reports: Vec<EpochReport>,
    pub eval: EvalResult,
    pub state: TrainState,
    pub bank: MemoryBank,
    pub codebook: Codebook,
}

/// Split, prepare over every slide, train on the train side, evaluate on
/// the test side.
pub fn run(config: &RunConfig, ds: &Dataset) -> Result<RunOutcome> {
    let mut config = config.clone();
    config.resolve(ds)?;
    let exec = config.exec();
    let split = data::split(ds, config.train_fraction, config.split_seed)?;
    let train_set = ds.subset(&split.train)?;
    let test_set = ds.subset(&split.test)?;
    let mut state = init_state(&config)?;
    let (mut bank, codebook) = trainer::prepare(&state.model, ds, &config.train, exec)?;
    let reports = trainer::train(
        &mut state,
        &mut bank,
        &codebook,
        &train_set,
        &config.train,
        exec,
        |_, _, r| {
            log::debug!("{}", r.json_line());
            Ok(())
        },
    )?;
    let eval = trainer::evaluate(&state.model, &codebook, &test_set, exec)?;
    Ok(RunOutcome {
        split,
        reports,
        eval,
        state,
        bank,
        codebook,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub codebook_k: usize,
    pub tiles_per_slide: usize,
    pub auc: f64,
    pub weighted_f1: f64,
    pub final_loss: f64,
    pub wall_time_s: f64,
}

/// One full run per `(K, r)` cell, `K` outer.
pub fn ablate(
    config: &RunConfig,
    ds: &Dataset,
    ks: &[usize],
    rs: &[usize],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(ks.len() * rs.len());
    for &k in ks {
        for &r in rs {
            let started = Instant::now();
            let mut c = config.clone();
            c.train.codebook_k = k;
            c.train.tiles_per_slide = r;
            let out = run(&c, ds)?;
            let row = AblationRow {
                codebook_k: k,
                tiles_per_slide: r,
                auc: out.eval.auc,
                weighted_f1: out.eval.weighted_f1,
                final_loss: out.reports.last().map_or(f64::NAN, |r| r.loss_total),
                wall_time_s: started.elapsed().as_secs_f64(),
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}
