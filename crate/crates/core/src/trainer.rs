//! Preparation, staged training with dynamic tile sampling and bank
//! replacement, and full-tile evaluation.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bank::{FeatureUpdate, MemoryBank};
use crate::codebook::{Codebook, KMeansConfig};
use crate::contrastive::UnreportedPolicy;
use crate::data::Dataset;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalResult;
use crate::model::{BatchSlide, Model, Objective};
use crate::optim::{AdamConfig, AdamState};
use crate::par::{self, Exec};
use crate::vlad::VladConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub tiles_per_slide: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs trained with the encoder frozen.
    pub freeze_epochs: usize,
    /// Weight λ on the contrastive loss.
    pub lambda: f64,
    pub seed: u64,
    pub codebook_k: usize,
    pub kmeans_max_iters: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub unreported: UnreportedPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            tiles_per_slide: 10,
            epochs: 100,
            lr: 1e-4,
            weight_decay: 1e-5,
            freeze_epochs: 10,
            lambda: 1.0,
            seed: 0,
            codebook_k: 64,
            kmeans_max_iters: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            unreported: UnreportedPolicy::Exclude,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 1 || self.tiles_per_slide < 1 {
            return bad("batch_size and tiles_per_slide must be ≥ 1".into());
        }
        if self.freeze_epochs > self.epochs {
            return bad(format!(
                "freeze_epochs {} exceeds epochs {}",
                self.freeze_epochs, self.epochs
            ));
        }
        if self.codebook_k < 1 {
            return bad("codebook k must be ≥ 1".into());
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !self.lambda.is_finite() || self.lambda < 0.0 {
            return bad("lr must be positive; weight_decay and lambda non-negative".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            lambda: self.lambda,
            unreported: self.unreported,
        }
    }

    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.codebook_k,
            max_iters: self.kmeans_max_iters,
            tol: 1e-6,
            seed: self.seed,
        }
    }

    /// Stage of the epoch with zero-based index `epoch`.
    pub fn stage_of(&self, epoch: usize) -> Stage {
        if epoch < self.freeze_epochs {
            Stage::Frozen
        } else {
            Stage::Joint
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(into = "u8")]
pub enum Stage {
    /// Encoder frozen, head and temperatures trained.
    Frozen,
    /// Everything trained.
    Joint,
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::Frozen => 1,
            Stage::Joint => 2,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::Frozen),
            2 => Ok(Stage::Joint),
            other => Err(Error::format(0, format!("unknown stage {other}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub stage: Stage,
    /// Base seed; the sampling stream of epoch `e` is derived from it.
    pub seed: u64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl TrainState {
    pub fn new(
        config: &TrainConfig,
        encoder: EncoderConfig,
        num_classes: usize,
        report_dim: usize,
        vlad: VladConfig,
    ) -> Result<Self> {
        let mut rng = stream_rng(config.seed, 0);
        let mut model = Model::init(encoder, num_classes, report_dim, vlad, &mut rng)?;
        let stage = config.stage_of(0);
        model.encoder.set_frozen(stage == Stage::Frozen);
        let adam = AdamState::new(&model.params());
        Ok(Self {
            model,
            adam,
            epoch: 0,
            stage,
            seed: config.seed,
        })
    }

    /// Sampling RNG for the zero-based epoch `epoch`.
    pub fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        stream_rng(self.seed, epoch as u64 + 1)
    }
}

/// Encodes every tile with the current encoder into a new bank and builds
/// the codebook over all of it.
pub fn prepare(
    model: &Model,
    dataset: &Dataset,
    config: &TrainConfig,
    exec: Exec,
) -> Result<(MemoryBank, Codebook)> {
    config.validate()?;
    let total = dataset.total_tiles();
    if config.codebook_k > total {
        return Err(Error::Config(format!(
            "codebook k = {} exceeds the {total} available tiles",
            config.codebook_k
        )));
    }
    let encoded = par::try_map(exec, &dataset.slides, |s| {
        model.encoder.encode_batch(&s.tiles).map_err(|e| Error::Load {
            slide: s.slide_id.clone(),
            message: e.to_string(),
        })
    })?;
    let mut bank = MemoryBank::new(model.encoder.config.feature_dim);
    for (s, feats) in dataset.slides.iter().zip(&encoded) {
        for (i, f) in feats.iter().enumerate() {
            bank.insert(&s.slide_id, i as u32, f)?;
        }
    }
    let (cb, _) = Codebook::build_traced(&bank.all_features(), &config.kmeans(), exec)?;
    Ok((bank, cb))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub stage: Stage,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_contrastive: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub wall_time_s: f64,
    /// Sampled tile indices per slide, ascending.
    #[serde(skip)]
    pub sampled: Vec<(String, Vec<u32>)>,
}

impl EpochReport {
    /// One JSON-lines record.
    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("epoch report serializes")
    }
}

/// One pass over `dataset` in seeded shuffled order.
pub fn train_epoch(
    state: &mut TrainState,
    bank: &mut MemoryBank,
    cb: &Codebook,
    dataset: &Dataset,
    config: &TrainConfig,
    exec: Exec,
) -> Result<EpochReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let started = Instant::now();
    let epoch = state.epoch;
    let stage = config.stage_of(epoch);
    state.stage = stage;
    state.model.encoder.set_frozen(stage == Stage::Frozen);

    let mut rng = state.epoch_rng(epoch);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);

    let adam = config.adam();
    let objective = config.objective();
    let (mut sum_total, mut sum_cls, mut sum_con) = (0.0, 0.0, 0.0);
    let mut batches = 0usize;
    let mut sampled = Vec::with_capacity(dataset.len());

    for chunk in order.chunks(config.batch_size) {
        let mut picks = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let s = &dataset.slides[i];
            let n = s.tiles.len();
            let mut idx: Vec<u32> = rand::seq::index::sample(&mut rng, n, config.tiles_per_slide.min(n))
                .into_iter()
                .map(|x| x as u32)
                .collect();
            idx.sort_unstable();
            picks.push(idx);
        }

        let loss = {
            let mut items = Vec::with_capacity(chunk.len());
            for (&i, idx) in chunk.iter().zip(&picks) {
                let s = &dataset.slides[i];
                let stored = bank.slide(&s.slide_id)?;
                if stored.len() != s.tiles.len() {
                    return Err(Error::Input(format!(
                        "bank holds {} tiles for `{}`, dataset has {}",
                        stored.len(),
                        s.slide_id,
                        s.tiles.len()
                    )));
                }
                let stale = stored
                    .iter()
                    .filter(|(t, _)| idx.binary_search(t).is_err())
                    .map(|(&t, f)| (t, f.as_slice()))
                    .collect();
                items.push(BatchSlide {
                    label: s.label,
                    fresh_indices: idx.clone(),
                    fresh_tiles: idx.iter().map(|&t| s.tiles[t as usize].as_slice()).collect(),
                    stale,
                    report: s.report.as_deref(),
                });
            }
            state.model.batch_loss(cb, &items, objective, exec)?
        };

        let mut updates = Vec::new();
        for ((&i, idx), feats) in chunk.iter().zip(&picks).zip(&loss.fresh_features) {
            for (&t, f) in idx.iter().zip(feats) {
                updates.push(FeatureUpdate {
                    slide_id: dataset.slides[i].slide_id.clone(),
                    tile_index: t,
                    feature: f.clone(),
                });
            }
        }
        bank.replace_batch(&updates)?;

        let mut params = state.model.params_mut();
        state.adam.step(&adam, &mut params, &loss.grads)?;

        sum_total += loss.total;
        sum_cls += loss.cls;
        sum_con += loss.contrastive;
        batches += 1;
        for (&i, idx) in chunk.iter().zip(picks) {
            sampled.push((dataset.slides[i].slide_id.clone(), idx));
        }
    }

    state.epoch += 1;
    let n = batches as f64;
    Ok(EpochReport {
        epoch,
        stage,
        loss_total: sum_total / n,
        loss_cls: sum_cls / n,
        loss_contrastive: sum_con / n,
        sigma1: state.model.temperatures.sigma1(),
        sigma2: state.model.temperatures.sigma2(),
        wall_time_s: started.elapsed().as_secs_f64(),
        sampled,
    })
}

/// Runs epochs until `config.epochs` are complete, calling `on_epoch` after
/// each.
pub fn train<F>(
    state: &mut TrainState,
    bank: &mut MemoryBank,
    cb: &Codebook,
    dataset: &Dataset,
    config: &TrainConfig,
    exec: Exec,
    mut on_epoch: F,
) -> Result<Vec<EpochReport>>
where
    F: FnMut(&TrainState, &MemoryBank, &EpochReport) -> Result<()>,
{
    let mut reports = Vec::new();
    while state.epoch < config.epochs {
        let r = train_epoch(state, bank, cb, dataset, config, exec)?;
        on_epoch(state, bank, &r)?;
        reports.push(r);
    }
    Ok(reports)
}

/// Every tile of every slide encoded fresh, one slide at a time.
pub fn evaluate(model: &Model, cb: &Codebook, dataset: &Dataset, exec: Exec) -> Result<EvalResult> {
    let outputs = par::try_map(exec, &dataset.slides, |s| {
        model
            .infer(cb, &s.tiles)
            .map(|o| (s.slide_id.clone(), s.label, o.logits))
    })?;
    EvalResult::from_logits(&outputs, model.num_classes())
}
