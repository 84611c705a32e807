//! Resolved run configuration, read from `key = value` files with `#`
//! comments and echoed verbatim into every artifact.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::Precision;
use crate::data::Dataset;
use crate::encoder::{Activation, EncoderConfig};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::trainer::TrainConfig;
use crate::vlad::VladConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Taken from the manifest when left unset.
    pub input_dim: Option<usize>,
    pub num_classes: Option<usize>,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    /// Projection width when the dataset carries no reports.
    pub report_dim: usize,
    pub intra_norm: bool,
    pub train: TrainConfig,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub parallel: bool,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        Self {
            manifest: None,
            out_dir: PathBuf::from("out"),
            input_dim: None,
            num_classes: None,
            hidden_dims: enc.hidden_dims,
            feature_dim: enc.feature_dim,
            activation: enc.activation,
            report_dim: 16,
            intra_norm: false,
            train: TrainConfig::default(),
            train_fraction: 0.5,
            split_seed: 0,
            parallel: true,
            precision: Precision::F64,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "manifest",
        "out_dir",
        "input_dim",
        "num_classes",
        "hidden_dims",
        "feature_dim",
        "activation",
        "report_dim",
        "intra_norm",
        "batch_size",
        "tiles_per_slide",
        "epochs",
        "lr",
        "weight_decay",
        "freeze_epochs",
        "lambda",
        "seed",
        "codebook_k",
        "kmeans_max_iters",
        "beta1",
        "beta2",
        "eps",
        "unreported",
        "train_fraction",
        "split_seed",
        "parallel",
        "precision",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "input_dim" => self.input_dim = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "num_classes" => self.num_classes = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "hidden_dims" => {
                self.hidden_dims = v
                    .split(',')
                    .map(|x| parse(key, x.trim()))
                    .collect::<Result<_>>()?
            }
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "activation" => self.activation = v.parse()?,
            "report_dim" => self.report_dim = parse(key, v)?,
            "intra_norm" => self.intra_norm = parse_bool(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "tiles_per_slide" => t.tiles_per_slide = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "freeze_epochs" => t.freeze_epochs = parse(key, v)?,
            "lambda" => t.lambda = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "codebook_k" => t.codebook_k = parse(key, v)?,
            "kmeans_max_iters" => t.kmeans_max_iters = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "eps" => t.eps = parse(key, v)?,
            "unreported" => t.unreported = v.parse()?,
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "split_seed" => self.split_seed = parse(key, v)?,
            "parallel" => self.parallel = parse_bool(key, v)?,
            "precision" => self.precision = v.parse()?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    fn value_of(&self, key: &str) -> String {
        let t = &self.train;
        let opt = |o: Option<usize>| o.map(|x| x.to_string()).unwrap_or_default();
        match key {
            "manifest" => self.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "out_dir" => self.out_dir.display().to_string(),
            "input_dim" => opt(self.input_dim),
            "num_classes" => opt(self.num_classes),
            "hidden_dims" => self
                .hidden_dims
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "feature_dim" => self.feature_dim.to_string(),
            "activation" => self.activation.to_string(),
            "report_dim" => self.report_dim.to_string(),
            "intra_norm" => self.intra_norm.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "tiles_per_slide" => t.tiles_per_slide.to_string(),
            "epochs" => t.epochs.to_string(),
            "lr" => t.lr.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "freeze_epochs" => t.freeze_epochs.to_string(),
            "lambda" => t.lambda.to_string(),
            "seed" => t.seed.to_string(),
            "codebook_k" => t.codebook_k.to_string(),
            "kmeans_max_iters" => t.kmeans_max_iters.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "eps" => t.eps.to_string(),
            "unreported" => t.unreported.to_string(),
            "train_fraction" => self.train_fraction.to_string(),
            "split_seed" => self.split_seed.to_string(),
            "parallel" => self.parallel.to_string(),
            "precision" => self.precision.to_string(),
            _ => unreachable!("unlisted key {key}"),
        }
    }

    /// Every key in fixed order; [`RunConfig::from_text`] inverts it.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.value_of(k)))
            .collect()
    }

    /// Fills dataset-derived fields, rejecting explicit values that disagree.
    pub fn resolve(&mut self, ds: &Dataset) -> Result<()> {
        for (key, slot, actual) in [
            ("input_dim", &mut self.input_dim, ds.input_dim),
            ("num_classes", &mut self.num_classes, ds.num_classes),
        ] {
            match slot {
                Some(v) if *v != actual => {
                    return Err(Error::Config(format!(
                        "{key} = {v} but the dataset has {actual}"
                    )))
                }
                _ => *slot = Some(actual),
            }
        }
        if let Some(t) = ds.report_dim {
            self.report_dim = t;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(i) = self.input_dim {
            self.encoder_with(i).validate()?;
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.report_dim == 0 {
            return Err(Error::Config("report_dim must be positive".into()));
        }
        Ok(())
    }

    fn encoder_with(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            feature_dim: self.feature_dim,
            activation: self.activation,
        }
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        let i = self
            .input_dim
            .ok_or_else(|| Error::Config("input_dim is unresolved".into()))?;
        Ok(self.encoder_with(i))
    }

    pub fn classes(&self) -> Result<usize> {
        self.num_classes
            .ok_or_else(|| Error::Config("num_classes is unresolved".into()))
    }

    pub fn vlad(&self) -> VladConfig {
        VladConfig {
            intra_norm: self.intra_norm,
        }
    }

    pub fn exec(&self) -> Exec {
        Exec::from_flag(self.parallel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parses_comments_and_overrides() {
        let mut c = RunConfig::from_text("# header\nepochs = 7  # short\nlr=0.003\nhidden_dims = 8, 4\n").unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.lr, 0.003);
        assert_eq!(c.hidden_dims, vec![8, 4]);
        c.set("epochs", "9").unwrap();
        assert_eq!(c.train.epochs, 9);
    }

    #[test]
    fn unknown_key_and_bad_value() {
        assert!(matches!(RunConfig::from_text("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("epochs = many"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("just text"), Err(Error::Config(_))));
    }

    #[test]
    fn odd_floats_round_trip() {
        let mut c = RunConfig::default();
        c.train.lr = 0.1 + 0.2;
        c.train.weight_decay = 1e-300;
        c.manifest = Some("data/manifest.txt".into());
        c.input_dim = Some(12);
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }
}
