//! Command-line surface: `synth`, `prepare`, `train`, `eval`, `encode` and
//! `ablate`. Exit code 0 on success, 1 on runtime errors, 2 on usage errors.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bank::MemoryBank;
use crate::checkpoint::Checkpoint;
use crate::codebook::Codebook;
use crate::codec;
use crate::config::RunConfig;
use crate::data::{self, SyntheticSpec};
use crate::error::Error;
use crate::experiment;
use crate::trainer::{self, TrainState};
use crate::vlad;

pub const RUN_CONFIG: &str = "run_config.txt";
pub const TRAIN_CONFIG: &str = "train_config.txt";
pub const BANK_FILE: &str = "bank.drsb";
pub const CODEBOOK_FILE: &str = "codebook.drsc";
pub const INIT_CHECKPOINT: &str = "prepare.drsk";
pub const CHECKPOINT: &str = "checkpoint.drsk";
pub const EVAL_REPORT: &str = "eval.json";
pub const DESCRIPTORS: &str = "descriptors.drsv";
pub const ABLATION_LOG: &str = "ablation.jsonl";

#[derive(Debug, Parser)]
#[command(name = "drsl", version, about = "Dynamic residual encoding with slide-level contrastive learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Encode every tile into a memory bank and build the codebook.
    Prepare(PrepareArgs),
    /// Train from prepared artifacts.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint.
    Eval(EvalArgs),
    /// Write VLAD descriptors of every slide with a trained encoder.
    Encode(EncodeArgs),
    /// Sweep codebook size and tiles per slide.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    slides_per_class: usize,
    #[arg(long, default_value_t = 25)]
    tiles_min: usize,
    #[arg(long, default_value_t = 40)]
    tiles_max: usize,
    #[arg(long, default_value_t = 32)]
    input_dim: usize,
    /// Fraction of class-signal tiles per slide, in (0, 1].
    #[arg(long, default_value_t = 0.3, allow_negative_numbers = true)]
    rho: f64,
    #[arg(long, default_value_t = 0.25)]
    noise: f64,
    #[arg(long, default_value_t = 16)]
    report_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    report_noise: f64,
    #[arg(long, default_value_t = 1.0)]
    report_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Config sources, applied in order: file, then `--set`, then named flags.
#[derive(Debug, Args, Default)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    tiles_per_slide: Option<usize>,
    #[arg(long)]
    codebook_k: Option<usize>,
    #[arg(long)]
    freeze_epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Run everything on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct PrepareArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    /// Append metrics here instead of stdout.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from the last checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitSide {
    Test,
    Train,
    All,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitSide::Test)]
    split: SplitSide,
    /// Accepted for symmetry; evaluation is deterministic.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long)]
    out: PathBuf,
    /// Descriptor file to write, default `<out>/descriptors.drsv`.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,256")]
    ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "10,20,30")]
    rs: Vec<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

impl ConfigArgs {
    fn apply(&self, c: &mut RunConfig) -> CmdResult {
        if let Some(p) = &self.config {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            c.apply_text(&text)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            c.set(k.trim(), v).map_err(|e| Failure::Usage(e.to_string()))?;
        }
        let t = &mut c.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.tiles_per_slide {
            t.tiles_per_slide = v;
        }
        if let Some(v) = self.codebook_k {
            t.codebook_k = v;
        }
        if let Some(v) = self.freeze_epochs {
            t.freeze_epochs = v;
        }
        if let Some(v) = self.lambda {
            t.lambda = v;
        }
        if self.sequential {
            c.parallel = false;
        }
        Ok(())
    }
}

fn require(path: &Path, producer: &str) -> std::result::Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Runtime(Error::Input(format!(
            "missing {}; run `drsl {producer}` first",
            path.display()
        ))))
    }
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    codec::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn load_dataset(config: &RunConfig) -> std::result::Result<data::Dataset, Failure> {
    let manifest = config
        .manifest
        .as_ref()
        .ok_or_else(|| Failure::Usage("no manifest configured".into()))?;
    Ok(data::load_manifest(manifest)?)
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    if !(a.rho > 0.0 && a.rho <= 1.0) {
        return Err(Failure::Usage(format!("--rho must be in (0, 1], got {}", a.rho)));
    }
    let spec = SyntheticSpec {
        num_classes: a.classes,
        slides_per_class: a.slides_per_class,
        tiles_min: a.tiles_min,
        tiles_max: a.tiles_max,
        input_dim: a.input_dim,
        signal_fraction: a.rho,
        noise_scale: a.noise,
        report_dim: a.report_dim,
        report_noise: a.report_noise,
        report_fraction: a.report_fraction,
        seed: a.seed,
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let ds = data::generate(&spec)?;
    let path = data::write_dataset(&a.out, &ds)?;
    log::info!("wrote {} slides to {}", ds.len(), path.display());
    Ok(())
}

fn cmd_prepare(a: &PrepareArgs) -> CmdResult {
    let mut config = RunConfig::default();
    a.config.apply(&mut config)?;
    config.manifest = Some(std::path::absolute(&a.manifest).map_err(|e| Error::io(&a.manifest, e))?);
    config.out_dir = a.out.clone();
    let ds = load_dataset(&config)?;
    config.resolve(&ds)?;
    let text = config.to_text();
    let state = experiment::init_state(&config)?;
    let (bank, cb) = trainer::prepare(&state.model, &ds, &config.train, config.exec())?;
    write_text(&a.out.join(RUN_CONFIG), &text)?;
    bank.save(&a.out.join(BANK_FILE))?;
    cb.save(&a.out.join(CODEBOOK_FILE))?;
    Checkpoint::from_state(&state, &text, None).save(&a.out.join(INIT_CHECKPOINT), config.precision)?;
    log::info!(
        "bank: {} slides, {} tiles; codebook k={} after {} iterations (inertia {:.6})",
        bank.slide_count(),
        bank.total_tiles(),
        cb.k(),
        cb.iters_run(),
        cb.final_inertia()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let run_cfg = a.out.join(RUN_CONFIG);
    for (file, producer) in [
        (RUN_CONFIG, "prepare"),
        (BANK_FILE, "prepare"),
        (CODEBOOK_FILE, "prepare"),
        (INIT_CHECKPOINT, "prepare"),
    ] {
        require(&a.out.join(file), producer)?;
    }
    let mut config = RunConfig::from_file(&run_cfg)?;
    a.config.apply(&mut config)?;
    config.out_dir = a.out.clone();
    let ds = load_dataset(&config)?;
    config.resolve(&ds)?;
    let text = config.to_text();
    let exec = config.exec();
    let cb = Codebook::load_expecting(&a.out.join(CODEBOOK_FILE), config.feature_dim)?;

    let mut state = experiment::init_state(&config)?;
    let ck_path = a.out.join(CHECKPOINT);
    let mut bank = if a.resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        ck.restore_into(&mut state)?;
        log::info!("resuming at epoch {}", state.epoch);
        ck.bank.ok_or_else(|| Error::Input(format!("{} carries no bank", ck_path.display())))?
    } else {
        Checkpoint::load(&a.out.join(INIT_CHECKPOINT))?.restore_into(&mut state)?;
        MemoryBank::load(&a.out.join(BANK_FILE))?
    };
    let split = data::split(&ds, config.train_fraction, config.split_seed)?;
    let train_set = ds.subset(&split.train)?;
    write_text(&a.out.join(TRAIN_CONFIG), &text)?;

    let mut sink: Box<dyn Write> = match &a.log {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            Box::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?,
            )
        }
        None => Box::new(std::io::stdout()),
    };
    let precision = config.precision;
    let log_path = a.log.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
    trainer::train(&mut state, &mut bank, &cb, &train_set, &config.train, exec, |st, bank, r| {
        writeln!(sink, "{}", r.json_line()).map_err(|e| Error::io(&log_path, e))?;
        Checkpoint::from_state(st, &text, Some(bank)).save(&ck_path, precision)
    })?;
    if state.epoch == 0 || !ck_path.exists() {
        Checkpoint::from_state(&state, &text, Some(&bank)).save(&ck_path, precision)?;
    }
    log::info!("trained to epoch {}", state.epoch);
    Ok(())
}

/// Model and config restored from the trained checkpoint.
fn load_trained(out: &Path) -> std::result::Result<(RunConfig, TrainState, Codebook), Failure> {
    let ck_path = out.join(CHECKPOINT);
    require(&ck_path, "train")?;
    require(&out.join(CODEBOOK_FILE), "prepare")?;
    let ck = Checkpoint::load(&ck_path)?;
    let config = RunConfig::from_text(&ck.config)?;
    let mut state = experiment::init_state(&config)?;
    ck.restore_into(&mut state)?;
    let cb = Codebook::load_expecting(&out.join(CODEBOOK_FILE), config.feature_dim)?;
    Ok((config, state, cb))
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    if a.seed.is_some() {
        log::warn!("--seed is ignored: evaluation is deterministic");
    }
    let (mut config, state, cb) = load_trained(&a.out)?;
    if a.sequential {
        config.parallel = false;
    }
    let ds = load_dataset(&config)?;
    let split = data::split(&ds, config.train_fraction, config.split_seed)?;
    let subset = match a.split {
        SplitSide::Test => ds.subset(&split.test)?,
        SplitSide::Train => ds.subset(&split.train)?,
        SplitSide::All => ds,
    };
    let result = trainer::evaluate(&state.model, &cb, &subset, config.exec())?;
    let side = format!("{:?}", a.split).to_lowercase();
    let report = serde_json::json!({
        "config": config.to_text(),
        "split": side,
        "epoch": state.epoch,
        "auc": result.auc,
        "weighted_f1": result.weighted_f1,
        "confusion": result.confusion,
        "per_slide": result.per_slide,
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&a.out.join(EVAL_REPORT), &text)?;
    println!(
        "{}",
        serde_json::json!({"split": side, "auc": result.auc, "weighted_f1": result.weighted_f1})
    );
    Ok(())
}

fn cmd_encode(a: &EncodeArgs) -> CmdResult {
    let (mut config, state, cb) = load_trained(&a.out)?;
    if a.sequential {
        config.parallel = false;
    }
    let ds = load_dataset(&config)?;
    let rows = crate::par::try_map(config.exec(), &ds.slides, |s| {
        state.model.infer(&cb, &s.tiles).map(|o| {
            let v: Vec<f32> = o.descriptor.iter().map(|&x| x as f32).collect();
            (s.slide_id.clone(), v)
        })
    })?;
    let path = a.output.clone().unwrap_or_else(|| a.out.join(DESCRIPTORS));
    vlad::write_descriptors(&path, cb.k(), cb.dim(), &rows)?;
    write_text(&path.with_extension("config.txt"), &config.to_text())?;
    log::info!("wrote {} descriptors to {}", rows.len(), path.display());
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> CmdResult {
    let mut config = RunConfig::default();
    a.config.apply(&mut config)?;
    config.manifest = Some(a.manifest.clone());
    config.out_dir = a.out.clone();
    let ds = load_dataset(&config)?;
    config.resolve(&ds)?;
    write_text(&a.out.join(RUN_CONFIG), &config.to_text())?;
    let mut lines = String::new();
    experiment::ablate(&config, &ds, &a.ks, &a.rs, |row| {
        let line = serde_json::to_string(row).expect("row serializes");
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    })?;
    write_text(&a.out.join(ABLATION_LOG), &lines)?;
    Ok(())
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("DRSL_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}
