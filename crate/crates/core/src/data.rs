//! Datasets: manifest loading, writing, stratified splits, and a seeded
//! synthetic generator with class-correlated reports.
//!
//! Manifest format, one directive per line, `#` starts a comment:
//!
//! ```text
//! dims <input_dim> <num_classes>
//! reports <report_file>                  (optional)
//! slide <id> <label> <tile_file> [<report_offset>]
//! ```
//!
//! Paths are relative to the manifest's directory. Tile files hold one
//! slide in the `DRSB` record layout; `report_offset` is the byte offset of
//! the slide's record in the `DRST` report file.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bank::{decode_records, encode_records};
use crate::codec;
use crate::contrastive::ReportFile;
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const REPORTS_NAME: &str = "reports.drst";

#[derive(Clone, Debug, PartialEq)]
pub struct SlideRecord {
    pub slide_id: String,
    pub label: usize,
    pub tiles: Vec<Vec<f32>>,
    pub report: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Dimension of report embeddings, when the dataset carries any.
    pub report_dim: Option<usize>,
    pub slides: Vec<SlideRecord>,
}

impl Dataset {
    pub fn new(
        input_dim: usize,
        num_classes: usize,
        report_dim: Option<usize>,
        slides: Vec<SlideRecord>,
    ) -> Result<Self> {
        let ds = Self {
            input_dim,
            num_classes,
            report_dim,
            slides,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.slides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slides.is_empty()
    }

    pub fn total_tiles(&self) -> usize {
        self.slides.iter().map(|s| s.tiles.len()).sum()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.slides.iter().map(|s| s.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut slides = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.slides.get(i).ok_or(Error::Index {
                index: i,
                len: self.slides.len(),
            })?;
            slides.push(s.clone());
        }
        Ok(Self {
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            report_dim: self.report_dim,
            slides,
        })
    }

    /// A copy with every report dropped.
    pub fn without_reports(&self) -> Self {
        let mut ds = self.clone();
        for s in &mut ds.slides {
            s.report = None;
        }
        ds
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!(
                "dataset needs input_dim ≥ 1 and ≥ 2 classes, got {} and {}",
                self.input_dim, self.num_classes
            )));
        }
        let mut seen = BTreeSet::new();
        for s in &self.slides {
            let fail = |message: String| Error::Load {
                slide: s.slide_id.clone(),
                message,
            };
            check_id(&s.slide_id)?;
            if !seen.insert(s.slide_id.as_str()) {
                return Err(fail("duplicate slide id".into()));
            }
            if s.label >= self.num_classes {
                return Err(fail(format!(
                    "label {} outside 0..{}",
                    s.label, self.num_classes
                )));
            }
            if s.tiles.is_empty() {
                return Err(fail("slide has no tiles".into()));
            }
            for (i, t) in s.tiles.iter().enumerate() {
                if t.len() != self.input_dim {
                    return Err(fail(format!(
                        "tile {i} has length {}, expected {}",
                        t.len(),
                        self.input_dim
                    )));
                }
                if t.iter().any(|x| !x.is_finite()) {
                    return Err(fail(format!("tile {i} has a non-finite value")));
                }
            }
            if let Some(r) = &s.report {
                if Some(r.len()) != self.report_dim {
                    return Err(fail(format!(
                        "report length {} does not match {:?}",
                        r.len(),
                        self.report_dim
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "slide id `{id}` must be non-empty ASCII letters, digits, `-`, `_` or `.`"
        )))
    }
}

/// Reads a manifest and every file it references.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut dims: Option<(usize, usize)> = None;
    let mut reports: Option<ReportFile> = None;
    let mut slides = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Input(format!("{}:{}: {msg}", path.display(), n + 1));
        let words: Vec<&str> = line.split_whitespace().collect();
        match words[0] {
            "dims" => {
                if words.len() != 3 || dims.is_some() {
                    return Err(bad("expected a single `dims <input_dim> <num_classes>`"));
                }
                let a = words[1].parse().map_err(|_| bad("bad input_dim"))?;
                let b = words[2].parse().map_err(|_| bad("bad num_classes"))?;
                dims = Some((a, b));
            }
            "reports" => {
                if words.len() != 2 || reports.is_some() || !slides.is_empty() {
                    return Err(bad("`reports <file>` must appear once, before any slide"));
                }
                reports = Some(ReportFile::load(&base.join(words[1]))?);
            }
            "slide" => {
                let (input_dim, _) = dims.ok_or_else(|| bad("`dims` must come first"))?;
                if !(4..=5).contains(&words.len()) {
                    return Err(bad("expected `slide <id> <label> <tile_file> [<report_offset>]`"));
                }
                let id = words[1].to_string();
                let fail = |message: String| Error::Load {
                    slide: id.clone(),
                    message,
                };
                let label = words[2]
                    .parse()
                    .map_err(|_| fail(format!("unparseable label `{}`", words[2])))?;
                let tile_path = base.join(words[3]);
                let tiles = read_tile_file(&tile_path, input_dim)
                    .map_err(|e| fail(format!("{}: {e}", tile_path.display())))?;
                let report = match words.get(4) {
                    None => None,
                    Some(w) => {
                        let offset: u64 =
                            w.parse().map_err(|_| fail(format!("unparseable offset `{w}`")))?;
                        let file = reports
                            .as_ref()
                            .ok_or_else(|| fail("report offset given without `reports` file".into()))?;
                        let rec = file
                            .at_offset(offset)
                            .ok_or_else(|| fail(format!("no report record at offset {offset}")))?;
                        if rec.slide_id != id {
                            return Err(fail(format!(
                                "report at offset {offset} belongs to `{}`",
                                rec.slide_id
                            )));
                        }
                        Some(rec.embedding.clone())
                    }
                };
                slides.push(SlideRecord {
                    slide_id: id,
                    label,
                    tiles,
                    report,
                });
            }
            other => return Err(bad(&format!("unknown directive `{other}`"))),
        }
    }
    let (input_dim, num_classes) =
        dims.ok_or_else(|| Error::Input(format!("{}: missing `dims` line", path.display())))?;
    Dataset::new(input_dim, num_classes, reports.map(|r| r.t_dim), slides)
}

fn read_tile_file(path: &Path, input_dim: usize) -> Result<Vec<Vec<f32>>> {
    let (d, mut slides) = decode_records(&codec::read_file(path)?)?;
    if d != input_dim {
        return Err(Error::dim("tile file", &[input_dim], &[d]));
    }
    if slides.len() != 1 {
        return Err(Error::Input(format!(
            "tile file holds {} slides, expected 1",
            slides.len()
        )));
    }
    let (_, tiles) = slides.pop().unwrap();
    for (expected, (idx, _)) in tiles.iter().enumerate() {
        if *idx as usize != expected {
            return Err(Error::Input(format!("tile indices must be 0..n, found {idx}")));
        }
    }
    Ok(tiles.into_iter().map(|(_, t)| t).collect())
}

/// Writes `manifest.txt`, one tile file per slide under `tiles/`, and
/// `reports.drst` when the dataset has a report dimension. Returns the manifest path.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    ds.validate()?;
    let mut manifest = format!("dims {} {}\n", ds.input_dim, ds.num_classes);
    let items: Vec<(String, Vec<f32>)> = ds
        .slides
        .iter()
        .filter_map(|s| s.report.clone().map(|r| (s.slide_id.clone(), r)))
        .collect();
    let mut offsets = std::collections::BTreeMap::new();
    if let Some(t_dim) = ds.report_dim {
        let (file, bytes) = ReportFile::build(t_dim, items)?;
        for r in &file.records {
            offsets.insert(r.slide_id.clone(), r.offset);
        }
        codec::write_atomic(&dir.join(REPORTS_NAME), &bytes)?;
        writeln!(manifest, "reports {REPORTS_NAME}").unwrap();
    }
    for s in &ds.slides {
        let rel = format!("tiles/{}.drsb", s.slide_id);
        let bytes = encode_records(
            ds.input_dim,
            [(
                s.slide_id.as_str(),
                s.tiles.iter().enumerate().map(|(i, t)| (i as u32, t.as_slice())),
            )],
        );
        codec::write_atomic(&dir.join(&rel), &bytes)?;
        write!(manifest, "slide {} {} {rel}", s.slide_id, s.label).unwrap();
        if let Some(off) = offsets.get(&s.slide_id) {
            write!(manifest, " {off}").unwrap();
        }
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST_NAME);
    codec::write_atomic(&path, manifest.as_bytes())?;
    Ok(path)
}

/// Train/test slide indices, each ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split. The train side gets `round(fraction · N)` slides,
/// allotted to classes by largest remainder (lowest class on ties) and
/// clamped so every class lands on both sides; members are picked by a
/// seeded shuffle.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut classes: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, s) in ds.slides.iter().enumerate() {
        classes[s.label].push(i);
    }
    for (c, members) in classes.iter().enumerate() {
        if members.len() == 1 {
            return Err(Error::Split(format!("class {c} has 1 slide, need at least 2")));
        }
    }
    let exact: Vec<f64> = classes.iter().map(|m| train_fraction * m.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let target = (train_fraction * ds.len() as f64).round() as usize;
    let mut by_remainder: Vec<usize> = (0..classes.len()).filter(|&c| !classes[c].is_empty()).collect();
    by_remainder.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = target.saturating_sub(quota.iter().sum());
    for &c in by_remainder.iter().cycle().take(by_remainder.len() * 2) {
        if left == 0 {
            break;
        }
        if quota[c] < classes[c].len() {
            quota[c] += 1;
            left -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (members, q) in classes.iter_mut().zip(quota) {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let n_train = q.clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub slides_per_class: usize,
    pub tiles_min: usize,
    pub tiles_max: usize,
    pub input_dim: usize,
    /// Fraction ρ of each slide's tiles drawn around the class direction.
    pub signal_fraction: f64,
    pub noise_scale: f64,
    pub report_dim: usize,
    pub report_noise: f64,
    /// Fraction of slides, per class, that get a report.
    pub report_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            slides_per_class: 20,
            tiles_min: 25,
            tiles_max: 40,
            input_dim: 32,
            signal_fraction: 0.3,
            noise_scale: 0.25,
            report_dim: 16,
            report_noise: 0.1,
            report_fraction: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return bad(format!("signal fraction must be in (0, 1], got {}", self.signal_fraction));
        }
        if !(0.0..=1.0).contains(&self.report_fraction) {
            return bad(format!("report fraction must be in [0, 1], got {}", self.report_fraction));
        }
        if self.tiles_min < 1 || self.tiles_max < self.tiles_min {
            return bad(format!("bad tile range [{}, {}]", self.tiles_min, self.tiles_max));
        }
        if self.num_classes < 2 || self.slides_per_class < 1 {
            return bad("need ≥ 2 classes and ≥ 1 slide per class".into());
        }
        if self.input_dim < self.num_classes || self.report_dim < self.num_classes {
            return bad(format!(
                "input and report dims must be ≥ {} to hold orthogonal class directions",
                self.num_classes
            ));
        }
        if self.noise_scale < 0.0 || self.report_noise < 0.0 {
            return bad("noise scales must be non-negative".into());
        }
        Ok(())
    }
}

/// `count` orthonormal vectors by Gram–Schmidt over Gaussian draws.
fn orthonormal_directions(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= dot * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tile_dirs = orthonormal_directions(&mut rng, spec.num_classes, spec.input_dim);
    let report_dirs = orthonormal_directions(&mut rng, spec.num_classes, spec.report_dim);
    let n_reported = (spec.report_fraction * spec.slides_per_class as f64).round() as usize;
    let mut slides = Vec::with_capacity(spec.num_classes * spec.slides_per_class);
    for s in 0..spec.slides_per_class {
        for c in 0..spec.num_classes {
            let n = rng.gen_range(spec.tiles_min..=spec.tiles_max);
            let n_signal = (spec.signal_fraction * n as f64 - 1e-9).ceil() as usize;
            let mut is_signal: Vec<bool> = (0..n).map(|i| i < n_signal).collect();
            is_signal.shuffle(&mut rng);
            let tiles = is_signal
                .iter()
                .map(|&sig| {
                    (0..spec.input_dim)
                        .map(|j| {
                            let mean = if sig { tile_dirs[c][j] } else { 0.0 };
                            let z: f64 = rng.sample(StandardNormal);
                            (mean + spec.noise_scale * z) as f32
                        })
                        .collect()
                })
                .collect();
            let report = (s < n_reported).then(|| {
                let v: Vec<f64> = report_dirs[c]
                    .iter()
                    .map(|&m| m + spec.report_noise * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| (x / norm) as f32).collect()
            });
            slides.push(SlideRecord {
                slide_id: format!("syn-{:04}", slides.len()),
                label: c,
                tiles,
                report,
            });
        }
    }
    Dataset::new(spec.input_dim, spec.num_classes, Some(spec.report_dim), slides)
}
