//! Frozen K-means codebook over bank features.
//!
//! Built once by Lloyd's algorithm with k-means++ seeding, then used only
//! for nearest-centroid lookup. Stored as `DRSC`: magic, `u32` format
//! version, `u32` d, `u64` k, `u32` iterations run, `f64` final inertia, then
//! `k × d` `f32` centroids and a trailing CRC-64/XZ.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"DRSC";
const CODEBOOK_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Relative inertia improvement below which iteration stops.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 64,
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    centroids: Vec<Vec<f32>>,
    dim: usize,
    iters_run: usize,
    final_inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid and its squared distance; ties go to the
/// lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations from the given seeds. Returns final centroids and the
/// inertia measured at each assignment step.
fn lloyd(
    points: &[Vec<f64>],
    mut centroids: Vec<Vec<f64>>,
    max_iters: usize,
    tol: f64,
    exec: Exec,
) -> (Vec<Vec<f64>>, Vec<f64>, usize) {
    let k = centroids.len();
    let d = points[0].len();
    let mut history: Vec<f64> = Vec::new();
    let mut iters = 0;
    for _ in 0..max_iters {
        iters += 1;
        let assigned = par::map(exec, points, |p| nearest(p, &centroids));
        let inertia: f64 = assigned.iter().map(|a| a.1).sum();
        if let Some(&prev) = history.last() {
            assert!(
                inertia <= prev + 1e-9 * prev.max(1.0),
                "k-means inertia increased: {prev} -> {inertia}"
            );
        }
        let converged = inertia == 0.0
            || history
                .last()
                .is_some_and(|&prev| (prev - inertia) <= tol * prev);
        history.push(inertia);
        if converged {
            break;
        }

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &(c, _)) in points.iter().zip(&assigned) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut dists: Vec<f64> = assigned.iter().map(|a| a.1).collect();
        for c in 0..k {
            if counts[c] == 0 {
                // farthest point from its centroid, lowest index on ties
                let mut far = 0;
                for (i, &dd) in dists.iter().enumerate() {
                    if dd > dists[far] {
                        far = i;
                    }
                }
                centroids[c] = points[far].clone();
                dists[far] = -1.0;
            } else {
                let inv = 1.0 / counts[c] as f64;
                centroids[c] = sums[c].iter().map(|s| s * inv).collect();
            }
        }
    }
    (centroids, history, iters)
}

impl Codebook {
    /// Builds a codebook over `features`.
    pub fn build<F: AsRef<[f32]>>(features: &[F], config: &KMeansConfig) -> Result<Self> {
        Self::build_traced(features, config, Exec::Sequential).map(|(cb, _)| cb)
    }

    /// Like [`Codebook::build`], also returning per-iteration inertia. The
    /// assignment step runs under `exec`; results do not depend on it.
    pub fn build_traced<F: AsRef<[f32]>>(
        features: &[F],
        config: &KMeansConfig,
        exec: Exec,
    ) -> Result<(Self, Vec<f64>)> {
        if config.k < 2 {
            return Err(Error::Config(format!("codebook k must be ≥ 2, got {}", config.k)));
        }
        if features.len() < config.k {
            return Err(Error::Config(format!(
                "k-means needs at least k = {} points, got {}",
                config.k,
                features.len()
            )));
        }
        let d = features[0].as_ref().len();
        let mut points = Vec::with_capacity(features.len());
        for f in features {
            let f = f.as_ref();
            if f.len() != d {
                return Err(Error::dim("codebook build", &[d], &[f.len()]));
            }
            points.push(f.iter().map(|&x| f64::from(x)).collect::<Vec<f64>>());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let seeds = kmeans_pp(&points, config.k, &mut rng);
        let (centroids, history, iters_run) =
            lloyd(&points, seeds, config.max_iters.max(1), config.tol, exec);
        let centroids: Vec<Vec<f32>> = centroids
            .iter()
            .map(|c| c.iter().map(|&x| x as f32).collect())
            .collect();
        if centroids.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Input("k-means produced a non-finite centroid".into()));
        }
        let mut cb = Self {
            centroids,
            dim: d,
            iters_run,
            final_inertia: 0.0,
        };
        let c64 = cb.centroids_f64();
        cb.final_inertia = points.iter().map(|p| nearest(p, &c64).1).sum();
        Ok((cb, history))
    }

    pub fn from_centroids(centroids: Vec<Vec<f32>>) -> Result<Self> {
        if centroids.len() < 2 {
            return Err(Error::Config("codebook needs at least 2 centroids".into()));
        }
        let dim = centroids[0].len();
        if dim == 0 {
            return Err(Error::Config("codebook centroid dimension is zero".into()));
        }
        if let Some(bad) = centroids.iter().find(|c| c.len() != dim) {
            return Err(Error::dim("codebook", &[dim], &[bad.len()]));
        }
        if centroids.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Input("non-finite centroid".into()));
        }
        Ok(Self {
            centroids,
            dim,
            iters_run: 0,
            final_inertia: f64::NAN,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn iters_run(&self) -> usize {
        self.iters_run
    }

    pub fn final_inertia(&self) -> f64 {
        self.final_inertia
    }

    pub fn centroid(&self, k: usize) -> &[f32] {
        &self.centroids[k]
    }

    pub fn centroids(&self) -> &[Vec<f32>] {
        &self.centroids
    }

    pub fn centroids_f64(&self) -> Vec<Vec<f64>> {
        self.centroids
            .iter()
            .map(|c| c.iter().map(|&x| f64::from(x)).collect())
            .collect()
    }

    /// Nearest centroid under Euclidean distance, lowest index on ties.
    pub fn assign(&self, f: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.centroids.iter().enumerate() {
            let d: f64 = f
                .iter()
                .zip(c)
                .map(|(x, &y)| {
                    let t = x - f64::from(y);
                    t * t
                })
                .sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    pub fn assign_f32(&self, f: &[f32]) -> usize {
        let f: Vec<f64> = f.iter().map(|&x| f64::from(x)).collect();
        self.assign(&f)
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim {
            return Err(Error::dim("codebook", &[self.dim], &[d]));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_magic(CODEBOOK_MAGIC);
        w.u32(CODEBOOK_FORMAT_VERSION);
        w.u32(self.dim as u32);
        w.u64(self.k() as u64);
        w.u32(self.iters_run as u32);
        w.f64(self.final_inertia);
        for c in &self.centroids {
            for &v in c {
                w.f32(v);
            }
        }
        w.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Reader::new(bytes).magic(CODEBOOK_MAGIC)?;
        let body = codec::verify_crc(bytes)?;
        let mut r = Reader::new(body);
        r.magic(CODEBOOK_MAGIC)?;
        let at = r.offset();
        let version = r.u32()?;
        if version != CODEBOOK_FORMAT_VERSION {
            return Err(Error::format(at, format!("unsupported format version {version}")));
        }
        let dim = r.u32()? as usize;
        let at = r.offset();
        let k = r.count(4 * dim.max(1))?;
        if k < 2 || dim == 0 {
            return Err(Error::format(at, format!("invalid codebook shape k={k}, d={dim}")));
        }
        let iters_run = r.u32()? as usize;
        let final_inertia = r.f64()?;
        let mut centroids = Vec::with_capacity(k);
        for _ in 0..k {
            let at = r.offset();
            let c = r.f32s(dim)?;
            if c.iter().any(|x| !x.is_finite()) {
                return Err(Error::format(at, "non-finite centroid"));
            }
            centroids.push(c);
        }
        if !r.at_end() {
            return Err(Error::format(r.offset(), "trailing bytes before checksum"));
        }
        Ok(Self {
            centroids,
            dim,
            iters_run,
            final_inertia,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }

    /// Loads and checks the centroid dimension against the bank's.
    pub fn load_expecting(path: &Path, feature_dim: usize) -> Result<Self> {
        let cb = Self::load(path)?;
        cb.check_dim(feature_dim)?;
        Ok(cb)
    }
}
