//! Bidirectional slide/report contrastive loss with two learnable
//! temperatures stored in log space.

use std::path::Path;
use std::str::FromStr;

use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::numeric::{Graph, NodeId, Tensor};
use crate::param::Param;

pub const REPORT_MAGIC: &[u8; 4] = b"DRST";

/// Allowed deviation of a stored report embedding from unit norm.
pub const REPORT_NORM_TOL: f64 = 1e-6;

/// Initial value of both temperatures, `exp(ln(1/0.07))`.
pub const INITIAL_TEMPERATURE: f64 = 1.0 / 0.07;

#[derive(Clone, Debug, PartialEq)]
pub struct TemperaturePair {
    pub log_sigma1: Param,
    pub log_sigma2: Param,
}

impl Default for TemperaturePair {
    fn default() -> Self {
        Self::new(INITIAL_TEMPERATURE, INITIAL_TEMPERATURE)
    }
}

impl TemperaturePair {
    pub fn new(sigma1: f64, sigma2: f64) -> Self {
        Self {
            log_sigma1: Param::new("temperature.log_sigma1", Tensor::scalar(sigma1.ln()))
                .without_decay(),
            log_sigma2: Param::new("temperature.log_sigma2", Tensor::scalar(sigma2.ln()))
                .without_decay(),
        }
    }

    pub fn sigma1(&self) -> f64 {
        self.log_sigma1.value.item().exp()
    }

    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.value.item().exp()
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.log_sigma1, &self.log_sigma2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.log_sigma1, &mut self.log_sigma2]
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BoundTemperatures> {
        let log_sigma1 = self.log_sigma1.bind(g)?;
        let log_sigma2 = self.log_sigma2.bind(g)?;
        let sigma1 = g.exp(log_sigma1)?;
        let sigma2 = g.exp(log_sigma2)?;
        Ok(BoundTemperatures {
            log_sigma1,
            log_sigma2,
            sigma1,
            sigma2,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundTemperatures {
    pub log_sigma1: NodeId,
    pub log_sigma2: NodeId,
    pub sigma1: NodeId,
    pub sigma2: NodeId,
}

impl BoundTemperatures {
    pub fn ids(&self) -> Vec<NodeId> {
        vec![self.log_sigma1, self.log_sigma2]
    }
}

/// How slides without a report take part in a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UnreportedPolicy {
    /// Dropped from both directions.
    #[default]
    Exclude,
    /// Not an anchor, but still a negative slide for report anchors.
    AsNegatives,
}

impl FromStr for UnreportedPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclude" => Ok(Self::Exclude),
            "negatives" => Ok(Self::AsNegatives),
            other => Err(Error::Config(format!("unknown unreported policy `{other}`"))),
        }
    }
}

impl std::fmt::Display for UnreportedPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Exclude => "exclude",
            Self::AsNegatives => "negatives",
        })
    }
}

/// `S_str = σ1 · V Tᵀ` and `S_rts = σ2 · T Vᵀ`, both `N × N`.
pub fn similarity_matrices(
    g: &mut Graph,
    slides: NodeId,
    reports: NodeId,
    temps: &BoundTemperatures,
) -> Result<(NodeId, NodeId)> {
    if g.shape(slides) != g.shape(reports) || g.shape(slides).len() != 2 {
        return Err(Error::dim("similarity", g.shape(slides), g.shape(reports)));
    }
    let rt = g.transpose(reports)?;
    let vt = g.transpose(slides)?;
    let vtt = g.matmul(slides, rt)?;
    let tvt = g.matmul(reports, vt)?;
    let s_str = g.scale_by(vtt, temps.sigma1)?;
    let s_rts = g.scale_by(tvt, temps.sigma2)?;
    Ok((s_str, s_rts))
}

fn select_cols(g: &mut Graph, m: NodeId, cols: &[usize]) -> Result<NodeId> {
    let t = g.transpose(m)?;
    let s = g.select_rows(t, cols)?;
    g.transpose(s)
}

/// `(L_str + L_rts) / 2` over the rows with `mask[i]` set, each direction a
/// mean cross-entropy against the diagonal. Returns a constant zero when no
/// row is masked in.
pub fn contrastive_loss(
    g: &mut Graph,
    s_str: NodeId,
    s_rts: NodeId,
    mask: &[bool],
    policy: UnreportedPolicy,
) -> Result<NodeId> {
    let n = mask.len();
    for s in [s_str, s_rts] {
        if g.shape(s) != [n, n] {
            return Err(Error::dim("contrastive_loss", g.shape(s), &[n, n]));
        }
    }
    let kept: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if kept.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let targets: Vec<usize> = (0..kept.len()).collect();

    // slide anchors score only real report columns
    let rows = g.select_rows(s_str, &kept)?;
    let str_logits = select_cols(g, rows, &kept)?;
    let l_str = g.cross_entropy(str_logits, &targets)?;

    let rows = g.select_rows(s_rts, &kept)?;
    let (rts_logits, rts_targets) = match policy {
        UnreportedPolicy::Exclude => (select_cols(g, rows, &kept)?, targets),
        UnreportedPolicy::AsNegatives => (rows, kept.clone()),
    };
    let l_rts = g.cross_entropy(rts_logits, &rts_targets)?;

    let total = g.add(l_str, l_rts)?;
    g.scale(total, 0.5)
}

/// Contrastive loss over a batch of projected slide embeddings (`1 × t`
/// nodes) and optional report vectors.
pub fn batch_contrastive(
    g: &mut Graph,
    slide_rows: &[NodeId],
    reports: &[Option<&[f32]>],
    temps: &BoundTemperatures,
    policy: UnreportedPolicy,
) -> Result<NodeId> {
    if slide_rows.len() != reports.len() {
        return Err(Error::dim("batch_contrastive", &[slide_rows.len()], &[reports.len()]));
    }
    let mask: Vec<bool> = reports.iter().map(Option::is_some).collect();
    if !mask.iter().any(|&m| m) {
        return g.constant(Tensor::scalar(0.0));
    }
    let v = g.concat_rows(slide_rows)?;
    let t_dim = g.value(v).dims2().1;
    let mut data = Vec::with_capacity(reports.len() * t_dim);
    for r in reports {
        match r {
            Some(r) => {
                if r.len() != t_dim {
                    return Err(Error::dim("report embedding", &[t_dim], &[r.len()]));
                }
                data.extend(r.iter().map(|&x| f64::from(x)));
            }
            None => data.extend(std::iter::repeat_n(0.0, t_dim)),
        }
    }
    let t = g.constant(Tensor::new(vec![reports.len(), t_dim], data)?)?;
    let (s_str, s_rts) = similarity_matrices(g, v, t, temps)?;
    contrastive_loss(g, s_str, s_rts, &mask, policy)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRecord {
    /// Byte offset of the record within its file.
    pub offset: u64,
    pub slide_id: String,
    pub embedding: Vec<f32>,
}

/// Contents of a report embedding file.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFile {
    pub t_dim: usize,
    pub records: Vec<ReportRecord>,
}

impl ReportFile {
    /// Serializes `(slide_id, embedding)` pairs, filling in record offsets.
    pub fn build(t_dim: usize, items: Vec<(String, Vec<f32>)>) -> Result<(Self, Vec<u8>)> {
        if t_dim == 0 {
            return Err(Error::Config("report dimension must be positive".into()));
        }
        let mut w = Writer::with_magic(REPORT_MAGIC);
        w.u32(t_dim as u32);
        w.u64(items.len() as u64);
        let mut records = Vec::with_capacity(items.len());
        for (slide_id, embedding) in items {
            if embedding.len() != t_dim {
                return Err(Error::dim("report embedding", &[t_dim], &[embedding.len()]));
            }
            check_unit(&slide_id, &embedding)?;
            let offset = w.len() as u64;
            w.str(&slide_id);
            for &x in &embedding {
                w.f32(x);
            }
            records.push(ReportRecord {
                offset,
                slide_id,
                embedding,
            });
        }
        Ok((Self { t_dim, records }, w.into_bytes()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(REPORT_MAGIC)?;
        let t_dim = r.u32()? as usize;
        if t_dim == 0 {
            return Err(Error::format(4, "report dimension is zero"));
        }
        let n = r.count(4 + 4 * t_dim)?;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let offset = r.offset();
            let slide_id = r.str()?;
            let embedding = r.f32s(t_dim)?;
            check_unit(&slide_id, &embedding).map_err(|e| Error::format(offset, e.to_string()))?;
            records.push(ReportRecord {
                offset,
                slide_id,
                embedding,
            });
        }
        if !r.at_end() {
            return Err(Error::format(r.offset(), "trailing bytes after last record"));
        }
        Ok(Self { t_dim, records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }

    pub fn at_offset(&self, offset: u64) -> Option<&ReportRecord> {
        self.records
            .binary_search_by_key(&offset, |r| r.offset)
            .ok()
            .map(|i| &self.records[i])
    }
}

fn check_unit(slide_id: &str, v: &[f32]) -> Result<()> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > REPORT_NORM_TOL || !norm.is_finite() {
        return Err(Error::Input(format!(
            "report for `{slide_id}` has norm {norm}, expected 1"
        )));
    }
    Ok(())
}
