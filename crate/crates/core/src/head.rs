//! Slide head: one pre-norm transformer layer over the `K` cluster tokens,
//! mean pooling, a projection into report space and an MLP classifier.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{Graph, NodeId, Tensor, L2_EPS};
use crate::param::{BoundLinear, Linear, Param};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub feature_dim: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub classifier_hidden: usize,
    pub num_classes: usize,
    pub report_dim: usize,
}

impl HeadConfig {
    pub fn new(feature_dim: usize, num_classes: usize, report_dim: usize) -> Self {
        Self {
            feature_dim,
            heads: 1,
            ff_hidden: 2 * feature_dim,
            classifier_hidden: feature_dim,
            num_classes,
            report_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.ff_hidden == 0 || self.classifier_hidden == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        if self.heads == 0 || self.feature_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention heads {} must divide feature_dim {}",
                self.heads, self.feature_dim
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.report_dim == 0 {
            return Err(Error::Config("report_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideHead {
    pub config: HeadConfig,
    pub ln1_scale: Param,
    pub ln1_shift: Param,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2_scale: Param,
    pub ln2_shift: Param,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub proj: Linear,
    pub cls_hidden: Linear,
    pub cls_out: Linear,
}

impl SlideHead {
    pub fn init<R: Rng + ?Sized>(config: HeadConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim;
        Ok(Self {
            ln1_scale: Param::new("head.ln1.scale", Tensor::full(&[d], 1.0)),
            ln1_shift: Param::new("head.ln1.shift", Tensor::zeros(&[d])),
            query: Linear::init(rng, "head.attn.query", d, d, true),
            key: Linear::init(rng, "head.attn.key", d, d, true),
            value: Linear::init(rng, "head.attn.value", d, d, true),
            out: Linear::init(rng, "head.attn.out", d, d, true),
            ln2_scale: Param::new("head.ln2.scale", Tensor::full(&[d], 1.0)),
            ln2_shift: Param::new("head.ln2.shift", Tensor::zeros(&[d])),
            ff_in: Linear::init(rng, "head.ff.in", d, config.ff_hidden, true),
            ff_out: Linear::init(rng, "head.ff.out", config.ff_hidden, d, true),
            proj: Linear::init(rng, "head.proj", d, config.report_dim, false),
            cls_hidden: Linear::init(rng, "head.cls.hidden", d, config.classifier_hidden, true),
            cls_out: Linear::init(
                rng,
                "head.cls.out",
                config.classifier_hidden,
                config.num_classes,
                true,
            ),
            config,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.ln1_scale, &self.ln1_shift];
        for l in [&self.query, &self.key, &self.value, &self.out] {
            v.extend(l.params());
        }
        v.push(&self.ln2_scale);
        v.push(&self.ln2_shift);
        for l in [&self.ff_in, &self.ff_out, &self.proj, &self.cls_hidden, &self.cls_out] {
            v.extend(l.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.ln1_scale, &mut self.ln1_shift];
        for l in [&mut self.query, &mut self.key, &mut self.value, &mut self.out] {
            v.extend(l.params_mut());
        }
        v.push(&mut self.ln2_scale);
        v.push(&mut self.ln2_shift);
        for l in [
            &mut self.ff_in,
            &mut self.ff_out,
            &mut self.proj,
            &mut self.cls_hidden,
            &mut self.cls_out,
        ] {
            v.extend(l.params_mut());
        }
        v
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BoundHead> {
        Ok(BoundHead {
            ln1_scale: self.ln1_scale.bind(g)?,
            ln1_shift: self.ln1_shift.bind(g)?,
            query: self.query.bind(g)?,
            key: self.key.bind(g)?,
            value: self.value.bind(g)?,
            out: self.out.bind(g)?,
            ln2_scale: self.ln2_scale.bind(g)?,
            ln2_shift: self.ln2_shift.bind(g)?,
            ff_in: self.ff_in.bind(g)?,
            ff_out: self.ff_out.bind(g)?,
            proj: self.proj.bind(g)?,
            cls_hidden: self.cls_hidden.bind(g)?,
            cls_out: self.cls_out.bind(g)?,
            config: self.config.clone(),
        })
    }
}

/// Pooled slide embedding `h` (`1 × d`) and its unit-norm projection
/// (`1 × report_dim`).
#[derive(Clone, Copy, Debug)]
pub struct SlideEmbeddingNodes {
    pub h: NodeId,
    pub h_proj: NodeId,
}

#[derive(Clone, Debug)]
pub struct BoundHead {
    ln1_scale: NodeId,
    ln1_shift: NodeId,
    query: BoundLinear,
    key: BoundLinear,
    value: BoundLinear,
    out: BoundLinear,
    ln2_scale: NodeId,
    ln2_shift: NodeId,
    ff_in: BoundLinear,
    ff_out: BoundLinear,
    proj: BoundLinear,
    cls_hidden: BoundLinear,
    cls_out: BoundLinear,
    config: HeadConfig,
}

impl BoundHead {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut v = vec![self.ln1_scale, self.ln1_shift];
        for l in [&self.query, &self.key, &self.value, &self.out] {
            v.extend(l.ids());
        }
        v.push(self.ln2_scale);
        v.push(self.ln2_shift);
        for l in [&self.ff_in, &self.ff_out, &self.proj, &self.cls_hidden, &self.cls_out] {
            v.extend(l.ids());
        }
        v
    }

    fn norm(&self, g: &mut Graph, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let n = g.layer_norm(x)?;
        let n = g.mul_row(n, scale)?;
        g.add_row(n, shift)
    }

    fn attention(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let heads = self.config.heads;
        let dh = self.config.feature_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let p = g.softmax(scores)?;
            outs.push(g.matmul(p, vh)?);
        }
        let merged = if heads == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.out.forward(g, merged)
    }

    /// Transformer layer over `K × d` tokens, mean pooled, then projected.
    pub fn enhance(&self, g: &mut Graph, tokens: NodeId) -> Result<SlideEmbeddingNodes> {
        let (_, d) = g.value(tokens).dims2();
        if g.shape(tokens).len() != 2 || d != self.config.feature_dim {
            return Err(Error::Config(format!(
                "head expects K × {} tokens, got {:?}",
                self.config.feature_dim,
                g.shape(tokens)
            )));
        }
        let a = self.norm(g, tokens, self.ln1_scale, self.ln1_shift)?;
        let attn = self.attention(g, a)?;
        let x1 = g.add(tokens, attn)?;
        let b = self.norm(g, x1, self.ln2_scale, self.ln2_shift)?;
        let f = self.ff_in.forward(g, b)?;
        let f = g.gelu(f)?;
        let f = self.ff_out.forward(g, f)?;
        let x2 = g.add(x1, f)?;
        let pooled = g.mean_rows(x2)?;
        let h = g.reshape(pooled, &[1, d])?;
        let p = self.proj.forward(g, h)?;
        let h_proj = g.l2_normalize_rows(p, L2_EPS)?;
        Ok(SlideEmbeddingNodes { h, h_proj })
    }

    /// Raw logits, `1 × num_classes`.
    pub fn classify(&self, g: &mut Graph, h: NodeId) -> Result<NodeId> {
        let z = self.cls_hidden.forward(g, h)?;
        let z = g.gelu(z)?;
        self.cls_out.forward(g, z)
    }
}
