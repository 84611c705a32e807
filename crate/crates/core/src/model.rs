//! The full trainable model and its batch objective.
//!
//! Training runs each slide in its own graph (optionally in parallel) and
//! joins them in a small batch graph holding the losses; gradients flow
//! back into every slide graph through seeded backward passes and are summed
//! in slide order. [`Model::batch_loss_joint`] builds the same objective as
//! one graph.

use rand::Rng;

use crate::codebook::Codebook;
use crate::contrastive::{batch_contrastive, BoundTemperatures, TemperaturePair, UnreportedPolicy};
use crate::encoder::{BoundEncoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::head::{BoundHead, HeadConfig, SlideHead};
use crate::numeric::{Gradients, Graph, NodeId, Tensor};
use crate::par::{self, Exec};
use crate::param::Param;
use crate::vlad::{encode_slide_graph, VladConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub head: SlideHead,
    pub temperatures: TemperaturePair,
    pub vlad: VladConfig,
}

/// One slide of a training batch: tiles to encode fresh, plus stale
/// features read from the bank.
#[derive(Clone, Debug)]
pub struct BatchSlide<'a> {
    pub label: usize,
    pub fresh_indices: Vec<u32>,
    pub fresh_tiles: Vec<&'a [f32]>,
    pub stale: Vec<(u32, &'a [f32])>,
    pub report: Option<&'a [f32]>,
}

/// Objective weights and options for a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    /// Weight λ on the contrastive term.
    pub lambda: f64,
    pub unreported: UnreportedPolicy,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            unreported: UnreportedPolicy::Exclude,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub total: f64,
    pub cls: f64,
    pub contrastive: f64,
    /// One entry per model parameter, in [`Model::params`] order.
    pub grads: Vec<Option<Tensor>>,
    /// Fresh features per slide, rows in `fresh_indices` order.
    pub fresh_features: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub head: BoundHead,
}

impl BoundModel {
    /// Ids of encoder and head parameters, in [`Model::params`] order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut v = self.encoder.ids();
        v.extend(self.head.ids());
        v
    }
}

/// Output nodes for one slide.
#[derive(Clone, Copy, Debug)]
pub struct SlideNodes {
    pub fresh: Option<NodeId>,
    pub tokens: NodeId,
    pub descriptor: NodeId,
    pub h: NodeId,
    pub h_proj: NodeId,
    pub logits: NodeId,
}

/// Inference outputs for one slide.
#[derive(Clone, Debug)]
pub struct SlideOutput {
    pub descriptor: Vec<f64>,
    pub h_proj: Vec<f64>,
    pub logits: Vec<f64>,
}

struct SlidePass {
    graph: Graph,
    bound: BoundModel,
    logits: NodeId,
    h_proj: NodeId,
    fresh: Vec<Vec<f64>>,
}

fn accumulate(into: &mut Option<Tensor>, g: &Tensor) {
    match into {
        Some(t) => t.add_assign(g),
        None => *into = Some(g.clone()),
    }
}

impl Model {
    pub fn init<R: Rng + ?Sized>(
        encoder: EncoderConfig,
        num_classes: usize,
        report_dim: usize,
        vlad: VladConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let head_cfg = HeadConfig::new(encoder.feature_dim, num_classes, report_dim);
        let encoder = EncoderParams::init(encoder, rng)?;
        let head = SlideHead::init(head_cfg, rng)?;
        Ok(Self {
            encoder,
            head,
            temperatures: TemperaturePair::default(),
            vlad,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.config.num_classes
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.encoder.params();
        v.extend(self.head.params());
        v.extend(self.temperatures.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        v.extend(self.head.params_mut());
        v.extend(self.temperatures.params_mut());
        v
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder.params().len()
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BoundModel> {
        Ok(BoundModel {
            encoder: self.encoder.bind(g)?,
            head: self.head.bind(g)?,
        })
    }

    /// Encoder, VLAD, head and classifier for one slide.
    pub fn slide_nodes(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        cb: &Codebook,
        fresh_indices: &[u32],
        fresh_tiles: &[&[f32]],
        stale: &[(u32, &[f32])],
    ) -> Result<SlideNodes> {
        cb.check_dim(self.encoder.config.feature_dim)?;
        let fresh = if fresh_tiles.is_empty() {
            None
        } else {
            let x = g.constant(self.encoder.tiles_tensor(fresh_tiles)?)?;
            Some(bound.encoder.forward(g, x)?)
        };
        let v = encode_slide_graph(g, cb, fresh_indices, fresh, stale, self.vlad)?;
        let emb = bound.head.enhance(g, v.tokens)?;
        let logits = bound.head.classify(g, emb.h)?;
        Ok(SlideNodes {
            fresh,
            tokens: v.tokens,
            descriptor: v.flat,
            h: emb.h,
            h_proj: emb.h_proj,
            logits,
        })
    }

    /// Classification plus weighted contrastive loss over per-slide rows.
    /// Returns `(total, cls, contrastive)` nodes.
    fn objective_nodes(
        g: &mut Graph,
        logits: &[NodeId],
        h_proj: &[NodeId],
        slides: &[BatchSlide<'_>],
        temps: &BoundTemperatures,
        objective: Objective,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let all = g.concat_rows(logits)?;
        let labels: Vec<usize> = slides.iter().map(|s| s.label).collect();
        let cls = g.cross_entropy(all, &labels)?;
        let reports: Vec<Option<&[f32]>> = slides.iter().map(|s| s.report).collect();
        let con = batch_contrastive(g, h_proj, &reports, temps, objective.unreported)?;
        let total = if objective.lambda == 0.0 {
            cls
        } else {
            let weighted = g.scale(con, objective.lambda)?;
            g.add(cls, weighted)?
        };
        Ok((total, cls, con))
    }

    fn slide_pass(&self, cb: &Codebook, s: &BatchSlide<'_>) -> Result<SlidePass> {
        if s.label >= self.num_classes() {
            return Err(Error::Input(format!("label {} out of range", s.label)));
        }
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph)?;
        let n = self.slide_nodes(&mut graph, &bound, cb, &s.fresh_indices, &s.fresh_tiles, &s.stale)?;
        let fresh = match n.fresh {
            Some(f) => {
                let t = graph.value(f);
                (0..t.dims2().0).map(|i| t.row(i).to_vec()).collect()
            }
            None => Vec::new(),
        };
        Ok(SlidePass {
            graph,
            bound,
            logits: n.logits,
            h_proj: n.h_proj,
            fresh,
        })
    }

    /// Loss and gradients with one graph per slide, slides run through
    /// `exec`. Results do not depend on `exec`.
    pub fn batch_loss(
        &self,
        cb: &Codebook,
        slides: &[BatchSlide<'_>],
        objective: Objective,
        exec: Exec,
    ) -> Result<BatchLoss> {
        if slides.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let passes = par::try_map(exec, slides, |s| self.slide_pass(cb, s))?;

        let mut g = Graph::new();
        let temps = self.temperatures.bind(&mut g)?;
        let mut logit_leaves = Vec::with_capacity(passes.len());
        let mut proj_leaves = Vec::with_capacity(passes.len());
        for p in &passes {
            logit_leaves.push(g.param(p.graph.value(p.logits).clone())?);
            proj_leaves.push(g.param(p.graph.value(p.h_proj).clone())?);
        }
        let (total, cls, con) =
            Self::objective_nodes(&mut g, &logit_leaves, &proj_leaves, slides, &temps, objective)?;
        let batch_grads = g.backward(total)?;

        let seeds: Vec<Vec<(NodeId, Tensor)>> = passes
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut s = Vec::new();
                if let Some(t) = batch_grads.get(logit_leaves[i]) {
                    s.push((p.logits, t.clone()));
                }
                if let Some(t) = batch_grads.get(proj_leaves[i]) {
                    s.push((p.h_proj, t.clone()));
                }
                s
            })
            .collect();
        let indices: Vec<usize> = (0..passes.len()).collect();
        let slide_grads: Vec<Gradients> =
            par::try_map(exec, &indices, |&i| passes[i].graph.backward_with_seeds(&seeds[i]))?;

        let n_params = self.params().len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n_params];
        for (p, sg) in passes.iter().zip(&slide_grads) {
            for (slot, id) in grads.iter_mut().zip(p.bound.ids()) {
                if let Some(t) = sg.get(id) {
                    accumulate(slot, t);
                }
            }
        }
        let temp_ids = temps.ids();
        for (slot, id) in grads[n_params - temp_ids.len()..].iter_mut().zip(temp_ids) {
            if let Some(t) = batch_grads.get(id) {
                accumulate(slot, t);
            }
        }
        Ok(BatchLoss {
            total: g.value(total).item(),
            cls: g.value(cls).item(),
            contrastive: g.value(con).item(),
            grads,
            fresh_features: passes.into_iter().map(|p| p.fresh).collect(),
        })
    }

    /// The same objective built as a single graph.
    pub fn batch_loss_joint(
        &self,
        cb: &Codebook,
        slides: &[BatchSlide<'_>],
        objective: Objective,
    ) -> Result<BatchLoss> {
        if slides.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let temps = self.temperatures.bind(&mut g)?;
        let mut logits = Vec::new();
        let mut projs = Vec::new();
        let mut fresh_nodes = Vec::new();
        for s in slides {
            let n = self.slide_nodes(&mut g, &bound, cb, &s.fresh_indices, &s.fresh_tiles, &s.stale)?;
            logits.push(n.logits);
            projs.push(n.h_proj);
            fresh_nodes.push(n.fresh);
        }
        let (total, cls, con) = Self::objective_nodes(&mut g, &logits, &projs, slides, &temps, objective)?;
        let gr = g.backward(total)?;
        let mut ids = bound.ids();
        ids.extend(temps.ids());
        let grads = ids.iter().map(|&id| gr.get(id).cloned()).collect();
        let fresh_features = fresh_nodes
            .iter()
            .map(|f| match f {
                Some(f) => {
                    let t = g.value(*f);
                    (0..t.dims2().0).map(|i| t.row(i).to_vec()).collect()
                }
                None => Vec::new(),
            })
            .collect();
        Ok(BatchLoss {
            total: g.value(total).item(),
            cls: g.value(cls).item(),
            contrastive: g.value(con).item(),
            grads,
            fresh_features,
        })
    }

    /// Encodes every tile fresh and runs the head; no bank involved.
    pub fn infer(&self, cb: &Codebook, tiles: &[Vec<f32>]) -> Result<SlideOutput> {
        if tiles.is_empty() {
            return Err(Error::Input("slide has no tiles".into()));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let indices: Vec<u32> = (0..tiles.len() as u32).collect();
        let refs: Vec<&[f32]> = tiles.iter().map(Vec::as_slice).collect();
        let n = self.slide_nodes(&mut g, &bound, cb, &indices, &refs, &[])?;
        Ok(SlideOutput {
            descriptor: g.value(n.descriptor).data().to_vec(),
            h_proj: g.value(n.h_proj).data().to_vec(),
            logits: g.value(n.logits).data().to_vec(),
        })
    }
}
