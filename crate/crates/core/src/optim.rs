//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::param::Param;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Moments and step counts, one entry per parameter in model order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(params: &[&Param]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            steps: vec![0; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// One update. Parameters with `requires_grad == false` are left alone,
    /// moments included; a missing gradient on a trainable one counts as
    /// zero.
    pub fn step(
        &mut self,
        config: &AdamConfig,
        params: &mut [&mut Param],
        grads: &[Option<Tensor>],
    ) -> Result<()> {
        if params.len() != self.len() || grads.len() != self.len() {
            return Err(Error::dim("adam step", &[self.len()], &[params.len(), grads.len()]));
        }
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            if self.m[i].shape() != p.value.shape() {
                return Err(Error::dim("adam moment", self.m[i].shape(), p.value.shape()));
            }
            if let Some(g) = &grads[i] {
                if g.shape() != p.value.shape() {
                    return Err(Error::dim("adam gradient", g.shape(), p.value.shape()));
                }
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - config.beta1.powi(t);
            let bc2 = 1.0 - config.beta2.powi(t);
            let wd = if p.decay { config.weight_decay } else { 0.0 };
            let grad = grads[i].as_ref().map(Tensor::data);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, theta) in p.value.data_mut().iter_mut().enumerate() {
                let gj = grad.map_or(0.0, |g| g[j]);
                m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
                v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta -= config.lr * (m_hat / (v_hat.sqrt() + config.eps) + wd * *theta);
            }
        }
        Ok(())
    }
}
