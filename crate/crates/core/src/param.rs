//! Named trainable tensors and the dense layer built from them.

use rand::Rng;

use crate::error::Result;
use crate::numeric::{Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub requires_grad: bool,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            requires_grad: true,
            decay: true,
        }
    }

    pub fn without_decay(mut self) -> Self {
        self.decay = false;
        self
    }

    pub fn bind(&self, g: &mut Graph) -> Result<NodeId> {
        g.leaf(self.value.clone(), self.requires_grad)
    }
}

/// Fan-based uniform initialization, `U(−s, s)` with
/// `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive fan sizes")
}

/// `y = x · W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), glorot_uniform(rng, fan_in, fan_out)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[fan_out]))),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BoundLinear> {
        Ok(BoundLinear {
            weight: self.weight.bind(g)?,
            bias: self.bias.as_ref().map(|b| b.bind(g)).transpose()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BoundLinear {
    pub weight: NodeId,
    pub bias: Option<NodeId>,
}

impl BoundLinear {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => g.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn ids(&self) -> Vec<NodeId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}
