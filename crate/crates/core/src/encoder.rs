//! Trainable tile encoder: an MLP from raw tile vectors to unit-norm
//! features, with a freeze switch for staged training.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{Graph, NodeId, Tensor, L2_EPS};
use crate::param::{BoundLinear, Linear, Param};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Linear,
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Linear => "linear",
        })
    }
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
            Activation::Linear => Ok(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dims: vec![64, 64],
            feature_dim: 16,
            activation: Activation::Gelu,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("encoder input_dim must be positive".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config("encoder feature_dim must be at least 2".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config(
                "encoder needs at least one positive hidden layer".into(),
            ));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.feature_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub layers: Vec<Linear>,
    frozen: bool,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(i, (a, b))| Linear::init(rng, &format!("encoder.{i}"), a, b, true))
            .collect();
        Ok(Self {
            config,
            layers,
            frozen: false,
        })
    }

    /// Builds from explicit layers; shapes must chain from `input_dim` to
    /// `feature_dim`.
    pub fn from_layers(config: EncoderConfig, layers: Vec<Linear>) -> Result<Self> {
        config.validate()?;
        let expected = config.layer_dims();
        let got: Vec<_> = layers.iter().map(|l| (l.fan_in(), l.fan_out())).collect();
        if expected != got {
            return Err(Error::Config(format!(
                "encoder layer shapes {got:?} do not chain as {expected:?}"
            )));
        }
        Ok(Self {
            config,
            layers,
            frozen: false,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Toggles `requires_grad` on every parameter; values are untouched.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        for p in self.params_mut() {
            p.requires_grad = !frozen;
        }
    }

    pub fn with_frozen(mut self, frozen: bool) -> Self {
        self.set_frozen(frozen);
        self
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Linear::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Linear::params_mut).collect()
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BoundEncoder> {
        Ok(BoundEncoder {
            layers: self
                .layers
                .iter()
                .map(|l| l.bind(g))
                .collect::<Result<_>>()?,
            activation: self.config.activation,
            input_dim: self.config.input_dim,
        })
    }

    /// Raw tile rows as a constant `n × input_dim` tensor.
    pub fn tiles_tensor<T: AsRef<[f32]>>(&self, tiles: &[T]) -> Result<Tensor> {
        let d = self.config.input_dim;
        let mut data = Vec::with_capacity(tiles.len() * d);
        for (i, t) in tiles.iter().enumerate() {
            let t = t.as_ref();
            if t.len() != d {
                return Err(Error::Config(format!(
                    "tile {i} has length {}, encoder expects {d}",
                    t.len()
                )));
            }
            if let Some(bad) = t.iter().position(|v| !v.is_finite()) {
                return Err(Error::Input(format!("tile {i} has non-finite entry {bad}")));
            }
            data.extend(t.iter().map(|&v| f64::from(v)));
        }
        Tensor::new(vec![tiles.len(), d], data)
    }

    /// Encodes tiles outside any training graph.
    pub fn encode_batch<T: AsRef<[f32]>>(&self, tiles: &[T]) -> Result<Vec<Vec<f64>>> {
        if tiles.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let enc = self.bind_frozen(&mut g)?;
        let x = g.constant(self.tiles_tensor(tiles)?)?;
        let f = enc.forward(&mut g, x)?;
        let v = g.value(f);
        Ok((0..tiles.len()).map(|i| v.row(i).to_vec()).collect())
    }

    pub fn encode(&self, tile: &[f32]) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[tile])?.remove(0))
    }

    fn bind_frozen(&self, g: &mut Graph) -> Result<BoundEncoder> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(BoundLinear {
                    weight: g.constant(l.weight.value.clone())?,
                    bias: l
                        .bias
                        .as_ref()
                        .map(|b| g.constant(b.value.clone()))
                        .transpose()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(BoundEncoder {
            layers,
            activation: self.config.activation,
            input_dim: self.config.input_dim,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub layers: Vec<BoundLinear>,
    activation: Activation,
    input_dim: usize,
}

impl BoundEncoder {
    /// `n × input_dim` tiles to `n × feature_dim` row-normalized features.
    pub fn forward(&self, g: &mut Graph, tiles: NodeId) -> Result<NodeId> {
        let (_, c) = g.value(tiles).dims2();
        if c != self.input_dim {
            return Err(Error::Config(format!(
                "tile width {c} does not match encoder input_dim {}",
                self.input_dim
            )));
        }
        let mut h = tiles;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i < last {
                h = self.activation.apply(g, h)?;
            }
        }
        g.l2_normalize_rows(h, L2_EPS)
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(BoundLinear::ids).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tile(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn output_is_unit_norm_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = EncoderParams::init(EncoderConfig::default(), &mut rng).unwrap();
        let tile = random_tile(&mut rng, 32);
        let a = enc.encode(&tile).unwrap();
        let b = enc.encode(&tile).unwrap();
        assert_eq!(a, b);
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_final_layer_hits_degenerate_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut enc = EncoderParams::init(EncoderConfig::default(), &mut rng).unwrap();
        let last = enc.layers.last_mut().unwrap();
        last.weight.value = Tensor::zeros(last.weight.value.shape());
        let f = enc.encode(&random_tile(&mut rng, 32)).unwrap();
        assert!(f.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_layers_reduce_to_normalization() {
        let n = 4;
        let config = EncoderConfig {
            input_dim: n,
            hidden_dims: vec![n],
            feature_dim: n,
            activation: Activation::Linear,
        };
        let eye = || Linear {
            weight: Param::new("w", Tensor::identity(n)),
            bias: None,
        };
        let enc = EncoderParams::from_layers(config, vec![eye(), eye()]).unwrap();
        let tile = [3.0f32, 0.0, 4.0, 0.0];
        assert_eq!(enc.encode(&tile).unwrap(), vec![0.6, 0.0, 0.8, 0.0]);
    }

    #[test]
    fn batched_equals_individual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = EncoderParams::init(EncoderConfig::default(), &mut rng).unwrap();
        let tiles: Vec<Vec<f32>> = (0..7).map(|_| random_tile(&mut rng, 32)).collect();
        let batched = enc.encode_batch(&tiles).unwrap();
        for (t, b) in tiles.iter().zip(&batched) {
            assert_eq!(&enc.encode(t).unwrap(), b);
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = EncoderParams::init(EncoderConfig::default(), &mut rng).unwrap();
        assert!(matches!(enc.encode(&[1.0; 31]), Err(Error::Config(_))));
    }

    #[test]
    fn freeze_is_idempotent_and_value_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = EncoderParams::init(EncoderConfig::default(), &mut rng).unwrap();
        let once = enc.clone().with_frozen(true);
        let twice = once.clone().with_frozen(true);
        assert_eq!(once, twice);
        assert!(once.params().iter().all(|p| !p.requires_grad));
        for (a, b) in enc.params().iter().zip(once.params()) {
            assert_eq!(a.value, b.value);
        }
        let thawed = once.with_frozen(false);
        assert!(thawed.params().iter().all(|p| p.requires_grad));
    }

    #[test]
    fn frozen_encoder_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = EncoderParams::init(EncoderConfig::default(), &mut rng)
            .unwrap()
            .with_frozen(true);
        let mut g = Graph::new();
        let b = enc.bind(&mut g).unwrap();
        let x = g.constant(enc.tiles_tensor(&[random_tile(&mut rng, 32)]).unwrap()).unwrap();
        let f = b.forward(&mut g, x).unwrap();
        let s = g.sum(f).unwrap();
        assert!(!g.requires_grad(s));
    }

    #[test]
    fn validates_config() {
        let bad = EncoderConfig {
            hidden_dims: vec![],
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            feature_dim: 1,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
