use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::substrate::{Graph, Tensor, Var};

use super::config::ModelConfig;

const PER_LAYER: usize = 12;
const GLOBAL_HEAD: usize = 5;

/// Role of a tensor inside one transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerParam {
    Ln1Gain = 0,
    Ln1Bias,
    Qkv,
    QkvBias,
    Out,
    OutBias,
    Ln2Gain,
    Ln2Bias,
    Ff1,
    Ff1Bias,
    Ff2,
    Ff2Bias,
}

const LAYER_NAMES: [&str; PER_LAYER] = [
    "ln1.gain", "ln1.bias", "attn.qkv", "attn.qkv_bias", "attn.out", "attn.out_bias",
    "ln2.gain", "ln2.bias", "ff.w1", "ff.b1", "ff.w2", "ff.b2",
];

/// Ordered `(name, shape)` list of every parameter tensor.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut specs = vec![
        ("tok_embed".to_string(), vec![cfg.vocab_size, d]),
        ("pos_embed".to_string(), vec![cfg.max_seq, d]),
        ("patch.digit".to_string(), vec![cfg.n_digits, d]),
        ("patch.marker".to_string(), vec![cfg.n_markers, d]),
        ("patch.pos".to_string(), vec![cfg.n_patches, d]),
    ];
    for l in 0..cfg.n_layers {
        let shapes = [
            vec![d],
            vec![d],
            vec![d, 3 * d],
            vec![3 * d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, cfg.d_ff],
            vec![cfg.d_ff],
            vec![cfg.d_ff, d],
            vec![d],
        ];
        for (name, shape) in LAYER_NAMES.iter().zip(shapes) {
            specs.push((format!("layers.{l}.{name}"), shape));
        }
    }
    specs.push(("ln_f.gain".to_string(), vec![d]));
    specs.push(("ln_f.bias".to_string(), vec![d]));
    specs.push(("head".to_string(), vec![cfg.vocab_size, d]));
    specs
}

fn is_gain(name: &str) -> bool {
    name.ends_with(".gain")
}

fn is_zero_init(name: &str) -> bool {
    name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2")
}

/// All learnable tensors, in [`param_specs`] order.
#[derive(Clone, Debug)]
pub struct Params<S> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<S>>>,
}

impl<S: Scalar> PartialEq for Params<S> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape() && bitwise_eq(a.data(), b.data()))
    }
}

fn bitwise_eq<S: Scalar>(a: &[S], b: &[S]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.widen().to_bits() == y.widen().to_bits())
}

impl<S: Scalar> Params<S> {
    /// Seeded initialization: normal(0, init_std) for weights and tables,
    /// ones for norm gains, zeros for biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| Error::Config(format!("init_std: {e}")))?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in param_specs(config) {
            let t = if is_gain(&name) {
                Tensor::from_fn(shape, |_| S::one())
            } else if is_zero_init(&name) {
                Tensor::zeros(shape)
            } else {
                Tensor::from_fn(shape, |_| S::narrow(normal.sample(&mut rng)))
            };
            names.push(name);
            tensors.push(Arc::new(t));
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Assembles parameters from named tensors, checking order and shapes.
    pub fn from_tensors(config: &ModelConfig, named: Vec<(String, Tensor<S>)>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(config);
        if specs.len() != named.len() {
            return Err(dim_err!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                named.len()
            ));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((want_name, want_shape), (name, t)) in specs.into_iter().zip(named) {
            if want_name != name || want_shape != t.shape() {
                return Err(dim_err!(
                    "parameter {name} {:?} does not match expected {want_name} {want_shape:?}",
                    t.shape()
                ));
            }
            names.push(name);
            tensors.push(Arc::new(t));
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, i: usize) -> &Tensor<S> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<S> {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| &**t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// Element type conversion, e.g. to run a 64-bit gradient check on 32-bit weights.
    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
        }
    }

    /// Registers every tensor as a leaf of `g` without copying.
    pub fn bind(&self, g: &mut Graph<S>, requires_grad: bool) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|t| g.leaf_shared(Arc::clone(t), requires_grad))
                .collect(),
        }
    }
}

/// Graph handles for a bound [`Params`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    pub fn tok_embed(&self) -> Var {
        self.vars[0]
    }

    pub fn pos_embed(&self) -> Var {
        self.vars[1]
    }

    pub fn patch_digit(&self) -> Var {
        self.vars[2]
    }

    pub fn patch_marker(&self) -> Var {
        self.vars[3]
    }

    pub fn patch_pos(&self) -> Var {
        self.vars[4]
    }

    pub fn layer(&self, layer: usize, p: LayerParam) -> Var {
        self.vars[GLOBAL_HEAD + layer * PER_LAYER + p as usize]
    }

    pub fn final_gain(&self) -> Var {
        self.vars[self.vars.len() - 3]
    }

    pub fn final_bias(&self) -> Var {
        self.vars[self.vars.len() - 2]
    }

    pub fn head(&self) -> Var {
        self.vars[self.vars.len() - 1]
    }
}
