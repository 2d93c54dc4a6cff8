//! Layer stack with cached forward passes and reverse-mode backward.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activation::{prelu, prelu_backward, relu, relu_backward, ActivationKind};
use crate::conv::{conv2d_backward, conv2d_forward, ConvLayer};
use crate::dropout::{dropout, dropout_backward, DropoutMask};
use crate::error::{EngineError, Result};
use crate::norm::{batchnorm, batchnorm_backward, BatchNormCache, BatchNormStats, Mode};
use crate::param::Param;
use crate::pool::{maxpool2x2, maxpool2x2_backward, ArgmaxCache};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Layer<F> {
    Conv(ConvLayer<F>),
    MaxPool,
    Activation {
        kind: ActivationKind,
        /// Present only for PReLU.
        slopes: Option<Param<F>>,
    },
    BatchNorm {
        gamma: Param<F>,
        beta: Param<F>,
        stats: BatchNormStats<F>,
    },
    Dropout {
        rate: f64,
    },
}

impl<F: Scalar> Layer<F> {
    pub fn activation(kind: ActivationKind, maps: usize) -> Self {
        let slopes = (kind == ActivationKind::Prelu).then(|| Param::filled(vec![maps], F::of(0.25)));
        Layer::Activation { kind, slopes }
    }

    pub fn batchnorm(maps: usize) -> Self {
        Layer::BatchNorm {
            gamma: Param::filled(vec![maps], F::one()),
            beta: Param::filled(vec![maps], F::zero()),
            stats: BatchNormStats::new(maps),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::MaxPool => "pool",
            Layer::Activation { .. } => "act",
            Layer::BatchNorm { .. } => "bn",
            Layer::Dropout { .. } => "dropout",
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Activation { slopes: Some(s), .. } => vec![s],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    /// Named tensors that make up this layer's persistent state.
    fn state(&self) -> Vec<(&'static str, &[usize], &[F])> {
        match self {
            Layer::Conv(c) => vec![
                ("weight", &c.weight.dims, &c.weight.value),
                ("bias", &c.bias.dims, &c.bias.value),
            ],
            Layer::Activation { slopes: Some(s), .. } => vec![("slope", &s.dims, &s.value)],
            Layer::BatchNorm { gamma, beta, stats } => vec![
                ("gamma", &gamma.dims, &gamma.value),
                ("beta", &beta.dims, &beta.value),
                ("running_mean", &gamma.dims, &stats.running_mean),
                ("running_var", &gamma.dims, &stats.running_var),
            ],
            _ => Vec::new(),
        }
    }

    fn state_mut(&mut self, key: &str) -> Option<&mut Vec<F>> {
        match (self, key) {
            (Layer::Conv(c), "weight") => Some(&mut c.weight.value),
            (Layer::Conv(c), "bias") => Some(&mut c.bias.value),
            (Layer::Activation { slopes: Some(s), .. }, "slope") => Some(&mut s.value),
            (Layer::BatchNorm { gamma, .. }, "gamma") => Some(&mut gamma.value),
            (Layer::BatchNorm { beta, .. }, "beta") => Some(&mut beta.value),
            (Layer::BatchNorm { stats, .. }, "running_mean") => Some(&mut stats.running_mean),
            (Layer::BatchNorm { stats, .. }, "running_var") => Some(&mut stats.running_var),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
enum Cache<F> {
    Input(Tensor<F>),
    Pool(ArgmaxCache),
    BatchNorm(BatchNormCache<F>),
    Dropout(Option<DropoutMask<F>>),
}

#[derive(Clone, Debug)]
struct Node<F> {
    name: String,
    layer: Layer<F>,
    cache: Option<Cache<F>>,
}

/// An ordered stack of layers sharing one dropout RNG stream.
#[derive(Clone, Debug)]
pub struct Sequential<F> {
    nodes: Vec<Node<F>>,
    rng: ChaCha8Rng,
}

/// One named tensor of persistent network state.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<F> {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<F>,
}

impl<F: Scalar> Sequential<F> {
    pub fn new(dropout_seed: u64) -> Self {
        Sequential {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
        }
    }

    pub fn push(&mut self, layer: Layer<F>) {
        let name = format!("l{:02}.{}", self.nodes.len(), layer.kind_name());
        self.nodes.push(Node { name, layer, cache: None });
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer<F>> {
        self.nodes.iter().map(|n| &n.layer)
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Layer<F> {
        &mut self.nodes[i].layer
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Inference-mode forward pass; touches no caches or statistics.
    pub fn predict(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut cur = x.clone();
        for node in &self.nodes {
            cur = match &node.layer {
                Layer::Conv(c) => conv2d_forward(&cur, c)?,
                Layer::MaxPool => maxpool2x2(&cur).0,
                Layer::Activation { kind, slopes } => apply_activation(*kind, slopes.as_ref(), &cur)?,
                Layer::BatchNorm { gamma, beta, stats } => {
                    let mut frozen = stats.clone();
                    batchnorm(&cur, &gamma.value, &beta.value, &mut frozen, Mode::Infer)?.0
                }
                Layer::Dropout { .. } => cur,
            };
        }
        Ok(cur)
    }

    /// Forward pass that caches what backward needs.
    pub fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        let mut cur = x.clone();
        for node in &mut self.nodes {
            let (out, cache) = match &mut node.layer {
                Layer::Conv(c) => (conv2d_forward(&cur, c)?, Cache::Input(cur)),
                Layer::MaxPool => {
                    let (out, arg) = maxpool2x2(&cur);
                    (out, Cache::Pool(arg))
                }
                Layer::Activation { kind, slopes } => {
                    (apply_activation(*kind, slopes.as_ref(), &cur)?, Cache::Input(cur))
                }
                Layer::BatchNorm { gamma, beta, stats } => {
                    let (out, c) = batchnorm(&cur, &gamma.value, &beta.value, stats, mode)?;
                    (out, Cache::BatchNorm(c))
                }
                Layer::Dropout { rate } => {
                    let (out, mask) = dropout(&cur, *rate, &mut self.rng, mode)?;
                    (out, Cache::Dropout(mask))
                }
            };
            node.cache = Some(cache);
            cur = out;
        }
        Ok(cur)
    }

    /// Backpropagates `grad` through the cached pass, accumulating parameter
    /// gradients. Returns the input gradient when `need_input` is set.
    pub fn backward(&mut self, grad: &Tensor<F>, need_input: bool) -> Result<Option<Tensor<F>>> {
        let mut cur = grad.clone();
        for (i, node) in self.nodes.iter_mut().enumerate().rev() {
            let first = i == 0;
            let cache = node.cache.take().ok_or(EngineError::MissingCache { op: "sequential" })?;
            cur = match (&mut node.layer, cache) {
                (Layer::Conv(c), Cache::Input(input)) => {
                    let g = conv2d_backward(&cur, &input, c, need_input || !first)?;
                    accumulate(&mut c.weight.grad, &g.kernels);
                    accumulate(&mut c.bias.grad, &g.bias);
                    match g.input {
                        Some(t) => t,
                        None => return Ok(None),
                    }
                }
                (Layer::MaxPool, Cache::Pool(arg)) => maxpool2x2_backward(&cur, &arg)?,
                (Layer::Activation { kind, slopes }, Cache::Input(input)) => match kind {
                    ActivationKind::Identity => cur,
                    ActivationKind::Relu => relu_backward(&cur, &input),
                    ActivationKind::Prelu => {
                        let s = slopes.as_mut().expect("prelu layer has slopes");
                        let (gx, ga) = prelu_backward(&cur, &input, &s.value)?;
                        accumulate(&mut s.grad, &ga);
                        gx
                    }
                },
                (Layer::BatchNorm { gamma, beta, .. }, Cache::BatchNorm(c)) => {
                    let (gx, gg, gb) = batchnorm_backward(&cur, &gamma.value, &c)?;
                    accumulate(&mut gamma.grad, &gg);
                    accumulate(&mut beta.grad, &gb);
                    gx
                }
                (Layer::Dropout { .. }, Cache::Dropout(mask)) => dropout_backward(&cur, mask.as_ref()),
                _ => unreachable!("cache variant always matches its layer"),
            };
        }
        Ok(Some(cur))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.nodes.iter_mut().flat_map(|n| n.layer.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.state().iter().filter(|t| !t.name.contains("running")).map(|t| t.values.len()).sum()
    }

    pub fn state(&self) -> Vec<NamedTensor<F>> {
        self.nodes
            .iter()
            .flat_map(|n| {
                n.layer.state().into_iter().map(|(key, dims, values)| NamedTensor {
                    name: format!("{}.{}", n.name, key),
                    dims: dims.to_vec(),
                    values: values.to_vec(),
                })
            })
            .collect()
    }

    /// Restores state produced by [`Sequential::state`]; every tensor must
    /// be present with the right length.
    pub fn load_state(&mut self, tensors: &[NamedTensor<F>]) -> Result<()> {
        let expected = self.state();
        if expected.len() != tensors.len() {
            return Err(EngineError::Checkpoint(format!(
                "network has {} state tensors, checkpoint has {}",
                expected.len(),
                tensors.len()
            )));
        }
        for t in tensors {
            let (node_name, key) = t
                .name
                .rsplit_once('.')
                .ok_or_else(|| EngineError::Checkpoint(format!("bad tensor name {}", t.name)))?;
            let node = self
                .nodes
                .iter_mut()
                .find(|n| n.name == node_name)
                .ok_or_else(|| EngineError::Checkpoint(format!("no layer named {node_name}")))?;
            let dst = node
                .layer
                .state_mut(key)
                .ok_or_else(|| EngineError::Checkpoint(format!("layer {node_name} has no {key}")))?;
            if dst.len() != t.values.len() {
                return Err(EngineError::Checkpoint(format!(
                    "{}: expected {} values, got {}",
                    t.name,
                    dst.len(),
                    t.values.len()
                )));
            }
            dst.copy_from_slice(&t.values);
        }
        Ok(())
    }
}

fn apply_activation<F: Scalar>(kind: ActivationKind, slopes: Option<&Param<F>>, x: &Tensor<F>) -> Result<Tensor<F>> {
    match kind {
        ActivationKind::Identity => Ok(x.clone()),
        ActivationKind::Relu => Ok(relu(x)),
        ActivationKind::Prelu => prelu(x, &slopes.expect("prelu layer has slopes").value),
    }
}

fn accumulate<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
