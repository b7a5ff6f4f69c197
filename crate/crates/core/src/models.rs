//! Model zoo with declared injection sites.
//!
//! A model is a sequence of blocks. Block `i` maps the representation `h_i`
//! to `h_{i+1}`; `h_0` is the input and the last block emits logits. Sites are
//! block boundaries, so a model with `L` blocks has candidate sites `0..L`.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{note_forward, NodeId, Tape};
use crate::error::{Result, SlatError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
}

impl std::str::FromStr for Activation {
    type Err = SlatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "softplus" => Ok(Activation::Softplus),
            other => Err(SlatError::InvalidArgument(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense { weight: usize, bias: usize },
    Conv { weight: usize, bias: usize },
    Act(Activation),
    MaxPool2,
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Latent representations captured at each injection site.
pub type LatentRecord = BTreeMap<usize, Tensor>;

/// Perturbations keyed by site id.
pub type Deltas = BTreeMap<usize, Tensor>;

#[derive(Clone, Debug)]
pub struct Model {
    name: String,
    input_shape: Vec<usize>,
    classes: usize,
    params: Vec<Param>,
    blocks: Vec<Vec<Layer>>,
    sites: BTreeSet<usize>,
    eta: BTreeMap<usize, f64>,
}

/// One recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    /// Leaf holding the network input (or the truncated-network input).
    pub input: NodeId,
    pub logits: NodeId,
    pub params: Vec<NodeId>,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    pub fn latents(&self) -> LatentRecord {
        self.tape
            .sites()
            .iter()
            .map(|(&k, &id)| (k, self.tape.value(id).clone()))
            .collect()
    }

    /// Summed cross-entropy over the batch.
    pub fn loss(&mut self, labels: &[usize]) -> Result<NodeId> {
        self.tape.softmax_xent(self.logits, labels)
    }

    /// Mean cross-entropy over the batch.
    pub fn mean_loss(&mut self, labels: &[usize]) -> Result<NodeId> {
        let sum = self.loss(labels)?;
        Ok(self.tape.scale(sum, 1.0 / labels.len() as f64))
    }

    pub fn param_grads(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|&p| {
                self.tape
                    .grad(p)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.tape.value(p).shape()))
            })
            .collect()
    }
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-a..a);
    }
    t
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
        }
    }

    fn add(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn dense(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Layer {
        let w = glorot(&mut self.rng, &[d_out, d_in], d_in, d_out);
        let weight = self.add(format!("{prefix}.weight"), w);
        let bias = self.add(format!("{prefix}.bias"), Tensor::zeros(&[d_out]));
        Layer::Dense { weight, bias }
    }

    fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) -> Layer {
        let w = glorot(&mut self.rng, &[c_out, c_in, k, k], c_in * k * k, c_out * k * k);
        let weight = self.add(format!("{prefix}.weight"), w);
        let bias = self.add(format!("{prefix}.bias"), Tensor::zeros(&[c_out]));
        Layer::Conv { weight, bias }
    }
}

/// Single dense layer `d_in -> classes` with `K = {0}`.
pub fn build_linear(d_in: usize, classes: usize, seed: u64) -> Result<Model> {
    if d_in == 0 || classes < 2 {
        return Err(SlatError::InvalidArgument(format!(
            "linear model needs d_in >= 1 and classes >= 2, got {d_in}, {classes}"
        )));
    }
    let mut b = Builder::new(seed);
    let layer = b.dense("fc", d_in, classes);
    Model::from_parts("linear", vec![d_in], classes, b.params, vec![vec![layer]], [0], 0.1)
}

/// Fully connected network with one activation after every hidden layer.
pub fn build_mlp(d_in: usize, hidden: &[usize], classes: usize, activation: Activation, seed: u64) -> Result<Model> {
    if d_in == 0 || classes < 2 || hidden.contains(&0) {
        return Err(SlatError::InvalidArgument("mlp widths must be positive".into()));
    }
    let mut b = Builder::new(seed);
    let mut blocks = Vec::new();
    let mut width = d_in;
    for (i, &h) in hidden.iter().enumerate() {
        blocks.push(vec![b.dense(&format!("fc{i}"), width, h), Layer::Act(activation)]);
        width = h;
    }
    blocks.push(vec![b.dense(&format!("fc{}", hidden.len()), width, classes)]);
    let sites: Vec<usize> = (0..blocks.len()).collect();
    Model::from_parts("mlp", vec![d_in], classes, b.params, blocks, sites, 0.1)
}

/// Two-layer network on 2-D inputs with `K = {0, 1}`.
pub fn build_toy_mlp(hidden: usize, activation: Activation, seed: u64) -> Result<Model> {
    let mut m = build_mlp(2, &[hidden], 2, activation, seed)?;
    m.name = "toy_mlp".into();
    Ok(m)
}

/// conv3x3x16-act-pool, conv3x3x32-act-pool, flatten, dense; `K = {0, 1, 2}`.
pub fn build_small_cnn(in_shape: &[usize], classes: usize, activation: Activation, seed: u64) -> Result<Model> {
    if in_shape.len() != 3 || in_shape[1] < 8 || in_shape[2] < 8 || in_shape[0] == 0 {
        return Err(SlatError::ShapeTooSmall(in_shape.to_vec()));
    }
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let mut b = Builder::new(seed);
    let blocks = vec![
        vec![b.conv("conv1", c, 16, 3), Layer::Act(activation), Layer::MaxPool2],
        vec![b.conv("conv2", 16, 32, 3), Layer::Act(activation), Layer::MaxPool2],
        vec![Layer::Flatten, b.dense("fc", 32 * (h / 4) * (w / 4), classes)],
    ];
    Model::from_parts("small_cnn", in_shape.to_vec(), classes, b.params, blocks, [0, 1, 2], 8.0 / 255.0)
}

impl Model {
    fn from_parts(
        name: &str,
        input_shape: Vec<usize>,
        classes: usize,
        params: Vec<Param>,
        blocks: Vec<Vec<Layer>>,
        sites: impl IntoIterator<Item = usize>,
        eta: f64,
    ) -> Result<Self> {
        let mut m = Model {
            name: name.to_string(),
            input_shape,
            classes,
            params,
            blocks,
            sites: BTreeSet::new(),
            eta: BTreeMap::new(),
        };
        m.set_sites(sites, eta)?;
        Ok(m)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Number of blocks `L`.
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Vec<Layer>] {
        &self.blocks
    }

    pub fn sites(&self) -> &BTreeSet<usize> {
        &self.sites
    }

    pub fn eta(&self) -> &BTreeMap<usize, f64> {
        &self.eta
    }

    /// Replaces the injection-site set with a uniform step size.
    pub fn set_sites(&mut self, sites: impl IntoIterator<Item = usize>, eta: f64) -> Result<()> {
        let sites: BTreeSet<usize> = sites.into_iter().collect();
        let map = sites.iter().map(|&k| (k, eta)).collect();
        self.sites = sites;
        self.set_eta(map)
    }

    pub fn set_eta(&mut self, eta: BTreeMap<usize, f64>) -> Result<()> {
        for &k in &self.sites {
            if k >= self.depth() {
                return Err(SlatError::UnknownSite(k));
            }
        }
        for (&k, &v) in &eta {
            if !self.sites.contains(&k) {
                return Err(SlatError::UnknownSite(k));
            }
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SlatError::InvalidArgument(format!("step size for site {k} must be >= 0, got {v}")));
            }
        }
        self.eta = eta;
        Ok(())
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// True when the model only uses ops with a differentiable backward.
    pub fn supports_double_backward(&self) -> bool {
        self.blocks.iter().flatten().all(|l| {
            matches!(l, Layer::Dense { .. } | Layer::Flatten | Layer::Act(Activation::Softplus))
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(SlatError::shape("model input", [&[0usize][..], &self.input_shape].concat(), x.shape()));
        }
        Ok(())
    }

    /// Forward pass recording latents at every site in `K` and adding `deltas[k]` to `h_k`.
    pub fn forward_with_latents(&self, x: &Tensor, deltas: Option<&Deltas>) -> Result<ForwardPass> {
        self.check_input(x)?;
        if let Some(d) = deltas {
            if let Some(&k) = d.keys().find(|k| !self.sites.contains(k)) {
                return Err(SlatError::UnknownSite(k));
            }
        }
        self.run_from(0, x, deltas)
    }

    /// Forward with perturbed latents; the spelled-out form of `forward_with_latents(x, Some(deltas))`.
    pub fn inject(&self, x: &Tensor, deltas: &Deltas) -> Result<ForwardPass> {
        self.forward_with_latents(x, Some(deltas))
    }

    /// Runs the truncated network `f_{k+1:L}` with `h_k` as its leaf input.
    pub fn forward_from(&self, k: usize, h: &Tensor) -> Result<ForwardPass> {
        if k >= self.depth() {
            return Err(SlatError::UnknownSite(k));
        }
        self.run_from(k, h, None)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let pass = self.forward_with_latents(x, None)?;
        Ok(pass.logits().clone())
    }

    fn run_from(&self, start: usize, x: &Tensor, deltas: Option<&Deltas>) -> Result<ForwardPass> {
        note_forward();
        let mut tape = Tape::new();
        let params: Vec<NodeId> = self.params.iter().map(|p| tape.var(p.value.clone())).collect();
        let input = tape.var(x.clone());
        let mut h = input;
        for (i, block) in self.blocks.iter().enumerate().skip(start) {
            if self.sites.contains(&i) {
                tape.register_site(i, h);
                if let Some(delta) = deltas.and_then(|d| d.get(&i)) {
                    if delta.shape() != tape.value(h).shape() {
                        return Err(SlatError::shape("inject", tape.value(h).shape(), delta.shape()));
                    }
                    let d = tape.constant(delta.clone());
                    h = tape.add(h, d)?;
                }
            }
            for layer in block {
                h = match *layer {
                    Layer::Dense { weight, bias } => tape.dense(h, params[weight], params[bias])?,
                    Layer::Conv { weight, bias } => tape.conv2d(h, params[weight], params[bias])?,
                    Layer::Act(Activation::Relu) => tape.relu(h),
                    Layer::Act(Activation::Softplus) => tape.softplus(h),
                    Layer::MaxPool2 => tape.maxpool2x2(h)?,
                    Layer::Flatten => tape.flatten(h)?,
                };
            }
        }
        Ok(ForwardPass {
            tape,
            input,
            logits: h,
            params,
        })
    }
}
