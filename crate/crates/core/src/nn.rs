//! Multilayer perceptrons for derivative-constrained training.
//!
//! Models are plain values. [`Mlp::forward`] emits graph nodes whose
//! parameters are named variables (`<prefix>l<i>.weight`, `<prefix>l<i>.bias`,
//! `<prefix>bn<i>.gamma`, ...), so a loss graph can be differentiated with
//! respect to them and the same model can be instantiated several times in
//! one graph, sharing its parameter nodes.
//!
//! A model without batch-norm blocks is "denormalized": every sample is
//! processed independently, which is what makes per-sample input gradients
//! of a batch-summed output exact.

use indexmap::IndexMap;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{scalar, Graph, NodeId, Op};
use crate::error::GraphError;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("update ratio undefined for {activation:?} at z = {z}")]
    UndefinedRatio { activation: Activation, z: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "tanh")]
    Tanh,
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "irelu")]
    IRelu,
    #[serde(rename = "softplus")]
    Softplus,
    #[serde(rename = "shifted_softplus")]
    ShiftedSoftplus,
    #[serde(rename = "silu")]
    Silu,
}

impl Activation {
    pub const ALL: [Activation; 6] = [
        Activation::Tanh,
        Activation::Relu,
        Activation::IRelu,
        Activation::Softplus,
        Activation::ShiftedSoftplus,
        Activation::Silu,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Activation::Tanh => "Tanh",
            Activation::Relu => "ReLU",
            Activation::IRelu => "IReLU",
            Activation::Softplus => "Softplus",
            Activation::ShiftedSoftplus => "ShiftedSoftplus",
            Activation::Silu => "SiLU",
        }
    }

    pub fn op(self) -> Op {
        match self {
            Activation::Tanh => Op::Tanh,
            Activation::Relu => Op::Relu,
            Activation::IRelu => Op::IRelu,
            Activation::Softplus => Op::Softplus,
            Activation::ShiftedSoftplus => Op::ShiftedSoftplus,
            Activation::Silu => Op::Silu,
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => scalar::relu(x),
            Activation::IRelu => scalar::irelu(x),
            Activation::Softplus => scalar::softplus(x),
            Activation::ShiftedSoftplus => scalar::shifted_softplus(x),
            Activation::Silu => scalar::silu(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Relu => scalar::heaviside(x),
            Activation::IRelu => scalar::relu(x),
            Activation::Softplus | Activation::ShiftedSoftplus => scalar::sigmoid(x),
            Activation::Silu => {
                let s = scalar::sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }

    pub fn second_derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Relu => 0.0,
            Activation::IRelu => scalar::heaviside(x),
            Activation::Softplus | Activation::ShiftedSoftplus => {
                let s = scalar::sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Silu => {
                let s = scalar::sigmoid(x);
                s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
            }
        }
    }

    pub fn node(self, g: &mut Graph, x: NodeId) -> Result<NodeId, GraphError> {
        g.unary(self.op(), x)
    }
}

/// Ratio of the parameter update from plain training to the update when a
/// first-order input-derivative constraint is added:
/// `1 / (2 + sigma''(z) / sigma'(z) * g)`, where `z` is the pre-activation
/// and `g` the input derivative of the pre-activation.
pub fn update_ratio(kind: Activation, z: f64, g: f64) -> Result<f64, NnError> {
    let d1 = kind.derivative(z);
    if d1 == 0.0 {
        return Err(NnError::UndefinedRatio { activation: kind, z });
    }
    let r = 1.0 / (2.0 + kind.second_derivative(z) / d1 * g);
    if !r.is_finite() {
        // The denominator vanished.
        return Err(NnError::UndefinedRatio { activation: kind, z });
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InitScheme {
    #[default]
    #[serde(rename = "glorot_uniform")]
    GlorotUniform,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    #[serde(default)]
    pub scheme: InitScheme,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// Per-hidden-layer overrides of `activation`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_activations: Option<Vec<Activation>>,
    #[serde(default)]
    pub use_batchnorm: bool,
    #[serde(default)]
    pub init: InitConfig,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize, activation: Activation) -> Self {
        MlpConfig {
            input_dim,
            hidden,
            output_dim,
            activation,
            layer_activations: None,
            use_batchnorm: false,
            init: InitConfig::default(),
        }
    }

    /// Six hidden layers of 40 units, the standard PINN backbone.
    pub fn pinn(input_dim: usize, activation: Activation) -> Self {
        Self::new(input_dim, vec![40; 6], 1, activation)
    }

    pub fn with_batchnorm(mut self, on: bool) -> Self {
        self.use_batchnorm = on;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(NnError::Config("layer widths must be positive".into()));
        }
        if let Some(acts) = &self.layer_activations {
            if acts.len() != self.hidden.len() {
                return Err(NnError::Config(format!(
                    "{} layer activations for {} hidden layers",
                    acts.len(),
                    self.hidden.len()
                )));
            }
        }
        Ok(())
    }

    pub fn activation_of(&self, layer: usize) -> Activation {
        self.layer_activations
            .as_ref()
            .map_or(self.activation, |a| a[layer])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(out, in)`.
    pub weight: Tensor,
    /// `(out)`.
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled([width], 1.0),
            beta: Tensor::zeros([width]),
            running_mean: Tensor::zeros([width]),
            running_var: Tensor::filled([width], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Batch-norm behaviour during [`Mlp::forward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// Nodes emitted by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub output: NodeId,
    /// Post-activation node of every hidden layer.
    pub hidden: Vec<NodeId>,
    /// Batch mean and biased variance per batch-norm block (train mode only).
    pub batch_stats: Vec<(NodeId, NodeId)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    config: MlpConfig,
    layers: Vec<Dense>,
    norms: Vec<BatchNorm>,
}

impl Mlp {
    /// Glorot-uniform weights drawn from a ChaCha stream seeded by
    /// `config.init.seed`; zero biases.
    pub fn build(config: MlpConfig) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init.seed);
        let widths = config.widths();
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
            layers.push(Dense {
                weight: Tensor::new([fan_out, fan_in], w).expect("sized above"),
                bias: Tensor::zeros([fan_out]),
            });
        }
        let norms = if config.use_batchnorm {
            config.hidden.iter().map(|&w| BatchNorm::new(w)).collect()
        } else {
            Vec::new()
        };
        Ok(Mlp {
            config,
            layers,
            norms,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn norms(&self) -> &[BatchNorm] {
        &self.norms
    }

    pub fn num_params(&self) -> usize {
        self.trainable("").values().map(Tensor::numel).sum()
    }

    /// Trainable parameters by variable name.
    pub fn trainable(&self, prefix: &str) -> IndexMap<String, Tensor> {
        let mut out = IndexMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.insert(format!("{prefix}l{i}.weight"), l.weight.clone());
            out.insert(format!("{prefix}l{i}.bias"), l.bias.clone());
        }
        for (i, n) in self.norms.iter().enumerate() {
            out.insert(format!("{prefix}bn{i}.gamma"), n.gamma.clone());
            out.insert(format!("{prefix}bn{i}.beta"), n.beta.clone());
        }
        out
    }

    /// Trainable parameters plus batch-norm running statistics.
    pub fn state(&self, prefix: &str) -> IndexMap<String, Tensor> {
        let mut out = self.trainable(prefix);
        for (i, n) in self.norms.iter().enumerate() {
            out.insert(format!("{prefix}bn{i}.running_mean"), n.running_mean.clone());
            out.insert(format!("{prefix}bn{i}.running_var"), n.running_var.clone());
        }
        out
    }

    /// Mutable access to every trainable tensor, in [`Mlp::trainable`] order.
    pub fn for_each_trainable_mut(&mut self, prefix: &str, mut f: impl FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("{prefix}l{i}.weight"), &mut l.weight);
            f(&format!("{prefix}l{i}.bias"), &mut l.bias);
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            f(&format!("{prefix}bn{i}.gamma"), &mut n.gamma);
            f(&format!("{prefix}bn{i}.beta"), &mut n.beta);
        }
    }

    /// Replaces state tensors from a name map produced by [`Mlp::state`].
    pub fn load_state(&mut self, prefix: &str, state: &IndexMap<String, Tensor>) -> Result<(), NnError> {
        let take = |name: String, slot: &mut Tensor| -> Result<(), NnError> {
            let t = state
                .get(&name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(NnError::Checkpoint(format!(
                    "`{name}` has shape {}, expected {}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
            Ok(())
        };
        for (i, l) in self.layers.iter_mut().enumerate() {
            take(format!("{prefix}l{i}.weight"), &mut l.weight)?;
            take(format!("{prefix}l{i}.bias"), &mut l.bias)?;
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            take(format!("{prefix}bn{i}.gamma"), &mut n.gamma)?;
            take(format!("{prefix}bn{i}.beta"), &mut n.beta)?;
            take(format!("{prefix}bn{i}.running_mean"), &mut n.running_mean)?;
            take(format!("{prefix}bn{i}.running_var"), &mut n.running_var)?;
        }
        Ok(())
    }

    /// Momentum update of running statistics from one training batch of
    /// `batch` samples. `stats` holds the batch mean and biased variance of
    /// each block; the running variance uses the unbiased estimate.
    pub fn update_running_stats(&mut self, stats: &[(Tensor, Tensor)], batch: usize) {
        let correction = if batch > 1 {
            batch as f64 / (batch - 1) as f64
        } else {
            1.0
        };
        for (n, (mean, var)) in self.norms.iter_mut().zip(stats) {
            let m = n.momentum;
            for (r, &b) in n.running_mean.data_mut().iter_mut().zip(mean.data()) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, &b) in n.running_var.data_mut().iter_mut().zip(var.data()) {
                *r = (1.0 - m) * *r + m * b * correction;
            }
        }
    }

    /// Emits the forward pass for an `(batch, input_dim)` node.
    pub fn forward(&self, g: &mut Graph, x: NodeId, prefix: &str, mode: Mode) -> Result<Forward, NnError> {
        let xs = g.shape(x).clone();
        if xs.rank() != 2 || xs.dims()[1] != self.config.input_dim {
            return Err(NnError::Graph(GraphError::Shape {
                op: "forward",
                detail: format!(
                    "input {xs} does not match (batch, {})",
                    self.config.input_dim
                ),
            }));
        }
        let batch = xs.dims()[0];
        let mut h = x;
        let mut hidden = Vec::new();
        let mut batch_stats = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.var(&format!("{prefix}l{i}.weight"), layer.weight.shape().clone())?;
            let b = g.var(&format!("{prefix}l{i}.bias"), layer.bias.shape().clone())?;
            let z = g.matmul(h, w, false, true)?;
            let mut z = g.add(z, b)?;
            if i + 1 == self.layers.len() {
                h = z;
                break;
            }
            if let Some(norm) = self.norms.get(i) {
                let width = norm.gamma.numel();
                let gamma = g.var(&format!("{prefix}bn{i}.gamma"), [width])?;
                let beta = g.var(&format!("{prefix}bn{i}.beta"), [width])?;
                let (mean, var) = match mode {
                    Mode::Train => {
                        let s = g.sum_axis(z)?;
                        let mean = g.scale(s, 1.0 / batch as f64)?;
                        let c = g.sub(z, mean)?;
                        let sq = g.square(c)?;
                        let s2 = g.sum_axis(sq)?;
                        let var = g.scale(s2, 1.0 / batch as f64)?;
                        batch_stats.push((mean, var));
                        (mean, var)
                    }
                    Mode::Eval => (
                        g.var(&format!("{prefix}bn{i}.running_mean"), [width])?,
                        g.var(&format!("{prefix}bn{i}.running_var"), [width])?,
                    ),
                };
                let centered = g.sub(z, mean)?;
                let ve = g.add_scalar(var, norm.eps)?;
                let sd = g.sqrt(ve)?;
                let inv = g.reciprocal(sd)?;
                let normed = g.mul(centered, inv)?;
                let scaled = g.mul(normed, gamma)?;
                z = g.add(scaled, beta)?;
            }
            h = self.config.activation_of(i).node(g, z)?;
            hidden.push(h);
        }
        Ok(Forward {
            output: h,
            hidden,
            batch_stats,
        })
    }

    /// Standalone graph: variable `x` of shape `(batch, input_dim)`, output `y`.
    pub fn forward_graph(&self, batch: usize, mode: Mode) -> Result<Graph, NnError> {
        let mut g = Graph::new();
        let x = g.var("x", [batch, self.config.input_dim])?;
        let f = self.forward(&mut g, x, "", mode)?;
        g.set_output("y", f.output);
        Ok(g)
    }

    /// Evaluates the model on rows of `x` (eval-mode batch norm).
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let g = self.forward_graph(x.shape().dims()[0], Mode::Eval)?;
        let mut b = self.state("");
        b.insert("x".into(), x.clone());
        Ok(g.eval_outputs(&b, &["y"])?.remove(0))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            seed: self.config.init.seed,
            params: self
                .state("")
                .into_iter()
                .map(|(k, t)| (k, t.into_data()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NnError> {
        let mut m = Mlp::build(ck.config.clone())?;
        let shapes: IndexMap<String, Shape> = m
            .state("")
            .into_iter()
            .map(|(k, t)| (k, t.shape().clone()))
            .collect();
        let mut state = IndexMap::new();
        for (name, shape) in shapes {
            let data = ck
                .params
                .get(&name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing `{name}`")))?;
            let t = Tensor::new(shape, data.clone())
                .map_err(|e| NnError::Checkpoint(format!("`{name}`: {e}")))?;
            state.insert(name, t);
        }
        m.load_state("", &state)?;
        Ok(m)
    }
}

impl MlpConfig {
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }
}

/// Serialized model: config, seed, and flattened parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: MlpConfig,
    pub seed: u64,
    pub params: IndexMap<String, Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn irelu_values() {
        assert_eq!(Activation::IRelu.apply(2.0), 2.0);
        assert_eq!(Activation::IRelu.apply(-3.0), 0.0);
    }

    #[test]
    fn irelu_matches_simpson_quadrature_of_relu() {
        // Composite Simpson with 10^4 panels; exact for the piecewise
        // quadratic integrand up to rounding.
        fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
            let h = (b - a) / panels as f64;
            let mut s = f(a) + f(b);
            for i in 1..panels {
                let x = a + i as f64 * h;
                s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
            }
            s * h / 3.0
        }
        for &x in &[-1.0, 0.5, 1.7] {
            let q = simpson(|y| y.max(0.0), 0.0, x, 10_000);
            assert!((Activation::IRelu.apply(x) - q).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn update_ratio_examples() {
        assert_eq!(update_ratio(Activation::Relu, 1.0, 7.0).unwrap(), 0.5);
        assert!((update_ratio(Activation::IRelu, 1.0, 1.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(update_ratio(Activation::Tanh, 0.0, 5.0).unwrap(), 0.5);
        assert!(matches!(
            update_ratio(Activation::Relu, -1.0, 1.0),
            Err(NnError::UndefinedRatio { .. })
        ));
        assert!(update_ratio(Activation::IRelu, 0.0, 1.0).is_err());
    }

    #[test]
    fn scalar_derivatives_match_finite_differences() {
        let h = 1e-6;
        for act in Activation::ALL {
            for &x in &[-2.3, -0.4, 0.3, 1.1, 2.9] {
                let d1 = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                let d2 = (act.derivative(x + h) - act.derivative(x - h)) / (2.0 * h);
                assert!((d1 - act.derivative(x)).abs() < 1e-7, "{act:?}' at {x}");
                assert!((d2 - act.second_derivative(x)).abs() < 1e-7, "{act:?}'' at {x}");
            }
        }
    }

    #[test]
    fn pinn_layout() {
        let m = Mlp::build(MlpConfig::pinn(2, Activation::Tanh)).unwrap();
        let shapes: Vec<Vec<usize>> = m.layers().iter().map(|l| l.weight.shape().0.clone()).collect();
        assert_eq!(shapes.len(), 7);
        assert_eq!(shapes[0], vec![40, 2]);
        for s in &shapes[1..6] {
            assert_eq!(s, &vec![40, 40]);
        }
        assert_eq!(shapes[6], vec![1, 40]);
        // Six 40x40 hidden weight matrices counting the first layer's output
        // block: 2->40, five 40->40, 40->1.
        assert_eq!(m.num_params(), 2 * 40 + 40 + 5 * (40 * 40 + 40) + 40 + 1);
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let cfg = MlpConfig::new(3, vec![5, 4], 2, Activation::Silu).with_seed(11);
        assert_eq!(Mlp::build(cfg.clone()).unwrap(), Mlp::build(cfg.clone()).unwrap());
        assert_ne!(Mlp::build(cfg.clone()).unwrap(), Mlp::build(cfg.with_seed(12)).unwrap());
    }

    #[test]
    fn zero_hidden_is_affine() {
        let mut m = Mlp::build(MlpConfig::new(2, vec![], 2, Activation::IRelu)).unwrap();
        m.layers_mut()[0].weight = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = m.predict(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn invalid_configs() {
        assert!(Mlp::build(MlpConfig::new(0, vec![3], 1, Activation::Tanh)).is_err());
        assert!(Mlp::build(MlpConfig::new(2, vec![3, 0], 1, Activation::Tanh)).is_err());
        let mut c = MlpConfig::new(2, vec![3, 3], 1, Activation::Tanh);
        c.layer_activations = Some(vec![Activation::IRelu]);
        assert!(Mlp::build(c).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = MlpConfig::new(2, vec![7, 5], 1, Activation::IRelu)
            .with_batchnorm(true)
            .with_seed(3);
        let mut m = Mlp::build(cfg).unwrap();
        m.update_running_stats(
            &[
                (Tensor::filled([7], 0.1 / 3.0), Tensor::filled([7], 2.0 / 7.0)),
                (Tensor::filled([5], -1e-17), Tensor::filled([5], 1e300)),
            ],
            4,
        );
        let text = serde_json::to_string(&m.to_checkpoint()).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(Mlp::from_checkpoint(&back).unwrap(), m);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
}
