//! Adam training over loss graphs, the beta sweep and multi-seed ablations.
//!
//! A run is a pure function of the model, the data and [`TrainConfig`].
//! Minibatch order comes from a per-epoch ChaCha stream; evaluation never
//! draws random numbers and never mutates the model, so the evaluation
//! cadence cannot change the trained parameters.

use std::collections::HashMap;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Binder, NodeId};
use crate::dcloss::{
    advection_loss, cfd_loss, diffreact_loss, energy_force_loss, pes_bindings, CfdFields, DcWeights,
    DiffReactFields, Field, Head, LossError, LossFlags, LossGraph, PdeConstants,
};
use crate::error::GraphError;
use crate::nn::{Activation, Checkpoint, Mlp, MlpConfig, Mode, NnError};
use crate::pde::{rescale_constant, DataError, PesDataset, PinnPointSets, RescaleInfo};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape mismatch for `{name}`: parameter {param}, gradient {grad}")]
    ShapeMismatch { name: String, param: String, grad: String },
    #[error("{0}")]
    Diverged(Box<Divergence>),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// A run stopped by a non-finite value.
#[derive(Debug, Clone)]
pub struct Divergence {
    pub epoch: usize,
    /// Loss term whose evaluation produced the value, or `gradient`.
    pub term: String,
    pub detail: String,
    /// Records of the epochs completed before the failure.
    pub history: Vec<MetricsRecord>,
}

impl std::fmt::Display for Divergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "non-finite value at epoch {} in term `{}`: {}",
            self.epoch, self.term, self.detail
        )
    }
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0 && self.lr.is_finite()) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(TrainError::Config(
                "adam needs lr > 0, 0 <= beta1, beta2 < 1, eps > 0".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moments per parameter; zero at `t = 0`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step(
    params: &mut IndexMap<String, Tensor>,
    grads: &IndexMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| TrainError::ShapeMismatch {
            name: name.clone(),
            param: p.shape().to_string(),
            grad: "missing".into(),
        })?;
        if g.shape() != p.shape() {
            return Err(TrainError::ShapeMismatch {
                name: name.clone(),
                param: p.shape().to_string(),
                grad: g.shape().to_string(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Configuration and models

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Pes,
    Advection,
    Cfd,
    Diffreact,
}

impl TaskKind {
    pub fn fields(self) -> &'static [&'static str] {
        match self {
            TaskKind::Pes => &["energy"],
            TaskKind::Advection => &["u"],
            TaskKind::Cfd => &["rho", "v", "p"],
            TaskKind::Diffreact => &["u", "v"],
        }
    }

    pub fn is_pinn(self) -> bool {
        self != TaskKind::Pes
    }

    pub fn label(self) -> &'static str {
        match self {
            TaskKind::Pes => "pes",
            TaskKind::Advection => "advection",
            TaskKind::Cfd => "cfd",
            TaskKind::Diffreact => "diffreact",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Minibatch size for PES tasks. PINN tasks take one full-batch step
    /// per epoch.
    #[serde(default = "TrainConfig::default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub weights: DcWeights,
    /// Divide PES labels by the power-of-ten constant of the dataset.
    #[serde(default)]
    pub rescale: bool,
    #[serde(default)]
    pub constants: PdeConstants,
    #[serde(default)]
    pub flags: LossFlags,
    /// Evaluate every `eval_every` epochs; the last epoch always evaluates.
    #[serde(default = "TrainConfig::default_eval")]
    pub eval_every: usize,
}

impl TrainConfig {
    fn default_batch() -> usize {
        20
    }

    fn default_eval() -> usize {
        1
    }

    pub fn new(epochs: usize) -> Self {
        TrainConfig {
            epochs,
            batch_size: Self::default_batch(),
            seed: 0,
            adam: AdamConfig::default(),
            weights: DcWeights::default(),
            rescale: false,
            constants: PdeConstants::default(),
            flags: LossFlags::default(),
            eval_every: Self::default_eval(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.adam.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(TrainError::Config("batch_size and eval_every must be positive".into()));
        }
        self.weights
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

/// One network per field, parameters named `{field}.l0.weight`, ...
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub heads: IndexMap<String, Mlp>,
}

impl Model {
    /// Builds one head per task field from `base`; head `i` is initialized
    /// with seed `base.init.seed + i`.
    pub fn for_task(task: TaskKind, input_dim: usize, base: &MlpConfig) -> Result<Self, TrainError> {
        let mut heads = IndexMap::new();
        for (i, field) in task.fields().iter().enumerate() {
            let mut cfg = base.clone();
            cfg.input_dim = input_dim;
            cfg.output_dim = 1;
            cfg.init.seed = base.init.seed.wrapping_add(i as u64);
            heads.insert(field.to_string(), Mlp::build(cfg)?);
        }
        Ok(Model { heads })
    }

    pub fn head(&self, field: &str) -> &Mlp {
        &self.heads[field]
    }

    /// Trainable parameters of every head under their graph names.
    pub fn trainable(&self) -> IndexMap<String, Tensor> {
        self.heads
            .iter()
            .flat_map(|(f, m)| m.trainable(&format!("{f}.")))
            .collect()
    }

    /// Trainable parameters and running statistics under their graph names.
    pub fn state(&self) -> IndexMap<String, Tensor> {
        self.heads.iter().flat_map(|(f, m)| m.state(&format!("{f}."))).collect()
    }

    fn set_trainable(&mut self, params: &IndexMap<String, Tensor>) {
        for (f, m) in self.heads.iter_mut() {
            m.for_each_trainable_mut(&format!("{f}."), |name, t| *t = params[name].clone());
        }
    }

    pub fn num_params(&self) -> usize {
        self.heads.values().map(Mlp::num_params).sum()
    }

    pub fn to_checkpoint(&self) -> IndexMap<String, Checkpoint> {
        self.heads.iter().map(|(f, m)| (f.clone(), m.to_checkpoint())).collect()
    }

    pub fn from_checkpoint(ck: &IndexMap<String, Checkpoint>) -> Result<Self, TrainError> {
        let heads = ck
            .iter()
            .map(|(f, c)| Ok((f.clone(), Mlp::from_checkpoint(c)?)))
            .collect::<Result<_, NnError>>()?;
        Ok(Model { heads })
    }
}

/// Training data of one run.
#[derive(Debug, Clone, Copy)]
pub enum Problem<'a> {
    Pes {
        train: &'a PesDataset,
        /// Evaluation set; the training set is used when absent.
        test: Option<&'a PesDataset>,
    },
    Pinn {
        task: TaskKind,
        sets: &'a PinnPointSets,
    },
}

impl Problem<'_> {
    pub fn task(&self) -> TaskKind {
        match self {
            Problem::Pes { .. } => TaskKind::Pes,
            Problem::Pinn { task, .. } => *task,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Problem::Pes { train, .. } => train.dim(),
            Problem::Pinn { sets, .. } => sets.collocation.coords.first().map_or(0, Vec::len),
        }
    }
}

/// Metrics of one epoch. Training terms are per-sample means of the batch
/// sums for PES tasks and the full-batch values for PINN tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub terms: IndexMap<String, f64>,
    /// Empty on epochs without evaluation.
    pub eval: IndexMap<String, f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<MetricsRecord>,
    pub rescale: RescaleInfo,
    pub term_names: Vec<String>,
    pub eval_names: Vec<String>,
}

impl TrainOutcome {
    pub fn final_record(&self) -> Option<&MetricsRecord> {
        self.history.last()
    }
}

/// Names of the evaluation metrics a problem reports.
pub fn eval_names(problem: &Problem<'_>) -> Vec<String> {
    match problem {
        Problem::Pes { .. } => ["energy_mse", "energy_mae", "force_mse", "force_mae"]
            .map(String::from)
            .to_vec(),
        Problem::Pinn { sets, .. } if !sets.test.is_empty() => vec!["MSE".to_string()],
        Problem::Pinn { .. } => Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// Loss graphs with gradients

struct TrainGraph {
    lg: LossGraph,
    params: Vec<String>,
    fetch: Vec<NodeId>,
    n_terms: usize,
}

impl TrainGraph {
    fn new(lg: LossGraph, params: Vec<String>) -> Result<Self, TrainError> {
        let mut lg = lg;
        let ids = params
            .iter()
            .map(|p| lg.graph.var_id(p))
            .collect::<Result<Vec<_>, _>>()?;
        let total = lg.total();
        let grads = lg.graph.grad_nodes(total, &ids)?;
        let mut fetch: Vec<NodeId> = lg.terms.values().copied().collect();
        let n_terms = fetch.len();
        fetch.extend(grads);
        for h in &lg.bn_stats {
            for (m, v) in &h.stats {
                fetch.push(*m);
                fetch.push(*v);
            }
        }
        Ok(TrainGraph {
            lg,
            params,
            fetch,
            n_terms,
        })
    }

    /// Term that first depends on `node`, else `gradient`.
    fn term_of(&self, node: NodeId) -> String {
        for (name, &id) in &self.lg.terms {
            if self.lg.graph.ancestors(id)[node.0] {
                return name.clone();
            }
        }
        "gradient".to_string()
    }
}

struct StepResult {
    terms: Vec<f64>,
    grads: IndexMap<String, Tensor>,
    stats: Vec<Vec<(Tensor, Tensor)>>,
}

fn evaluate_step(tg: &TrainGraph, model: &Model, data: &dyn Binder) -> Result<StepResult, GraphError> {
    let state = model.state();
    let binders: [&dyn Binder; 3] = [&tg.lg.data, data, &state];
    let mut vals = tg.lg.graph.eval_nodes(&binders[..], &tg.fetch)?.into_iter();
    let terms = vals
        .by_ref()
        .take(tg.n_terms)
        .map(|t| t.item().expect("loss terms are scalar"))
        .collect();
    let grads = tg.params.iter().cloned().zip(vals.by_ref()).collect();
    let stats = tg
        .lg
        .bn_stats
        .iter()
        .map(|h| {
            (0..h.stats.len())
                .map(|_| (vals.next().unwrap(), vals.next().unwrap()))
                .collect()
        })
        .collect();
    Ok(StepResult { terms, grads, stats })
}

fn build_loss(model: &Model, problem: &Problem<'_>, cfg: &TrainConfig, batch: usize) -> Result<LossGraph, TrainError> {
    let heads: IndexMap<&str, Head<'_>> = model
        .heads
        .iter()
        .map(|(f, m)| (f.as_str(), Head::new(m, format!("{f}."))))
        .collect();
    let head = |name: &str| -> Result<&dyn Field, TrainError> {
        heads
            .get(name)
            .map(|h| h as &dyn Field)
            .ok_or_else(|| TrainError::Config(format!("model has no `{name}` head")))
    };
    let lg = match problem {
        Problem::Pes { .. } => {
            let m = model
                .heads
                .get("energy")
                .ok_or_else(|| TrainError::Config("model has no `energy` head".into()))?;
            energy_force_loss(m, batch, cfg.weights, Mode::Train)?
        }
        Problem::Pinn { task, sets } => match task {
            TaskKind::Advection => advection_loss(head("u")?, sets, &cfg.constants, Mode::Train)?,
            TaskKind::Cfd => cfd_loss(
                &CfdFields {
                    rho: head("rho")?,
                    v: head("v")?,
                    p: head("p")?,
                },
                sets,
                &cfg.constants,
                cfg.flags,
                Mode::Train,
            )?,
            TaskKind::Diffreact => diffreact_loss(
                &DiffReactFields {
                    u: head("u")?,
                    v: head("v")?,
                },
                sets,
                &cfg.constants,
                cfg.flags,
                Mode::Train,
            )?,
            TaskKind::Pes => return Err(TrainError::Config("PES data given as PINN point sets".into())),
        },
    };
    Ok(lg)
}

/// Row permutation of epoch `epoch` (1-based) under `seed`.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Labels' rescaling constant under `cfg`.
pub fn rescale_for(problem: &Problem<'_>, cfg: &TrainConfig) -> Result<RescaleInfo, TrainError> {
    match problem {
        Problem::Pes { train, .. } if cfg.rescale => Ok(train.rescale_info()?),
        Problem::Pes { train, .. } => {
            let mut info = train.rescale_info()?;
            info.c = 1.0;
            Ok(info)
        }
        Problem::Pinn { sets, .. } => {
            let labels = sets.labels();
            let max = if labels.is_empty() {
                0.0
            } else {
                rescale_constant(labels)?.max_abs_label
            };
            Ok(RescaleInfo {
                c: 1.0,
                max_abs_label: max,
            })
        }
    }
}

/// Evaluation metrics in original label units.
pub fn evaluate(model: &Model, problem: &Problem<'_>) -> Result<IndexMap<String, f64>, TrainError> {
    let mut out = IndexMap::new();
    match problem {
        Problem::Pes { train, test } => {
            let ds = test.unwrap_or(train);
            let m = &model.heads["energy"];
            let lg = energy_force_loss(m, ds.len(), DcWeights::default(), Mode::Eval)?;
            let batch = ds.all();
            let state = model.state();
            let x = IndexMap::from([("X".to_string(), batch.x.clone())]);
            let binders: [&dyn Binder; 2] = [&x, &state];
            let vals = lg.graph.eval_outputs(&binders[..], &["energy", "force_pred"])?;
            let n = ds.len() as f64;
            let (mut emse, mut emae) = (0.0, 0.0);
            for (p, y) in vals[0].data().iter().zip(batch.energy.data()) {
                emse += (p - y) * (p - y);
                emae += (p - y).abs();
            }
            let (mut fmse, mut fmae) = (0.0, 0.0);
            for (p, y) in vals[1].data().iter().zip(batch.force.data()) {
                fmse += (p - y) * (p - y);
                fmae += (p - y).abs();
            }
            let nf = batch.force.numel() as f64;
            out.insert("energy_mse".into(), emse / n);
            out.insert("energy_mae".into(), emae / n);
            out.insert("force_mse".into(), fmse / nf);
            out.insert("force_mae".into(), fmae / nf);
        }
        Problem::Pinn { sets, .. } => {
            if let Some(x) = sets.test.tensor() {
                let (mut se, mut count) = (0.0, 0usize);
                for (field, targets) in &sets.test.targets {
                    let m = model
                        .heads
                        .get(field)
                        .ok_or_else(|| TrainError::Config(format!("model has no `{field}` head")))?;
                    let pred = m.predict(&x)?;
                    for (p, y) in pred.data().iter().zip(targets) {
                        se += (p - y) * (p - y);
                        count += 1;
                    }
                }
                out.insert("MSE".into(), se / count.max(1) as f64);
            }
        }
    }
    Ok(out)
}

/// [`evaluate`] for a model that predicts labels divided by `c`.
fn evaluate_scaled(model: &Model, problem: &Problem<'_>, c: f64) -> Result<IndexMap<String, f64>, TrainError> {
    if c == 1.0 {
        return evaluate(model, problem);
    }
    let mut m = model.clone();
    // Scaling the output layer by C maps rescaled predictions (and their
    // input gradients) back to original units.
    for mlp in m.heads.values_mut() {
        if let Some(last) = mlp.layers_mut().last_mut() {
            last.weight = last.weight.map(|w| w * c);
            last.bias = last.bias.map(|b| b * c);
        }
    }
    evaluate(&m, problem)
}

/// Trains `model` in place and returns the per-epoch history.
pub fn train(model: &mut Model, problem: &Problem<'_>, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let rescale = rescale_for(problem, cfg)?;
    let params: Vec<String> = model.trainable().keys().cloned().collect();
    let eval_names = eval_names(problem);
    let mut adam = AdamState::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    let mut graphs: HashMap<usize, TrainGraph> = HashMap::new();
    let mut term_names: Vec<String> = Vec::new();

    let diverged = |epoch: usize, term: String, detail: String, history: &Vec<MetricsRecord>| {
        TrainError::Diverged(Box::new(Divergence {
            epoch,
            term,
            detail,
            history: history.clone(),
        }))
    };

    if let Problem::Pes { train, .. } = problem {
        if train.is_empty() {
            return Err(TrainError::Config("empty training set".into()));
        }
    }
    // Build once up front so configuration errors surface before epoch 1
    // and term names are known even for zero epochs.
    let first_batch = match problem {
        Problem::Pes { train, .. } => cfg.batch_size.min(train.len()),
        Problem::Pinn { .. } => 0,
    };
    let tg = TrainGraph::new(build_loss(model, problem, cfg, first_batch)?, params.clone())?;
    term_names.extend(tg.lg.terms.keys().cloned());
    graphs.insert(first_batch, tg);

    for epoch in 1..=cfg.epochs {
        let mut sums = vec![0.0; term_names.len()];
        let batches: Vec<Vec<usize>> = match problem {
            Problem::Pes { train, .. } => epoch_permutation(cfg.seed, epoch, train.len())
                .chunks(cfg.batch_size)
                .map(<[usize]>::to_vec)
                .collect(),
            Problem::Pinn { .. } => vec![Vec::new()],
        };
        for idx in &batches {
            let key = idx.len();
            if !graphs.contains_key(&key) {
                graphs.insert(key, TrainGraph::new(build_loss(model, problem, cfg, key)?, params.clone())?);
            }
            let tg = &graphs[&key];
            let data: IndexMap<String, Tensor> = match problem {
                Problem::Pes { train, .. } => pes_bindings(&train.batch(idx), rescale.c)?,
                Problem::Pinn { .. } => IndexMap::new(),
            };
            let step = match evaluate_step(tg, model, &data) {
                Ok(s) => s,
                Err(GraphError::NonFinite { node, op }) => {
                    return Err(diverged(
                        epoch,
                        tg.term_of(node),
                        format!("{op} node {}", node.0),
                        &history,
                    ))
                }
                Err(e) => return Err(e.into()),
            };
            for (s, v) in sums.iter_mut().zip(&step.terms) {
                *s += v;
            }
            let mut p = model.trainable();
            adam_step(&mut p, &step.grads, &mut adam, &cfg.adam)?;
            if let Some((name, _)) = p.iter().find(|(_, t)| !t.is_finite()) {
                return Err(diverged(epoch, "gradient".into(), format!("parameter `{name}`"), &history));
            }
            model.set_trainable(&p);
            for (h, stats) in tg.lg.bn_stats.iter().zip(&step.stats) {
                model
                    .heads
                    .get_mut(&h.field)
                    .expect("stats come from model heads")
                    .update_running_stats(stats, h.batch);
            }
        }
        let terms: IndexMap<String, f64> = match problem {
            Problem::Pes { train, .. } => term_names
                .iter()
                .cloned()
                .zip(sums.iter().map(|s| s / train.len() as f64))
                .collect(),
            Problem::Pinn { .. } => term_names.iter().cloned().zip(sums).collect(),
        };
        let eval = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            match evaluate_scaled(model, problem, rescale.c) {
                Ok(e) => e,
                Err(TrainError::Graph(GraphError::NonFinite { node, op })) => {
                    return Err(diverged(epoch, "eval".into(), format!("{op} node {}", node.0), &history))
                }
                Err(e) => return Err(e),
            }
        } else {
            IndexMap::new()
        };
        history.push(MetricsRecord {
            epoch,
            terms,
            eval,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome {
        history,
        rescale,
        term_names,
        eval_names,
    })
}

/// Loss terms and gradients of one step, exposed for equivalence checks.
/// Returns `(terms, grads)` for the PES rows `idx` or the PINN point sets.
pub fn loss_and_grads(
    model: &Model,
    problem: &Problem<'_>,
    cfg: &TrainConfig,
    idx: &[usize],
) -> Result<(IndexMap<String, f64>, IndexMap<String, Tensor>), TrainError> {
    let rescale = rescale_for(problem, cfg)?;
    let params: Vec<String> = model.trainable().keys().cloned().collect();
    let tg = TrainGraph::new(build_loss(model, problem, cfg, idx.len())?, params)?;
    let data = match problem {
        Problem::Pes { train, .. } => pes_bindings(&train.batch(idx), rescale.c)?,
        Problem::Pinn { .. } => IndexMap::new(),
    };
    let step = evaluate_step(&tg, model, &data)?;
    Ok((tg.lg.terms.keys().cloned().zip(step.terms).collect(), step.grads))
}

// ---------------------------------------------------------------------------
// Reporting

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

/// CSV with columns `epoch`, the term names, then the evaluation metrics;
/// evaluation cells are empty on epochs without evaluation. Wall-clock time
/// is kept out so reruns produce identical files (see [`timing_csv`]).
pub fn history_csv(outcome: &TrainOutcome) -> String {
    history_csv_from(&outcome.history, &outcome.term_names, &outcome.eval_names)
}

pub fn history_csv_from(history: &[MetricsRecord], terms: &[String], evals: &[String]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["epoch".to_string()];
    header.extend(terms.iter().cloned());
    header.extend(evals.iter().cloned());
    w.write_record(&header).expect("in-memory write");
    for r in history {
        let mut row = vec![r.epoch.to_string()];
        row.extend(terms.iter().map(|t| r.terms.get(t).map_or(String::new(), |v| fmt(*v))));
        row.extend(evals.iter().map(|t| r.eval.get(t).map_or(String::new(), |v| fmt(*v))));
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
}

/// `epoch,seconds` per record.
pub fn timing_csv(history: &[MetricsRecord]) -> String {
    let mut s = String::from("epoch,seconds\n");
    for r in history {
        s.push_str(&format!("{},{}\n", r.epoch, r.seconds));
    }
    s
}

/// Final state of one run: the last record's terms merged with its
/// evaluation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Grouping key for reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub task: TaskKind,
    pub status: RunStatus,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nan_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nan_term: Option<String>,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(flatten)]
    pub metrics: IndexMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Finished,
    Diverged,
}

impl Summary {
    pub fn finished(task: TaskKind, outcome: &TrainOutcome) -> Self {
        let mut metrics = IndexMap::new();
        if let Some(r) = outcome.final_record() {
            metrics.extend(r.terms.clone());
            // The last epoch always evaluates.
            metrics.extend(r.eval.clone());
        }
        Summary {
            label: None,
            task,
            status: RunStatus::Finished,
            epochs: outcome.history.len(),
            nan_epoch: None,
            nan_term: None,
            c: outcome.rescale.c,
            metrics,
        }
    }

    pub fn diverged(task: TaskKind, d: &Divergence, c: f64) -> Self {
        Summary {
            label: None,
            task,
            status: RunStatus::Diverged,
            epochs: d.history.len(),
            nan_epoch: Some(d.epoch),
            nan_term: Some(d.term.clone()),
            c,
            metrics: IndexMap::new(),
        }
    }

    pub fn is_diverged(&self) -> bool {
        self.status == RunStatus::Diverged
    }
}

/// Trains a model built from `base` and reports its summary; divergence
/// becomes a diverged summary rather than an error.
pub fn run_summary(
    problem: &Problem<'_>,
    base: &MlpConfig,
    cfg: &TrainConfig,
) -> Result<(Summary, Option<(Model, TrainOutcome)>), TrainError> {
    let task = problem.task();
    let mut model = Model::for_task(task, problem.input_dim(), base)?;
    match train(&mut model, problem, cfg) {
        Ok(outcome) => Ok((Summary::finished(task, &outcome), Some((model, outcome)))),
        Err(TrainError::Diverged(d)) => {
            let c = rescale_for(problem, cfg)?.c;
            Ok((Summary::diverged(task, &d, c), None))
        }
        Err(e) => Err(e),
    }
}

// ---------------------------------------------------------------------------
// Beta sweep

pub const DEFAULT_BETAS: [f64; 8] = [0.01, 0.1, 1.0, 10.0, 30.0, 50.0, 100.0, 200.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub alpha: f64,
    /// Final per-sample training terms (rescaled units).
    pub energy_loss: f64,
    pub force_loss: f64,
    /// Final evaluation errors in original units.
    pub energy_mse: f64,
    pub force_mse: f64,
    pub diverged: bool,
}

/// One training configuration per beta with alpha fixed at one.
pub fn sweep_configs(base: &TrainConfig, betas: &[f64]) -> Vec<TrainConfig> {
    betas
        .iter()
        .map(|&beta| {
            let mut c = base.clone();
            c.weights = DcWeights { alpha: 1.0, beta };
            c
        })
        .collect()
}

pub fn sweep_row(cfg: &TrainConfig, summary: &Summary) -> SweepRow {
    let get = |k: &str| summary.metrics.get(k).copied().unwrap_or(f64::NAN);
    SweepRow {
        beta: cfg.weights.beta,
        alpha: cfg.weights.alpha,
        energy_loss: get("pred"),
        force_loss: get("force"),
        energy_mse: get("energy_mse"),
        force_mse: get("force_mse"),
        diverged: summary.is_diverged(),
    }
}

/// Runs every beta sequentially.
pub fn beta_sweep(
    problem: &Problem<'_>,
    model: &MlpConfig,
    base: &TrainConfig,
    betas: &[f64],
) -> Result<Vec<SweepRow>, TrainError> {
    if !matches!(problem, Problem::Pes { .. }) {
        return Err(TrainError::Config("the beta sweep runs on PES data".into()));
    }
    sweep_configs(base, betas)
        .iter()
        .map(|cfg| Ok(sweep_row(cfg, &run_summary(problem, model, cfg)?.0)))
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["beta", "alpha", "energy_loss", "force_loss", "energy_mse", "force_mse", "diverged"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            fmt(r.beta),
            fmt(r.alpha),
            fmt(r.energy_loss),
            fmt(r.force_loss),
            fmt(r.energy_mse),
            fmt(r.force_mse),
            r.diverged.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub label: String,
    pub activation: Activation,
    pub batchnorm: bool,
    #[serde(default)]
    pub rescale: bool,
}

impl Variant {
    pub fn new(label: &str, activation: Activation, batchnorm: bool, rescale: bool) -> Self {
        Variant {
            label: label.into(),
            activation,
            batchnorm,
            rescale,
        }
    }
}

/// `Tanh+BN, IReLU+BN, Tanh, IReLU` for PINN tasks; for PES tasks the
/// original Tanh+BN setting, IReLU alone, denormalization with rescaling,
/// and both.
pub fn default_variants(task: TaskKind) -> Vec<Variant> {
    use Activation::{IRelu, Tanh};
    if task.is_pinn() {
        vec![
            Variant::new("Tanh+BN", Tanh, true, false),
            Variant::new("IReLU+BN", IRelu, true, false),
            Variant::new("Tanh", Tanh, false, false),
            Variant::new("IReLU", IRelu, false, false),
        ]
    } else {
        vec![
            Variant::new("orig", Tanh, true, false),
            Variant::new("+IReLU", IRelu, true, false),
            Variant::new("+denorm+rescale", Tanh, false, true),
            Variant::new("+both", IRelu, false, true),
        ]
    }
}

/// One (variant, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub variant: usize,
    pub seed: u64,
    pub model: MlpConfig,
    pub train: TrainConfig,
}

impl Job {
    pub fn dir_name(&self, variants: &[Variant]) -> String {
        let label: String = variants[self.variant]
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect();
        format!("{:02}_{}_seed{}", self.variant, label.trim_matches('_'), self.seed)
    }
}

/// Every (variant, seed) pair, variant-major. The seed sets both the
/// model initialization and the shuffling stream.
pub fn ablation_jobs(
    variants: &[Variant],
    seeds: &[u64],
    model: &MlpConfig,
    train: &TrainConfig,
) -> Result<Vec<Job>, TrainError> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(TrainError::Config("ablation needs at least one variant and one seed".into()));
    }
    let mut jobs = Vec::new();
    for (vi, v) in variants.iter().enumerate() {
        for &seed in seeds {
            let mut m = model.clone();
            m.activation = v.activation;
            m.layer_activations = None;
            m.use_batchnorm = v.batchnorm;
            m.init.seed = seed;
            let mut t = train.clone();
            t.rescale = v.rescale;
            t.seed = seed;
            jobs.push(Job {
                variant: vi,
                seed,
                model: m,
                train: t,
            });
        }
    }
    Ok(jobs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub runs: usize,
    pub n_diverged: usize,
    /// Median over finished runs; NaN when every run diverged.
    pub median: IndexMap<String, f64>,
    /// Max minus min over finished runs.
    pub spread: IndexMap<String, f64>,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Aggregates summaries by label. Diverged runs are counted, not averaged.
pub fn aggregate<'a>(labelled: impl IntoIterator<Item = (&'a str, &'a Summary)>) -> Vec<AblationRow> {
    let mut groups: IndexMap<&str, Vec<&Summary>> = IndexMap::new();
    for (label, s) in labelled {
        groups.entry(label).or_default().push(s);
    }
    groups
        .into_iter()
        .map(|(label, runs)| {
            let mut keys: Vec<String> = Vec::new();
            for s in &runs {
                for k in s.metrics.keys() {
                    if !keys.contains(k) {
                        keys.push(k.clone());
                    }
                }
            }
            let finished: Vec<&&Summary> = runs.iter().filter(|s| !s.is_diverged()).collect();
            let mut med = IndexMap::new();
            let mut spread = IndexMap::new();
            for k in keys {
                let mut vals: Vec<f64> = finished.iter().filter_map(|s| s.metrics.get(&k).copied()).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                spread.insert(k.clone(), if vals.is_empty() { f64::NAN } else { hi - lo });
                med.insert(k, median(&mut vals));
            }
            AblationRow {
                variant: label.to_string(),
                runs: runs.len(),
                n_diverged: runs.len() - finished.len(),
                median: med,
                spread,
            }
        })
        .collect()
}

/// Runs every job sequentially and aggregates per variant.
pub fn ablate(
    problem: &Problem<'_>,
    variants: &[Variant],
    seeds: &[u64],
    model: &MlpConfig,
    train: &TrainConfig,
) -> Result<Vec<AblationRow>, TrainError> {
    let jobs = ablation_jobs(variants, seeds, model, train)?;
    let summaries = jobs
        .iter()
        .map(|j| Ok(run_summary(problem, &j.model, &j.train)?.0))
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(aggregate(
        jobs.iter()
            .zip(&summaries)
            .map(|(j, s)| (variants[j.variant].label.as_str(), s)),
    ))
}

/// Metric columns in first-seen order.
pub fn table_columns(rows: &[AblationRow]) -> Vec<String> {
    let mut cols: Vec<String> = Vec::new();
    for r in rows {
        for k in r.median.keys() {
            if !cols.contains(k) {
                cols.push(k.clone());
            }
        }
    }
    cols
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let cols = table_columns(rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["variant".to_string(), "runs".into(), "n_diverged".into()];
    for c in &cols {
        header.push(format!("{c}_median"));
        header.push(format!("{c}_spread"));
    }
    w.write_record(&header).expect("in-memory write");
    for r in rows {
        let mut row = vec![r.variant.clone(), r.runs.to_string(), r.n_diverged.to_string()];
        for c in &cols {
            // A variant whose runs all diverged has no metrics at all.
            row.push(r.median.get(c).map_or("NaN".into(), |v| fmt(*v)));
            row.push(r.spread.get(c).map_or("NaN".into(), |v| fmt(*v)));
        }
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
}

/// Markdown table of medians with the lowest finite value of each column in
/// bold; fully diverged cells read `NaN`.
pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let cols = table_columns(rows);
    let best: Vec<Option<f64>> = cols
        .iter()
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.median.get(c).copied())
                .filter(|v| v.is_finite())
                .min_by(f64::total_cmp)
        })
        .collect();
    let mut s = format!("| variant | runs | n_diverged | {} |\n", cols.join(" | "));
    s.push_str(&format!("|---|---|---|{}\n", "---|".repeat(cols.len())));
    for r in rows {
        let cells: Vec<String> = cols
            .iter()
            .zip(&best)
            .map(|(c, b)| match r.median.get(c) {
                Some(v) if v.is_nan() => "NaN".to_string(),
                Some(v) if Some(*v) == *b => format!("**{v:.6e}**"),
                Some(v) => format!("{v:.6e}"),
                None => "NaN".to_string(),
            })
            .collect();
        s.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            r.variant,
            r.runs,
            r.n_diverged,
            cells.join(" | ")
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::{gen_pes, PesGenerator, Potential};

    fn small_pes(n: usize) -> PesDataset {
        gen_pes(&PesGenerator {
            potential: Potential::Quadratic {
                a: vec![vec![2.0, 0.5], vec![0.5, 1.0]],
            },
            n,
            domain: vec![[-1.0, 1.0]; 2],
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = IndexMap::from([("w".to_string(), Tensor::new([2], vec![1.0, -2.0]).unwrap())]);
        let g = IndexMap::from([("w".to_string(), Tensor::zeros([2]))]);
        let before = p.clone();
        adam_step(&mut p, &g, &mut AdamState::default(), &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut p = IndexMap::from([("w".to_string(), Tensor::scalar(0.0))]);
        let g = IndexMap::from([("w".to_string(), Tensor::scalar(1.0))]);
        adam_step(&mut p, &g, &mut AdamState::default(), &cfg).unwrap();
        let want = -0.01 / (1.0 + 1e-8);
        assert!((p["w"].item().unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_square() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut p = IndexMap::from([("w".to_string(), Tensor::scalar(1.0))]);
        let mut st = AdamState::default();
        for _ in 0..100 {
            let w = p["w"].item().unwrap();
            let g = IndexMap::from([("w".to_string(), Tensor::scalar(2.0 * w))]);
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        }
        assert!(p["w"].item().unwrap().abs() < 0.1);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = IndexMap::from([("w".to_string(), Tensor::zeros([2]))]);
        let g = IndexMap::from([("w".to_string(), Tensor::zeros([3]))]);
        let err = adam_step(&mut p, &g, &mut AdamState::default(), &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::ShapeMismatch { .. }));
    }

    #[test]
    fn adam_config_validation() {
        assert!(AdamConfig::with_lr(0.0).validate().is_err());
        let bad = AdamConfig {
            beta2: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let ds = small_pes(10);
        let problem = Problem::Pes { train: &ds, test: None };
        let base = MlpConfig::new(2, vec![8], 1, Activation::IRelu);
        let mut m = Model::for_task(TaskKind::Pes, 2, &base).unwrap();
        let before = m.clone();
        let out = train(&mut m, &problem, &TrainConfig::new(0)).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(m, before);
        assert_eq!(out.term_names, ["pred", "force", "total"]);
    }

    #[test]
    fn update_matches_adam_on_loss_gradient() {
        let ds = small_pes(12);
        let problem = Problem::Pes { train: &ds, test: None };
        let base = MlpConfig::new(2, vec![6], 1, Activation::Tanh);
        let mut cfg = TrainConfig::new(1);
        cfg.batch_size = 12;
        let m0 = Model::for_task(TaskKind::Pes, 2, &base).unwrap();
        let mut trained = m0.clone();
        train(&mut trained, &problem, &cfg).unwrap();

        let idx = epoch_permutation(cfg.seed, 1, 12);
        let (_, grads) = loss_and_grads(&m0, &problem, &cfg, &idx).unwrap();
        let mut p = m0.trainable();
        adam_step(&mut p, &grads, &mut AdamState::default(), &cfg.adam).unwrap();
        assert_eq!(trained.trainable(), p);
    }

    #[test]
    fn eval_cadence_does_not_change_parameters() {
        let ds = small_pes(30);
        let problem = Problem::Pes { train: &ds, test: None };
        let base = MlpConfig::new(2, vec![8], 1, Activation::IRelu);
        let mut a = Model::for_task(TaskKind::Pes, 2, &base).unwrap();
        let mut b = a.clone();
        let mut cfg = TrainConfig::new(4);
        cfg.batch_size = 7;
        cfg.eval_every = 1;
        train(&mut a, &problem, &cfg).unwrap();
        cfg.eval_every = 3;
        train(&mut b, &problem, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batchnorm_running_stats_move() {
        let ds = small_pes(16);
        let problem = Problem::Pes { train: &ds, test: None };
        let base = MlpConfig::new(2, vec![4], 1, Activation::Tanh).with_batchnorm(true);
        let mut m = Model::for_task(TaskKind::Pes, 2, &base).unwrap();
        let before = m.head("energy").norms()[0].running_mean.clone();
        let mut cfg = TrainConfig::new(1);
        cfg.batch_size = 8;
        train(&mut m, &problem, &cfg).unwrap();
        assert_ne!(m.head("energy").norms()[0].running_mean, before);
    }

    #[test]
    fn median_and_aggregate() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
        let ok = |v: f64| Summary {
            label: None,
            task: TaskKind::Pes,
            status: RunStatus::Finished,
            epochs: 1,
            nan_epoch: None,
            nan_term: None,
            c: 1.0,
            metrics: IndexMap::from([("force_mse".to_string(), v)]),
        };
        let bad = Summary {
            status: RunStatus::Diverged,
            nan_epoch: Some(1),
            metrics: IndexMap::new(),
            ..ok(0.0)
        };
        let (a, b, c) = (ok(1.0), ok(3.0), bad);
        let rows = aggregate([("x", &a), ("x", &b), ("x", &c), ("y", &c)]);
        assert_eq!(rows[0].median["force_mse"], 2.0);
        assert_eq!(rows[0].n_diverged, 1);
        assert_eq!(rows[1].n_diverged, 1);
        assert!(rows[1].median.is_empty());
        let md = ablation_markdown(&rows);
        assert!(md.contains("**2.000000e0**"), "{md}");
        assert!(md.contains("| y | 1 | 1 | NaN |"), "{md}");
    }

    #[test]
    fn default_variant_sets() {
        let labels = |t| default_variants(t).into_iter().map(|v| v.label).collect::<Vec<_>>();
        assert_eq!(labels(TaskKind::Advection), ["Tanh+BN", "IReLU+BN", "Tanh", "IReLU"]);
        assert_eq!(labels(TaskKind::Pes), ["orig", "+IReLU", "+denorm+rescale", "+both"]);
    }

    #[test]
    fn sweep_rows_fix_alpha() {
        let cfgs = sweep_configs(&TrainConfig::new(1), &DEFAULT_BETAS);
        assert_eq!(cfgs.len(), 8);
        assert!(cfgs.iter().all(|c| c.weights.alpha == 1.0));
    }
}
