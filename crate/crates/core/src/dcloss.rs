//! Derivative-constrained loss graphs.
//!
//! Each builder returns a [`LossGraph`]: a graph whose parameter variables
//! are named by the model heads, whose data variables are filled from
//! [`LossGraph::data`] (PINN tasks) or [`pes_bindings`] (PES minibatches),
//! and whose outputs hold every loss term plus `total`.
//!
//! Input derivatives are obtained by differentiating the sum of a field
//! over its point set with respect to the coordinate variable. Without batch
//! normalization row `i` of that gradient is the derivative at point `i`.
//! In train-mode batch normalization every output depends on every row and
//! the rows are mixed; this is intended, not corrected.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, NodeId};
use crate::error::GraphError;
use crate::nn::{Forward, Mlp, Mode, NnError};
use crate::pde::{PesBatch, PinnPointSets, PointSet};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("point set `{0}` is empty")]
    EmptyPointSet(&'static str),
    #[error("point set `{set}` has no target for field `{field}`")]
    MissingTarget { set: &'static str, field: String },
    #[error("field `{field}`: {detail}")]
    Field { field: String, detail: String },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Weights of the energy and force terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl DcWeights {
    /// Both weights finite and non-negative, not both zero.
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.alpha) || !ok(self.beta) || (self.alpha == 0.0 && self.beta == 0.0) {
            return Err(LossError::Config(format!(
                "weights need alpha, beta >= 0, not both zero (got {}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

impl Default for DcWeights {
    fn default() -> Self {
        DcWeights { alpha: 1.0, beta: 1.0 }
    }
}

/// Physical constants of the three PDE tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdeConstants {
    pub advection_beta: f64,
    pub gamma: f64,
    /// Shear viscosity; the inviscid residual never reads it.
    pub eta: f64,
    /// Bulk viscosity; the inviscid residual never reads it.
    pub zeta: f64,
    pub k: f64,
    pub d_u: f64,
    pub d_v: f64,
}

impl Default for PdeConstants {
    fn default() -> Self {
        PdeConstants {
            advection_beta: 0.1,
            gamma: 5.0 / 3.0,
            eta: 1e-8,
            zeta: 1e-8,
            k: 0.005,
            d_u: 1e-3,
            d_v: 5e-3,
        }
    }
}

/// Alternative readings of individual residual terms. All off reproduces
/// the printed forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossFlags {
    /// Sum of squared residuals instead of the square of their sum.
    pub per_residual_norm: bool,
    /// `rho (v_t + v v_x) + p_x` instead of `- p_x`.
    pub corrected_momentum_sign: bool,
    /// `u_x + v_x + u_y + v_y` in the diffusion-reaction boundary term.
    pub corrected_bc: bool,
}

/// A scalar field over `(n, dim)` coordinates emitted into a graph.
pub trait Field {
    fn emit(&self, g: &mut Graph, coords: NodeId, mode: Mode) -> Result<Forward>;
}

/// Network head whose parameters are named `{prefix}l0.weight`, ...
pub struct Head<'a> {
    pub model: &'a Mlp,
    pub prefix: String,
}

impl<'a> Head<'a> {
    pub fn new(model: &'a Mlp, prefix: impl Into<String>) -> Self {
        Head {
            model,
            prefix: prefix.into(),
        }
    }
}

impl Field for Head<'_> {
    fn emit(&self, g: &mut Graph, coords: NodeId, mode: Mode) -> Result<Forward> {
        Ok(self.model.forward(g, coords, &self.prefix, mode)?)
    }
}

/// A field given directly as graph operations; used for manufactured
/// solutions.
pub struct FnField<F>(pub F);

impl<F> Field for FnField<F>
where
    F: Fn(&mut Graph, NodeId) -> std::result::Result<NodeId, GraphError>,
{
    fn emit(&self, g: &mut Graph, coords: NodeId, _mode: Mode) -> Result<Forward> {
        Ok(Forward {
            output: (self.0)(g, coords)?,
            hidden: Vec::new(),
            batch_stats: Vec::new(),
        })
    }
}

/// Batch statistics of one head's first forward pass in a loss graph.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStats {
    pub field: String,
    pub batch: usize,
    pub stats: Vec<(NodeId, NodeId)>,
}

#[derive(Debug, Clone)]
pub struct LossGraph {
    pub graph: Graph,
    /// Term name to node, in reporting order; `total` is last.
    pub terms: IndexMap<String, NodeId>,
    /// Fixed data bindings (empty for PES graphs).
    pub data: IndexMap<String, Tensor>,
    /// Heads that ran batch normalization in train mode.
    pub bn_stats: Vec<HeadStats>,
}

impl LossGraph {
    pub fn total(&self) -> NodeId {
        self.terms["total"]
    }

    pub fn term_names(&self) -> Vec<&str> {
        self.terms.keys().map(String::as_str).collect()
    }
}

// ---------------------------------------------------------------------------
// Shared helpers

/// `d(sum f)/d coords`, shape of `coords`.
fn input_grad(g: &mut Graph, f: NodeId, coords: NodeId) -> Result<NodeId> {
    let s = g.sum_all(f)?;
    Ok(g.grad_nodes(s, &[coords])?.remove(0))
}

/// Column `j` of `d(sum f)/d coords`.
fn partial(g: &mut Graph, f: NodeId, coords: NodeId, j: usize) -> Result<NodeId> {
    let d = input_grad(g, f, coords)?;
    Ok(g.column(d, j)?)
}

fn mse(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let d = g.sub(pred, target)?;
    let sq = g.square(d)?;
    Ok(g.mean_all(sq)?)
}

fn mean_square(g: &mut Graph, r: NodeId) -> Result<NodeId> {
    let sq = g.square(r)?;
    Ok(g.mean_all(sq)?)
}

fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(acc)
}

/// Tracks data variables and the first train-mode statistics per head.
struct Builder {
    g: Graph,
    data: IndexMap<String, Tensor>,
    bn_stats: Vec<HeadStats>,
    mode: Mode,
}

impl Builder {
    fn new(mode: Mode) -> Self {
        Builder {
            g: Graph::new(),
            data: IndexMap::new(),
            bn_stats: Vec::new(),
            mode,
        }
    }

    fn points(&mut self, name: &str, set: &PointSet, label: &'static str) -> Result<NodeId> {
        let t = set.tensor().ok_or(LossError::EmptyPointSet(label))?;
        let id = self.g.var(name, t.shape().clone())?;
        self.data.insert(name.to_string(), t);
        Ok(id)
    }

    fn target(&mut self, name: &str, set: &PointSet, field: &str, label: &'static str) -> Result<NodeId> {
        let t = set.target_tensor(field).ok_or_else(|| LossError::MissingTarget {
            set: label,
            field: field.to_string(),
        })?;
        if t.numel() != set.len() {
            return Err(LossError::Field {
                field: field.to_string(),
                detail: format!("{} targets for {} points in `{label}`", t.numel(), set.len()),
            });
        }
        let id = self.g.var(name, t.shape().clone())?;
        self.data.insert(name.to_string(), t);
        Ok(id)
    }

    fn emit(&mut self, name: &str, field: &dyn Field, coords: NodeId) -> Result<NodeId> {
        let f = field.emit(&mut self.g, coords, self.mode)?;
        let shape = self.g.shape(f.output).clone();
        let batch = self.g.shape(coords).dims()[0];
        if shape.dims() != [batch, 1] {
            return Err(LossError::Field {
                field: name.to_string(),
                detail: format!("output shape {shape}, expected ({batch}, 1)"),
            });
        }
        if !f.batch_stats.is_empty() && !self.bn_stats.iter().any(|h| h.field == name) {
            self.bn_stats.push(HeadStats {
                field: name.to_string(),
                batch,
                stats: f.batch_stats,
            });
        }
        Ok(f.output)
    }

    fn finish(mut self, terms: Vec<(&str, NodeId)>, total: NodeId) -> LossGraph {
        let mut map = IndexMap::new();
        for (name, id) in terms {
            self.g.set_output(name, id);
            map.insert(name.to_string(), id);
        }
        self.g.set_output("total", total);
        map.insert("total".to_string(), total);
        for h in &self.bn_stats {
            for (i, (m, v)) in h.stats.iter().enumerate() {
                self.g.set_output(format!("{}.bn{i}.batch_mean", h.field), *m);
                self.g.set_output(format!("{}.bn{i}.batch_var", h.field), *v);
            }
        }
        LossGraph {
            graph: self.g,
            terms: map,
            data: self.data,
            bn_stats: self.bn_stats,
        }
    }
}

// ---------------------------------------------------------------------------
// Potential energy surfaces

/// Parameters are prefixed `energy.`.
/// `alpha * sum (f(x) - E)^2 + beta * sum |-grad f(x) - F|^2` over a batch
/// of `n` samples in `d` dimensions. Data variables are `X (n, d)`,
/// `E (n, 1)` and `F (n, d)`; labels are bound already divided by the
/// rescaling constant (see [`pes_bindings`]). Outputs: `pred`, `force`,
/// `total`, plus `energy` and `force_pred` predictions.
pub fn energy_force_loss(model: &Mlp, n: usize, weights: DcWeights, mode: Mode) -> Result<LossGraph> {
    let d = model.config().input_dim;
    if model.config().output_dim != 1 {
        return Err(LossError::Config("energy model must have one output".into()));
    }
    if n == 0 {
        return Err(LossError::EmptyPointSet("batch"));
    }
    weights.validate()?;
    let mut b = Builder::new(mode);
    let x = b.g.var("X", [n, d])?;
    let e = b.g.var("E", [n, 1])?;
    let f = b.g.var("F", [n, d])?;
    let energy = b.emit("energy", &Head::new(model, "energy."), x)?;
    let grad = input_grad(&mut b.g, energy, x)?;
    let force_pred = b.g.neg(grad)?;
    let de = b.g.sub(energy, e)?;
    let sq = b.g.square(de)?;
    let pred = b.g.sum_all(sq)?;
    let df = b.g.sub(force_pred, f)?;
    let sq = b.g.square(df)?;
    let force = b.g.sum_all(sq)?;
    let wp = b.g.scale(pred, weights.alpha)?;
    let wf = b.g.scale(force, weights.beta)?;
    let total = b.g.add(wp, wf)?;
    b.g.set_output("energy", energy);
    b.g.set_output("force_pred", force_pred);
    Ok(b.finish(vec![("pred", pred), ("force", force)], total))
}

/// Bindings for [`energy_force_loss`] with labels divided by `c`.
pub fn pes_bindings(batch: &PesBatch, c: f64) -> Result<IndexMap<String, Tensor>> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(LossError::Config(format!("rescaling constant must be positive, got {c}")));
    }
    let scaled = batch.rescaled(c);
    Ok(IndexMap::from([
        ("X".to_string(), scaled.x),
        ("E".to_string(), scaled.energy),
        ("F".to_string(), scaled.force),
    ]))
}

// ---------------------------------------------------------------------------
// PINN tasks

fn check_dim(sets: &PinnPointSets, dim: usize) -> Result<()> {
    for (label, set) in [
        ("collocation", &sets.collocation),
        ("initial", &sets.initial),
        ("boundary", &sets.boundary),
    ] {
        if let Some(c) = set.coords.iter().find(|c| c.len() != dim) {
            return Err(LossError::Config(format!(
                "`{label}` point of dimension {}, expected {dim}",
                c.len()
            )));
        }
    }
    Ok(())
}

/// `f = mean (psi_t + beta psi_x)^2`, `IC` and `BC` mean squared errors
/// against the stored targets. Coordinates are `(x, t)`.
pub fn advection_loss(psi: &dyn Field, sets: &PinnPointSets, c: &PdeConstants, mode: Mode) -> Result<LossGraph> {
    check_dim(sets, 2)?;
    let mut b = Builder::new(mode);
    let xf = b.points("X_f", &sets.collocation, "collocation")?;
    let xi = b.points("X_ic", &sets.initial, "initial")?;
    let xb = b.points("X_bc", &sets.boundary, "boundary")?;
    let yi = b.target("Y_ic.u", &sets.initial, "u", "initial")?;
    let yb = b.target("Y_bc.u", &sets.boundary, "u", "boundary")?;

    let u = b.emit("u", psi, xf)?;
    let du = input_grad(&mut b.g, u, xf)?;
    let ux = b.g.column(du, 0)?;
    let ut = b.g.column(du, 1)?;
    let bux = b.g.scale(ux, c.advection_beta)?;
    let r = b.g.add(ut, bux)?;
    let f = mean_square(&mut b.g, r)?;

    let ui = b.emit("u", psi, xi)?;
    let ic = mse(&mut b.g, ui, yi)?;
    let ub = b.emit("u", psi, xb)?;
    let bc = mse(&mut b.g, ub, yb)?;
    let total = sum_nodes(&mut b.g, &[f, ic, bc])?;
    Ok(b.finish(vec![("f", f), ("IC", ic), ("BC", bc)], total))
}

/// Density, velocity and pressure heads of the compressible-flow task.
pub struct CfdFields<'a> {
    pub rho: &'a dyn Field,
    pub v: &'a dyn Field,
    pub p: &'a dyn Field,
}

/// Inviscid 1D Euler residuals on `(x, t)`:
///
/// * `f1 = rho_t + (rho v)_x`
/// * `f2 = rho (v_t + v v_x) - p_x`
/// * `f3 = [p / (gamma - 1) + rho v^2 / 2]_t + [v (p / (gamma - 1) + rho v^2 / 2 + p)]_x`
///
/// `f = mean (f1 + f2 + f3)^2`. Initial terms compare with stored targets;
/// boundary terms penalize the difference across each periodic pair.
pub fn cfd_loss(
    fields: &CfdFields<'_>,
    sets: &PinnPointSets,
    c: &PdeConstants,
    flags: LossFlags,
    mode: Mode,
) -> Result<LossGraph> {
    check_dim(sets, 2)?;
    if !(c.gamma > 1.0) {
        return Err(LossError::Config("gamma must exceed 1".into()));
    }
    if sets.periodic_pairs.is_empty() {
        return Err(LossError::EmptyPointSet("periodic_pairs"));
    }
    let mut b = Builder::new(mode);
    let xf = b.points("X_f", &sets.collocation, "collocation")?;
    let xi = b.points("X_ic", &sets.initial, "initial")?;
    let left = pair_side(sets, true)?;
    let right = pair_side(sets, false)?;
    let xl = b.points("X_bc.left", &left, "boundary")?;
    let xr = b.points("X_bc.right", &right, "boundary")?;

    let heads: [(&str, &dyn Field); 3] = [("rho", fields.rho), ("v", fields.v), ("p", fields.p)];
    let rho = b.emit("rho", fields.rho, xf)?;
    let v = b.emit("v", fields.v, xf)?;
    let p = b.emit("p", fields.p, xf)?;
    let g = &mut b.g;

    let rho_t = partial(g, rho, xf, 1)?;
    let flux = g.mul(rho, v)?;
    let flux_x = partial(g, flux, xf, 0)?;
    let f1 = g.add(rho_t, flux_x)?;

    let dv = input_grad(g, v, xf)?;
    let vx = g.column(dv, 0)?;
    let vt = g.column(dv, 1)?;
    let px = partial(g, p, xf, 0)?;
    let vvx = g.mul(v, vx)?;
    let acc = g.add(vt, vvx)?;
    let inertia = g.mul(rho, acc)?;
    let f2 = if flags.corrected_momentum_sign {
        g.add(inertia, px)?
    } else {
        g.sub(inertia, px)?
    };

    let internal = g.scale(p, 1.0 / (c.gamma - 1.0))?;
    let v2 = g.square(v)?;
    let rv2 = g.mul(rho, v2)?;
    let kinetic = g.scale(rv2, 0.5)?;
    let energy = g.add(internal, kinetic)?;
    let energy_t = partial(g, energy, xf, 1)?;
    let ep = g.add(energy, p)?;
    let eflux = g.mul(v, ep)?;
    let eflux_x = partial(g, eflux, xf, 0)?;
    let f3 = g.add(energy_t, eflux_x)?;

    let f = if flags.per_residual_norm {
        let s1 = g.square(f1)?;
        let s2 = g.square(f2)?;
        let s3 = g.square(f3)?;
        let s = sum_nodes(g, &[s1, s2, s3])?;
        g.mean_all(s)?
    } else {
        let r = sum_nodes(g, &[f1, f2, f3])?;
        mean_square(g, r)?
    };

    let mut terms = vec![("f".to_string(), f)];
    let mut parts = vec![f];
    for (name, field) in heads {
        let y = b.target(&format!("Y_ic.{name}"), &sets.initial, name, "initial")?;
        let pred = b.emit(name, field, xi)?;
        let t = mse(&mut b.g, pred, y)?;
        terms.push((format!("IC_{}", cfd_suffix(name)), t));
        parts.push(t);
    }
    for (name, field) in heads {
        let l = b.emit(name, field, xl)?;
        let r = b.emit(name, field, xr)?;
        let t = mse(&mut b.g, l, r)?;
        terms.push((format!("BC_{}", cfd_suffix(name)), t));
        parts.push(t);
    }
    let total = sum_nodes(&mut b.g, &parts)?;
    let terms: Vec<(&str, NodeId)> = terms.iter().map(|(n, id)| (n.as_str(), *id)).collect();
    Ok(b.finish(terms, total))
}

fn cfd_suffix(field: &str) -> &'static str {
    match field {
        "rho" => "d",
        "v" => "v",
        _ => "p",
    }
}

fn pair_side(sets: &PinnPointSets, left: bool) -> Result<PointSet> {
    let mut out = PointSet::default();
    for &(a, bb) in &sets.periodic_pairs {
        let i = if left { a } else { bb };
        let c = sets
            .boundary
            .coords
            .get(i)
            .ok_or_else(|| LossError::Config(format!("periodic pair index {i} out of range")))?;
        out.coords.push(c.clone());
    }
    Ok(out)
}

/// Activator and inhibitor heads of the diffusion-reaction task.
pub struct DiffReactFields<'a> {
    pub u: &'a dyn Field,
    pub v: &'a dyn Field,
}

/// FitzHugh-Nagumo residuals on `(x, y, t)`:
///
/// * `f1 = u_t - D_u (u_xx + u_yy) - u + u^3 + k + v`
/// * `f2 = v_t - D_v (v_xx + v_yy) - u + v`
///
/// `f = mean (f1 + f2)^2` and the derivative boundary term
/// `BC = mean (u_x + v_x + u_y + u_y)^2` as printed. `IC_*` and `BC_*` are
/// mean squared errors against the stored reference values.
pub fn diffreact_loss(
    fields: &DiffReactFields<'_>,
    sets: &PinnPointSets,
    c: &PdeConstants,
    flags: LossFlags,
    mode: Mode,
) -> Result<LossGraph> {
    check_dim(sets, 3)?;
    let mut b = Builder::new(mode);
    let xf = b.points("X_f", &sets.collocation, "collocation")?;
    let xi = b.points("X_ic", &sets.initial, "initial")?;
    let xb = b.points("X_bc", &sets.boundary, "boundary")?;

    let u = b.emit("u", fields.u, xf)?;
    let v = b.emit("v", fields.v, xf)?;
    let g = &mut b.g;
    let second = |g: &mut Graph, h: NodeId, coeff: f64| -> Result<(NodeId, NodeId)> {
        let d = input_grad(g, h, xf)?;
        let hx = g.column(d, 0)?;
        let hy = g.column(d, 1)?;
        let ht = g.column(d, 2)?;
        let hxx = partial(g, hx, xf, 0)?;
        let hyy = partial(g, hy, xf, 1)?;
        let lap = g.add(hxx, hyy)?;
        let diff = g.scale(lap, coeff)?;
        Ok((ht, diff))
    };
    let (ut, du) = second(g, u, c.d_u)?;
    let (vt, dv) = second(g, v, c.d_v)?;

    let u3 = g.pow_const(u, 3.0)?;
    let a = g.sub(ut, du)?;
    let a = g.sub(a, u)?;
    let a = g.add(a, u3)?;
    let a = g.add_scalar(a, c.k)?;
    let f1 = g.add(a, v)?;
    let bb = g.sub(vt, dv)?;
    let bb = g.sub(bb, u)?;
    let f2 = g.add(bb, v)?;
    let f = if flags.per_residual_norm {
        let s1 = g.square(f1)?;
        let s2 = g.square(f2)?;
        let s = g.add(s1, s2)?;
        g.mean_all(s)?
    } else {
        let r = g.add(f1, f2)?;
        mean_square(g, r)?
    };

    let mut terms = vec![("f", f)];
    let mut parts = vec![f];
    for name in ["u", "v"] {
        let field = if name == "u" { fields.u } else { fields.v };
        let y = b.target(&format!("Y_ic.{name}"), &sets.initial, name, "initial")?;
        let pred = b.emit(name, field, xi)?;
        let t = mse(&mut b.g, pred, y)?;
        terms.push((if name == "u" { "IC_u" } else { "IC_v" }, t));
        parts.push(t);
    }

    let ub = b.emit("u", fields.u, xb)?;
    let vb = b.emit("v", fields.v, xb)?;
    let g = &mut b.g;
    let dub = input_grad(g, ub, xb)?;
    let dvb = input_grad(g, vb, xb)?;
    let ubx = g.column(dub, 0)?;
    let uby = g.column(dub, 1)?;
    let vbx = g.column(dvb, 0)?;
    let last = if flags.corrected_bc { g.column(dvb, 1)? } else { uby };
    let r = sum_nodes(g, &[ubx, vbx, uby, last])?;
    let bc = mean_square(g, r)?;
    terms.push(("BC", bc));
    parts.push(bc);

    for (name, pred) in [("u", ub), ("v", vb)] {
        let y = b.target(&format!("Y_bc.{name}"), &sets.boundary, name, "boundary")?;
        let t = mse(&mut b.g, pred, y)?;
        terms.push((if name == "u" { "BC_u" } else { "BC_v" }, t));
        parts.push(t);
    }
    let total = sum_nodes(&mut b.g, &parts)?;
    Ok(b.finish(terms, total))
}
