//! Differentiable computation graphs over dense tensors.
//!
//! A [`Graph`] is an append-only list of [`Node`]s in topological order.
//! Differentiation is a source transformation: [`Graph::grad`] appends the
//! reverse-mode adjoint computation as ordinary nodes, so the result can be
//! differentiated again to any order. Every derivative rule is written in
//! terms of the same operator set, e.g. `IRelu' = Relu`, `Relu' = Heaviside`,
//! `Tanh' = 1 - Tanh^2` and `sigmoid(x) = (1 + tanh(x/2)) / 2`.
//!
//! Broadcasting is explicit. Elementwise binary ops require identical
//! shapes; the builder inserts a [`Op::Broadcast`] node when one operand's
//! shape is a trailing suffix of the other's (a scalar is a suffix of every
//! shape). Any other combination is a shape error. [`Op::SumAxis`] reduces
//! the leading axis, which is exactly the adjoint of such a broadcast.

mod check;
mod eval;
mod grad;
pub mod scalar;

use std::collections::HashMap;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use check::{central_difference, check_grad, check_grad_order, nested_name, nested_sums, relative_error};
pub use eval::Binder;

use crate::error::GraphError;
use crate::tensor::{Shape, Tensor};

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Op {
    Var { name: String },
    Const { value: Tensor },
    Add,
    Sub,
    Neg,
    MulElem,
    MatMul { transpose_a: bool, transpose_b: bool },
    SumAll,
    /// Sum over the leading axis.
    SumAxis,
    /// Broadcast to the node's shape; the input shape is a trailing suffix.
    Broadcast,
    PowConst { exponent: f64 },
    Square,
    Tanh,
    Relu,
    IRelu,
    Softplus,
    ShiftedSoftplus,
    Silu,
    Heaviside,
    Reciprocal,
    Sqrt,
}

impl Op {
    pub const NAMES: [&'static str; 21] = [
        "Var",
        "Const",
        "Add",
        "Sub",
        "Neg",
        "MulElem",
        "MatMul",
        "SumAll",
        "SumAxis",
        "Broadcast",
        "PowConst",
        "Square",
        "Tanh",
        "Relu",
        "IRelu",
        "Softplus",
        "ShiftedSoftplus",
        "Silu",
        "Heaviside",
        "Reciprocal",
        "Sqrt",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Op::Var { .. } => "Var",
            Op::Const { .. } => "Const",
            Op::Add => "Add",
            Op::Sub => "Sub",
            Op::Neg => "Neg",
            Op::MulElem => "MulElem",
            Op::MatMul { .. } => "MatMul",
            Op::SumAll => "SumAll",
            Op::SumAxis => "SumAxis",
            Op::Broadcast => "Broadcast",
            Op::PowConst { .. } => "PowConst",
            Op::Square => "Square",
            Op::Tanh => "Tanh",
            Op::Relu => "Relu",
            Op::IRelu => "IRelu",
            Op::Softplus => "Softplus",
            Op::ShiftedSoftplus => "ShiftedSoftplus",
            Op::Silu => "Silu",
            Op::Heaviside => "Heaviside",
            Op::Reciprocal => "Reciprocal",
            Op::Sqrt => "Sqrt",
        }
    }

    fn is_unary_elementwise(&self) -> bool {
        matches!(
            self,
            Op::Neg
                | Op::PowConst { .. }
                | Op::Square
                | Op::Tanh
                | Op::Relu
                | Op::IRelu
                | Op::Softplus
                | Op::ShiftedSoftplus
                | Op::Silu
                | Op::Heaviside
                | Op::Reciprocal
                | Op::Sqrt
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Shape,
}

/// Hash-consing key; vars and non-scalar constants are never shared.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct InternKey {
    op: &'static str,
    attr: u64,
    inputs: Vec<NodeId>,
    shape: Shape,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(try_from = "GraphRepr", into = "GraphRepr")]
pub struct Graph {
    nodes: Vec<Node>,
    vars: IndexMap<String, NodeId>,
    outputs: IndexMap<String, NodeId>,
    interned: HashMap<InternKey, NodeId>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRepr {
    nodes: Vec<Node>,
    vars: IndexMap<String, NodeId>,
    outputs: IndexMap<String, NodeId>,
}

impl From<Graph> for GraphRepr {
    fn from(g: Graph) -> Self {
        GraphRepr {
            nodes: g.nodes,
            vars: g.vars,
            outputs: g.outputs,
        }
    }
}

impl TryFrom<GraphRepr> for Graph {
    type Error = GraphError;

    /// Replays every node through the checked builder so a loaded graph
    /// obeys the same invariants as a constructed one.
    fn try_from(repr: GraphRepr) -> Result<Self> {
        let mut g = Graph::new();
        for (pos, node) in repr.nodes.into_iter().enumerate() {
            if node.id.0 != pos {
                return Err(GraphError::Malformed(format!(
                    "node at position {pos} has id {}",
                    node.id
                )));
            }
            if let Some(bad) = node.inputs.iter().find(|i| i.0 >= pos) {
                return Err(GraphError::Malformed(format!(
                    "node {} references later node {bad}",
                    node.id
                )));
            }
            let shape = g.infer_shape(&node.op, &node.inputs, Some(&node.shape))?;
            if shape != node.shape {
                return Err(GraphError::Malformed(format!(
                    "node {} declares shape {} but its op yields {shape}",
                    node.id, node.shape
                )));
            }
            if let Op::Var { name } = &node.op {
                if g.vars.insert(name.clone(), node.id).is_some() {
                    return Err(GraphError::Malformed(format!("duplicate variable `{name}`")));
                }
            }
            // Push verbatim: ids must be preserved even where interning
            // would have merged nodes.
            if let Some(key) = Self::intern_key(&node.op, &node.inputs, &node.shape) {
                g.interned.entry(key).or_insert(node.id);
            }
            g.nodes.push(node);
        }
        if repr.vars != g.vars {
            return Err(GraphError::Malformed("variable table disagrees with nodes".into()));
        }
        for (name, id) in &repr.outputs {
            if id.0 >= g.nodes.len() {
                return Err(GraphError::Malformed(format!("output `{name}` references {id}")));
            }
        }
        g.outputs = repr.outputs;
        Ok(g)
    }
}

fn shape_err(op: &'static str, detail: String) -> GraphError {
    GraphError::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &Shape {
        &self.nodes[id.0].shape
    }

    pub fn vars(&self) -> &IndexMap<String, NodeId> {
        &self.vars
    }

    pub fn outputs(&self) -> &IndexMap<String, NodeId> {
        &self.outputs
    }

    pub fn var_id(&self, name: &str) -> Result<NodeId> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::UnknownVar(name.to_string()))
    }

    pub fn output_id(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::UnknownOutput(name.to_string()))
    }

    /// Names a node as an output; renaming an existing output rebinds it.
    pub fn set_output(&mut self, name: impl Into<String>, id: NodeId) {
        self.outputs.insert(name.into(), id);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serialization cannot fail")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Ids of every node `id` transitively depends on, including itself.
    pub fn ancestors(&self, id: NodeId) -> Vec<bool> {
        let mut mark = vec![false; id.0 + 1];
        mark[id.0] = true;
        for k in (0..=id.0).rev() {
            if mark[k] {
                for i in &self.nodes[k].inputs {
                    mark[i.0] = true;
                }
            }
        }
        mark
    }

    fn intern_key(op: &Op, inputs: &[NodeId], shape: &Shape) -> Option<InternKey> {
        let attr = match op {
            Op::Var { .. } => return None,
            Op::Const { value } => {
                if value.numel() != 1 {
                    return None;
                }
                value.data()[0].to_bits()
            }
            Op::MatMul {
                transpose_a,
                transpose_b,
            } => (*transpose_a as u64) | ((*transpose_b as u64) << 1),
            Op::PowConst { exponent } => exponent.to_bits(),
            _ => 0,
        };
        Some(InternKey {
            op: op.name(),
            attr,
            inputs: inputs.to_vec(),
            shape: shape.clone(),
        })
    }

    /// Output shape of `op` applied to `inputs`. `declared` is only consulted
    /// by ops whose shape is an attribute (vars, broadcasts).
    fn infer_shape(&self, op: &Op, inputs: &[NodeId], declared: Option<&Shape>) -> Result<Shape> {
        let arity = match op {
            Op::Var { .. } | Op::Const { .. } => 0,
            Op::Add | Op::Sub | Op::MulElem | Op::MatMul { .. } => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(shape_err(
                op.name(),
                format!("expected {arity} inputs, got {}", inputs.len()),
            ));
        }
        let sh = |k: usize| &self.nodes[inputs[k].0].shape;
        match op {
            Op::Var { .. } => declared
                .cloned()
                .ok_or_else(|| shape_err("Var", "variable without a shape".into())),
            Op::Const { value } => Ok(value.shape().clone()),
            Op::Add | Op::Sub | Op::MulElem => {
                if sh(0) != sh(1) {
                    return Err(shape_err(op.name(), format!("{} vs {}", sh(0), sh(1))));
                }
                Ok(sh(0).clone())
            }
            Op::MatMul {
                transpose_a,
                transpose_b,
            } => {
                let (a, b) = (sh(0), sh(1));
                if a.rank() != 2 || b.rank() != 2 {
                    return Err(shape_err("MatMul", format!("operands {a} and {b} must be rank 2")));
                }
                let (m, ka) = if *transpose_a { (a.0[1], a.0[0]) } else { (a.0[0], a.0[1]) };
                let (kb, n) = if *transpose_b { (b.0[1], b.0[0]) } else { (b.0[0], b.0[1]) };
                if ka != kb {
                    return Err(shape_err(
                        "MatMul",
                        format!("inner extents differ: {a} (t={transpose_a}) x {b} (t={transpose_b})"),
                    ));
                }
                Ok(Shape::new([m, n]))
            }
            Op::SumAll => Ok(Shape::scalar()),
            Op::SumAxis => {
                let s = sh(0);
                if s.rank() == 0 {
                    return Err(shape_err("SumAxis", "cannot reduce a scalar".into()));
                }
                Ok(Shape::new(&s.0[1..]))
            }
            Op::Broadcast => {
                let target = declared
                    .ok_or_else(|| shape_err("Broadcast", "missing target shape".into()))?;
                if !sh(0).is_suffix_of(target) {
                    return Err(shape_err(
                        "Broadcast",
                        format!("{} is not a trailing suffix of {target}", sh(0)),
                    ));
                }
                Ok(target.clone())
            }
            op if op.is_unary_elementwise() => Ok(sh(0).clone()),
            _ => unreachable!("all ops covered"),
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, declared: Option<Shape>) -> Result<NodeId> {
        let shape = self.infer_shape(&op, &inputs, declared.as_ref())?;
        let key = Self::intern_key(&op, &inputs, &shape);
        if let Some(key) = &key {
            if let Some(&id) = self.interned.get(key) {
                return Ok(id);
            }
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            id,
            op,
            inputs,
            shape,
        });
        if let Some(key) = key {
            self.interned.insert(key, id);
        }
        Ok(id)
    }

    /// Declares a variable, or returns the existing one with the same shape.
    pub fn var(&mut self, name: &str, shape: impl Into<Shape>) -> Result<NodeId> {
        let shape = shape.into();
        if let Some(&id) = self.vars.get(name) {
            let existing = self.shape(id);
            if *existing != shape {
                return Err(GraphError::VarRedeclared {
                    name: name.to_string(),
                    existing: existing.clone(),
                });
            }
            return Ok(id);
        }
        let id = self.push(
            Op::Var {
                name: name.to_string(),
            },
            Vec::new(),
            Some(shape),
        )?;
        self.vars.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const { value }, Vec::new(), None)
            .expect("constants always have a valid shape")
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// The uniform value of a constant (or broadcast constant) node.
    pub fn uniform_value(&self, id: NodeId) -> Option<f64> {
        let node = self.node(id);
        match &node.op {
            Op::Const { value } => {
                let first = value.data()[0];
                value.data().iter().all(|&v| v == first).then_some(first)
            }
            Op::Broadcast => self.uniform_value(node.inputs[0]),
            _ => None,
        }
    }

    /// Brings two operands to a common shape with an explicit broadcast.
    fn align(&mut self, op: &'static str, a: NodeId, b: NodeId) -> Result<(NodeId, NodeId)> {
        let (sa, sb) = (self.shape(a).clone(), self.shape(b).clone());
        if sa == sb {
            Ok((a, b))
        } else if sa.is_suffix_of(&sb) {
            Ok((self.broadcast(a, sb)?, b))
        } else if sb.is_suffix_of(&sa) {
            Ok((a, self.broadcast(b, sa)?))
        } else {
            Err(shape_err(op, format!("cannot broadcast {sa} against {sb}")))
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = self.align("Add", a, b)?;
        if self.uniform_value(a) == Some(0.0) {
            return Ok(b);
        }
        if self.uniform_value(b) == Some(0.0) {
            return Ok(a);
        }
        self.push(Op::Add, vec![a, b], None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = self.align("Sub", a, b)?;
        if self.uniform_value(b) == Some(0.0) {
            return Ok(a);
        }
        self.push(Op::Sub, vec![a, b], None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = self.align("MulElem", a, b)?;
        if self.uniform_value(a) == Some(1.0) {
            return Ok(b);
        }
        if self.uniform_value(b) == Some(1.0) {
            return Ok(a);
        }
        self.push(Op::MulElem, vec![a, b], None)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        if let Op::Neg = self.node(x).op {
            return Ok(self.node(x).inputs[0]);
        }
        self.push(Op::Neg, vec![x], None)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, transpose_a: bool, transpose_b: bool) -> Result<NodeId> {
        self.push(
            Op::MatMul {
                transpose_a,
                transpose_b,
            },
            vec![a, b],
            None,
        )
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::SumAll, vec![x], None)
    }

    pub fn sum_axis(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::SumAxis, vec![x], None)
    }

    pub fn broadcast(&mut self, x: NodeId, shape: impl Into<Shape>) -> Result<NodeId> {
        let shape = shape.into();
        if *self.shape(x) == shape {
            return Ok(x);
        }
        self.push(Op::Broadcast, vec![x], Some(shape))
    }

    pub fn pow_const(&mut self, x: NodeId, exponent: f64) -> Result<NodeId> {
        if exponent == 1.0 {
            return Ok(x);
        }
        if exponent == 2.0 {
            return self.square(x);
        }
        self.push(Op::PowConst { exponent }, vec![x], None)
    }

    pub fn unary(&mut self, op: Op, x: NodeId) -> Result<NodeId> {
        if !op.is_unary_elementwise() {
            return Err(shape_err(op.name(), "not a unary elementwise op".into()));
        }
        self.push(op, vec![x], None)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Square, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Tanh, x)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, x)
    }

    pub fn irelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::IRelu, x)
    }

    pub fn heaviside(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Heaviside, x)
    }

    pub fn reciprocal(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Reciprocal, x)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Sqrt, x)
    }

    /// `c * x`.
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let c = self.scalar(c);
        self.mul(c, x)
    }

    /// `x + c`.
    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let c = self.scalar(c);
        self.add(x, c)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.shape(x).numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `(1 + tanh(x/2)) / 2`, the logistic function in closed-set ops.
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let half = self.scale(x, 0.5)?;
        let t = self.tanh(half)?;
        let t = self.scale(t, 0.5)?;
        self.add_scalar(t, 0.5)
    }

    /// Column `j` of a rank-2 node as an `(n, 1)` node.
    pub fn column(&mut self, x: NodeId, j: usize) -> Result<NodeId> {
        let s = self.shape(x).clone();
        if s.rank() != 2 || j >= s.0[1] {
            return Err(shape_err("column", format!("column {j} of {s}")));
        }
        let mut e = vec![0.0; s.0[1]];
        e[j] = 1.0;
        let sel = self.constant(Tensor::column(e));
        self.matmul(x, sel, false, false)
    }
}
