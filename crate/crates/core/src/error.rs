use thiserror::Error;

use crate::autodiff::NodeId;
use crate::tensor::Shape;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape}")]
    LengthMismatch { shape: Shape, len: usize },
    #[error("shape {0} has a zero extent")]
    ZeroExtent(Shape),
    #[error("rows have different lengths")]
    RaggedRows,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("no binding for variable `{0}`")]
    MissingBinding(String),
    #[error("binding for `{name}` has shape {got}, expected {expected}")]
    BindingShape {
        name: String,
        expected: Shape,
        got: Shape,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: NodeId, op: &'static str },
    #[error("differentiated output `{name}` has shape {shape}; a scalar is required")]
    NotScalar { name: String, shape: Shape },
    #[error("unknown variable `{0}`")]
    UnknownVar(String),
    #[error("unknown output `{0}`")]
    UnknownOutput(String),
    #[error("variable `{name}` already declared with shape {existing}")]
    VarRedeclared { name: String, existing: Shape },
    #[error("malformed graph: {0}")]
    Malformed(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
