//! Memoized forward evaluation.

use std::borrow::Cow;
use std::collections::HashMap;

use indexmap::IndexMap;

use super::{scalar, Graph, NodeId, Op, Result};
use crate::error::GraphError;
use crate::tensor::Tensor;

/// Source of variable values for evaluation.
pub trait Binder {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl Binder for HashMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Binder for IndexMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl<B: Binder + ?Sized> Binder for &B {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        (**self).lookup(name)
    }
}

/// Layered lookup: the first binder that knows the name wins.
impl Binder for [&dyn Binder] {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.iter().find_map(|b| b.lookup(name))
    }
}

impl<const N: usize> Binder for [&dyn Binder; N] {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.iter().find_map(|b| b.lookup(name))
    }
}

impl Graph {
    /// Evaluates every named output.
    pub fn eval<B: Binder + ?Sized>(&self, bindings: &B) -> Result<IndexMap<String, Tensor>> {
        let ids: Vec<NodeId> = self.outputs.values().copied().collect();
        let values = self.eval_nodes(bindings, &ids)?;
        Ok(self.outputs.keys().cloned().zip(values).collect())
    }

    /// Evaluates the named outputs, in the order given.
    pub fn eval_outputs<B: Binder + ?Sized>(&self, bindings: &B, names: &[&str]) -> Result<Vec<Tensor>> {
        let ids = names
            .iter()
            .map(|n| self.output_id(n))
            .collect::<Result<Vec<_>>>()?;
        self.eval_nodes(bindings, &ids)
    }

    /// Evaluates arbitrary nodes. Each required node is computed once and
    /// released after its last consumer; nothing outside the ancestry of
    /// `ids` is touched.
    pub fn eval_nodes<B: Binder + ?Sized>(&self, bindings: &B, ids: &[NodeId]) -> Result<Vec<Tensor>> {
        let Some(top) = ids.iter().map(|i| i.0).max() else {
            return Ok(Vec::new());
        };
        let mut needed = vec![false; top + 1];
        let mut keep = vec![false; top + 1];
        for id in ids {
            needed[id.0] = true;
            keep[id.0] = true;
        }
        let mut last_use = vec![0usize; top + 1];
        for k in (0..=top).rev() {
            if needed[k] {
                for i in &self.nodes[k].inputs {
                    if !needed[i.0] {
                        needed[i.0] = true;
                        last_use[i.0] = k;
                    }
                }
            }
        }

        let mut slots: Vec<Option<Cow<'_, Tensor>>> = vec![None; top + 1];
        for k in 0..=top {
            if !needed[k] {
                continue;
            }
            let node = &self.nodes[k];
            let value: Cow<'_, Tensor> = match &node.op {
                Op::Var { name } => {
                    let t = bindings
                        .lookup(name)
                        .ok_or_else(|| GraphError::MissingBinding(name.clone()))?;
                    if t.shape() != &node.shape {
                        return Err(GraphError::BindingShape {
                            name: name.clone(),
                            expected: node.shape.clone(),
                            got: t.shape().clone(),
                        });
                    }
                    Cow::Borrowed(t)
                }
                Op::Const { value } => Cow::Borrowed(value),
                op => {
                    let arg = |j: usize| -> &Tensor { slots[node.inputs[j].0].as_deref().expect("input evaluated") };
                    Cow::Owned(apply(op, node, arg))
                }
            };
            if !value.is_finite() {
                return Err(GraphError::NonFinite {
                    node: node.id,
                    op: node.op.name(),
                });
            }
            slots[k] = Some(value);
            for i in &node.inputs {
                if last_use[i.0] == k && !keep[i.0] {
                    slots[i.0] = None;
                }
            }
        }
        Ok(ids
            .iter()
            .map(|id| slots[id.0].as_deref().expect("requested node evaluated").clone())
            .collect())
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn apply<'a>(op: &Op, node: &super::Node, arg: impl Fn(usize) -> &'a Tensor) -> Tensor {
    let data = match op {
        Op::Add => zip_with(arg(0), arg(1), |x, y| x + y),
        Op::Sub => zip_with(arg(0), arg(1), |x, y| x - y),
        Op::MulElem => zip_with(arg(0), arg(1), |x, y| x * y),
        Op::Neg => arg(0).data().iter().map(|x| -x).collect(),
        Op::MatMul {
            transpose_a,
            transpose_b,
        } => matmul(arg(0), arg(1), *transpose_a, *transpose_b),
        Op::SumAll => vec![arg(0).data().iter().sum()],
        Op::SumAxis => {
            let x = arg(0);
            let inner = node.shape.numel();
            let mut out = vec![0.0; inner];
            for chunk in x.data().chunks_exact(inner) {
                for (o, v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            out
        }
        Op::Broadcast => {
            let x = arg(0).data();
            let n = node.shape.numel();
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                out.extend_from_slice(x);
            }
            out
        }
        Op::PowConst { exponent } => {
            let p = *exponent;
            if p.fract() == 0.0 && p.abs() < i32::MAX as f64 {
                let p = p as i32;
                arg(0).data().iter().map(|x| x.powi(p)).collect()
            } else {
                arg(0).data().iter().map(|x| x.powf(p)).collect()
            }
        }
        Op::Square => arg(0).data().iter().map(|x| x * x).collect(),
        Op::Tanh => arg(0).data().iter().map(|x| x.tanh()).collect(),
        Op::Relu => arg(0).data().iter().map(|&x| scalar::relu(x)).collect(),
        Op::IRelu => arg(0).data().iter().map(|&x| scalar::irelu(x)).collect(),
        Op::Softplus => arg(0).data().iter().map(|&x| scalar::softplus(x)).collect(),
        Op::ShiftedSoftplus => arg(0)
            .data()
            .iter()
            .map(|&x| scalar::shifted_softplus(x))
            .collect(),
        Op::Silu => arg(0).data().iter().map(|&x| scalar::silu(x)).collect(),
        Op::Heaviside => arg(0).data().iter().map(|&x| scalar::heaviside(x)).collect(),
        Op::Reciprocal => arg(0).data().iter().map(|x| 1.0 / x).collect(),
        Op::Sqrt => arg(0).data().iter().map(|x| x.sqrt()).collect(),
        Op::Var { .. } | Op::Const { .. } => unreachable!("leaves are not computed"),
    };
    Tensor::new(node.shape.clone(), data).expect("kernel output matches inferred shape")
}

fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Vec<f64> {
    let (ar, ac) = (a.shape().dims()[0], a.shape().dims()[1]);
    let (br, bc) = (b.shape().dims()[0], b.shape().dims()[1]);
    let (m, k, rsa, csa) = if ta { (ac, ar, 1, ac) } else { (ar, ac, ac, 1) };
    let (n, rsb, csb) = if tb { (br, 1, bc) } else { (bc, bc, 1) };
    let mut c = vec![0.0; m * n];
    // SAFETY: the strides describe the row-major buffers of `a`, `b` and `c`
    // with the extents checked at graph construction.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            rsa as isize,
            csa as isize,
            b.data().as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}
