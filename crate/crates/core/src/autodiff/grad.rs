//! Reverse-mode differentiation by graph transformation.

use super::{Graph, NodeId, Op, Result};
use crate::error::GraphError;
use crate::tensor::Tensor;

impl Graph {
    /// Returns a copy of the graph extended with the gradient of the scalar
    /// output `output` with respect to each variable in `wrt`. The new outputs
    /// are named `d<output>/d<var>` and carry the variable's shape.
    pub fn grad(&self, output: &str, wrt: &[&str]) -> Result<Graph> {
        let out = self.output_id(output)?;
        let vars = wrt
            .iter()
            .map(|w| self.var_id(w))
            .collect::<Result<Vec<_>>>()?;
        let mut g = self.clone();
        let grads = g.grad_nodes(out, &vars)?;
        for (name, id) in wrt.iter().zip(grads) {
            g.set_output(format!("d{output}/d{name}"), id);
        }
        Ok(g)
    }

    /// In-place form of [`Graph::grad`] working on node ids. Nodes that do
    /// not reach `output` get an explicit zero constant.
    pub fn grad_nodes(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let out_shape = self.shape(output).clone();
        if !out_shape.is_scalar_like() {
            let name = self
                .outputs
                .iter()
                .find(|(_, &id)| id == output)
                .map_or_else(|| output.to_string(), |(n, _)| n.clone());
            return Err(GraphError::NotScalar {
                name,
                shape: out_shape,
            });
        }
        let top = output.0;

        // Nodes on some path from a `wrt` node to `output`.
        let mut depends = vec![false; top + 1];
        for w in wrt {
            if w.0 <= top {
                depends[w.0] = true;
            }
        }
        for k in 0..=top {
            if !depends[k] && self.nodes[k].inputs.iter().any(|i| depends[i.0]) {
                depends[k] = true;
            }
        }
        let reaches = self.ancestors(output);
        let active: Vec<bool> = (0..=top).map(|k| depends[k] && reaches[k]).collect();

        let mut adjoint: Vec<Option<NodeId>> = vec![None; top + 1];
        if active[top] {
            adjoint[top] = Some(self.constant(Tensor::filled(out_shape, 1.0)));
        }
        for k in (0..=top).rev() {
            let Some(g) = adjoint[k] else { continue };
            if !active[k] {
                continue;
            }
            let node = self.nodes[k].clone();
            let want: Vec<bool> = node.inputs.iter().map(|i| active[i.0]).collect();
            let contributions = self.backprop(&node.op, k, &node.inputs, g, &want)?;
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                adjoint[input.0] = Some(match adjoint[input.0] {
                    Some(prev) => self.add(prev, c)?,
                    None => c,
                });
            }
        }

        wrt.iter()
            .map(|w| match adjoint.get(w.0).copied().flatten() {
                Some(a) => Ok(a),
                None => Ok(self.constant(Tensor::zeros(self.shape(*w).clone()))),
            })
            .collect()
    }

    /// Vector-Jacobian products of one node; `None` where no adjoint flows.
    fn backprop(
        &mut self,
        op: &Op,
        this: usize,
        inputs: &[NodeId],
        g: NodeId,
        want: &[bool],
    ) -> Result<Vec<Option<NodeId>>> {
        let y = NodeId(this);
        let x = inputs.first().copied();
        let one = |this: &mut Self, f: &dyn Fn(&mut Self, NodeId) -> Result<NodeId>| -> Result<Vec<Option<NodeId>>> {
            let x = x.expect("unary op has an input");
            Ok(vec![Some(f(this, x)?)])
        };
        match op {
            Op::Var { .. } | Op::Const { .. } => Ok(Vec::new()),
            Op::Add => Ok(vec![want[0].then_some(g), want[1].then_some(g)]),
            Op::Sub => {
                let b = if want[1] { Some(self.neg(g)?) } else { None };
                Ok(vec![want[0].then_some(g), b])
            }
            Op::Neg => one(self, &|s, _| s.neg(g)),
            Op::MulElem => {
                let (a, b) = (inputs[0], inputs[1]);
                let da = if want[0] { Some(self.mul(g, b)?) } else { None };
                let db = if want[1] { Some(self.mul(g, a)?) } else { None };
                Ok(vec![da, db])
            }
            Op::MatMul {
                transpose_a,
                transpose_b,
            } => {
                let (a, b) = (inputs[0], inputs[1]);
                let (ta, tb) = (*transpose_a, *transpose_b);
                // C = op(A) op(B); d op(A) = G op(B)^T, d op(B) = op(A)^T G.
                let da = if want[0] {
                    Some(if ta {
                        self.matmul(b, g, tb, true)?
                    } else {
                        self.matmul(g, b, false, !tb)?
                    })
                } else {
                    None
                };
                let db = if want[1] {
                    Some(if tb {
                        self.matmul(g, a, true, ta)?
                    } else {
                        self.matmul(a, g, !ta, false)?
                    })
                } else {
                    None
                };
                Ok(vec![da, db])
            }
            Op::SumAll | Op::SumAxis => {
                let shape = self.shape(inputs[0]).clone();
                one(self, &|s, _| s.broadcast(g, shape.clone()))
            }
            Op::Broadcast => {
                let target = self.shape(inputs[0]).clone();
                one(self, &|s, _| {
                    if target.rank() == 0 {
                        return s.sum_all(g);
                    }
                    let mut acc = g;
                    while s.shape(acc).rank() > target.rank() {
                        acc = s.sum_axis(acc)?;
                    }
                    Ok(acc)
                })
            }
            Op::PowConst { exponent } => {
                let p = *exponent;
                one(self, &|s, x| {
                    let d = s.pow_const(x, p - 1.0)?;
                    let d = s.scale(d, p)?;
                    s.mul(g, d)
                })
            }
            Op::Square => one(self, &|s, x| {
                let d = s.scale(x, 2.0)?;
                s.mul(g, d)
            }),
            Op::Tanh => one(self, &|s, _| {
                let y2 = s.square(y)?;
                let one = s.scalar(1.0);
                let d = s.sub(one, y2)?;
                s.mul(g, d)
            }),
            Op::Relu => one(self, &|s, x| {
                let d = s.heaviside(x)?;
                s.mul(g, d)
            }),
            Op::IRelu => one(self, &|s, x| {
                let d = s.relu(x)?;
                s.mul(g, d)
            }),
            Op::Heaviside => Ok(vec![None]),
            Op::Softplus | Op::ShiftedSoftplus => one(self, &|s, x| {
                let d = s.sigmoid(x)?;
                s.mul(g, d)
            }),
            Op::Silu => one(self, &|s, x| {
                // sigma + x sigma (1 - sigma)
                let sg = s.sigmoid(x)?;
                let one = s.scalar(1.0);
                let c = s.sub(one, sg)?;
                let xs = s.mul(x, sg)?;
                let t = s.mul(xs, c)?;
                let d = s.add(sg, t)?;
                s.mul(g, d)
            }),
            Op::Reciprocal => one(self, &|s, _| {
                let y2 = s.square(y)?;
                let t = s.mul(g, y2)?;
                s.neg(t)
            }),
            Op::Sqrt => one(self, &|s, _| {
                let r = s.reciprocal(y)?;
                let d = s.scale(r, 0.5)?;
                s.mul(g, d)
            }),
        }
    }
}
