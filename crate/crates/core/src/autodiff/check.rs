//! Finite-difference validation of graph gradients.

use std::collections::HashMap;

use super::{Binder, Graph, Result};
use crate::error::GraphError;
use crate::tensor::Tensor;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences of the scalar output `output` with respect to every
/// component of variable `wrt`, all other bindings held fixed.
pub fn central_difference<B: Binder + ?Sized>(
    graph: &Graph,
    output: &str,
    wrt: &str,
    point: &B,
    eps: f64,
) -> Result<Tensor> {
    let out = graph.output_id(output)?;
    let var = graph.var_id(wrt)?;
    let base = point
        .lookup(wrt)
        .ok_or_else(|| GraphError::MissingBinding(wrt.to_string()))?
        .clone();
    if base.shape() != graph.shape(var) {
        return Err(GraphError::BindingShape {
            name: wrt.to_string(),
            expected: graph.shape(var).clone(),
            got: base.shape().clone(),
        });
    }
    let mut probe: HashMap<String, Tensor> = HashMap::from([(wrt.to_string(), base.clone())]);
    let f = |probe: &HashMap<String, Tensor>| -> Result<f64> {
        let layered: [&dyn Binder; 2] = [probe, &point];
        let v = graph.eval_nodes(&layered[..], &[out])?;
        v[0].item().ok_or_else(|| GraphError::NotScalar {
            name: output.to_string(),
            shape: v[0].shape().clone(),
        })
    };
    let mut grad = Vec::with_capacity(base.numel());
    for j in 0..base.numel() {
        let x0 = base.data()[j];
        probe.get_mut(wrt).unwrap().data_mut()[j] = x0 + eps;
        let hi = f(&probe)?;
        probe.get_mut(wrt).unwrap().data_mut()[j] = x0 - eps;
        let lo = f(&probe)?;
        probe.get_mut(wrt).unwrap().data_mut()[j] = x0;
        grad.push((hi - lo) / (2.0 * eps));
    }
    Ok(Tensor::new(base.shape().clone(), grad)?)
}

/// Maximum component-wise [`relative_error`] between the transformed-graph
/// gradient and central differences with step `eps`.
pub fn check_grad<B: Binder + ?Sized>(
    graph: &Graph,
    output: &str,
    wrt: &str,
    point: &B,
    eps: f64,
) -> Result<f64> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let extended = graph.grad(output, &[wrt])?;
    let analytic = extended.eval_outputs(point, &[&format!("d{output}/d{wrt}")])?;
    let numeric = central_difference(graph, output, wrt, point, eps)?;
    Ok(analytic[0]
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Name of the `k`-th nested sum produced by [`nested_sums`].
pub fn nested_name(output: &str, k: usize) -> String {
    if k == 0 {
        output.to_string()
    } else {
        format!("{output}^{k}")
    }
}

/// Extends `graph` with outputs `<output>^1 ..= <output>^order`, each the
/// sum of the gradient of the previous one with respect to `wrt`. For an
/// elementwise function the gradient of `<output>^(k-1)` holds the `k`-th
/// derivative at every component.
pub fn nested_sums(graph: &Graph, output: &str, wrt: &str, order: usize) -> Result<Graph> {
    let mut g = graph.clone();
    let var = g.var_id(wrt)?;
    let mut prev = g.output_id(output)?;
    for k in 1..=order {
        let d = g.grad_nodes(prev, &[var])?.remove(0);
        let s = g.sum_all(d)?;
        g.set_output(nested_name(output, k), s);
        prev = s;
    }
    Ok(g)
}

/// Order-`order` check: the gradient of `<output>^(order-1)` against
/// central differences of that same output.
pub fn check_grad_order<B: Binder + ?Sized>(
    graph: &Graph,
    output: &str,
    wrt: &str,
    point: &B,
    eps: f64,
    order: usize,
) -> Result<f64> {
    assert!(order >= 1, "order starts at one");
    let g = nested_sums(graph, output, wrt, order - 1)?;
    check_grad(&g, &nested_name(output, order - 1), wrt, point, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube() -> Graph {
        let mut g = Graph::new();
        let x = g.var("x", []).unwrap();
        let y = g.pow_const(x, 3.0).unwrap();
        g.set_output("y", y);
        g
    }

    #[test]
    fn cube_at_two() {
        let p: HashMap<String, Tensor> = [("x".to_string(), Tensor::scalar(2.0))].into();
        let err = check_grad(&cube(), "y", "x", &p, 1e-5).unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn relu_locally_linear() {
        let mut g = Graph::new();
        let x = g.var("x", []).unwrap();
        let y = g.relu(x).unwrap();
        g.set_output("y", y);
        let p: HashMap<String, Tensor> = [("x".to_string(), Tensor::scalar(0.5))].into();
        assert!(check_grad(&g, "y", "x", &p, 1e-5).unwrap() < 1e-9);
    }

    #[test]
    fn third_order_tanh() {
        let mut g = Graph::new();
        let x = g.var("x", []).unwrap();
        let y = g.tanh(x).unwrap();
        g.set_output("y", y);
        let p: HashMap<String, Tensor> = [("x".to_string(), Tensor::scalar(0.3))].into();
        assert!(check_grad_order(&g, "y", "x", &p, 1e-5, 3).unwrap() < 1e-3);
        let n = nested_sums(&g, "y", "x", 3).unwrap();
        let t = 0.3f64.tanh();
        let third = n.grad("y^2", &["x"]).unwrap();
        let v = third.eval_outputs(&p, &["dy^2/dx"]).unwrap()[0].item().unwrap();
        // d3/dx3 tanh = -2 sech^2 (1 - 3 tanh^2)
        let want = -2.0 * (1.0 - t * t) * (1.0 - 3.0 * t * t);
        assert!((v - want).abs() < 1e-14, "{v} vs {want}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
    }
}
