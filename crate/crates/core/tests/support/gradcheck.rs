//! Finite-difference oracle for transformed-graph derivatives of orders one
//! to three. Shared by the core tests and the acceptance suite.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use dctrain::autodiff::check_grad_order;
use dctrain::nn::{Activation, Mlp, MlpConfig, Mode};
use dctrain::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCES: [f64; 3] = [1e-5, 1e-4, 1e-3];
/// Step for every order; truncation error stays near 1e-10 and roundoff of
/// the differenced sums near 1e-11.
pub const EPS: f64 = 1e-5;

/// Points sampled for a case avoid the kinks of non-smooth ops by this margin.
const KINK_MARGIN: f64 = 1e-2;

/// Input range of a case.
#[derive(Clone, Copy)]
pub enum Domain {
    /// Uniform on `[-2, 2]`.
    Any,
    /// Uniform on `[-2, 2]` with `|x| >= KINK_MARGIN`.
    AwayFromZero,
    /// Uniform on `[0.5, 2]`.
    Positive,
}

impl Domain {
    fn draw(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Domain::Any => rng.gen_range(-2.0..2.0),
            Domain::AwayFromZero => loop {
                let x: f64 = rng.gen_range(-2.0..2.0);
                if x.abs() >= KINK_MARGIN {
                    return x;
                }
            },
            Domain::Positive => rng.gen_range(0.5..2.0),
        }
    }
}

/// Scalar output `y` of a single variable `x` of shape `(4, 3)`.
pub struct OpCase {
    pub name: &'static str,
    pub graph: Graph,
    pub domain: Domain,
}

type Build = fn(&mut Graph, NodeId) -> NodeId;

fn case(name: &'static str, domain: Domain, build: Build) -> OpCase {
    let mut g = Graph::new();
    let x = g.var("x", [4, 3]).unwrap();
    let y = build(&mut g, x);
    let y = if g.shape(y).numel() == 1 && g.shape(y).rank() == 0 {
        y
    } else {
        g.sum_all(y).unwrap()
    };
    g.set_output("y", y);
    OpCase { name, graph: g, domain }
}

fn unary(g: &mut Graph, x: NodeId, op: dctrain::Op) -> NodeId {
    g.unary(op, x).unwrap()
}

/// One case per operator; together they contain every op in the closed set.
pub fn op_cases() -> Vec<OpCase> {
    use dctrain::Op;
    vec![
        case("Add+Broadcast", Domain::Any, |g, x| {
            let b = g.constant(Tensor::new([3], vec![0.3, -0.2, 0.1]).unwrap());
            let s = g.add(x, b).unwrap();
            g.tanh(s).unwrap()
        }),
        case("Sub", Domain::Any, |g, x| {
            let c = g.scalar(0.4);
            let s = g.sub(x, c).unwrap();
            g.tanh(s).unwrap()
        }),
        case("Neg+PowConst", Domain::Positive, |g, x| {
            let p = g.pow_const(x, 3.5).unwrap();
            g.neg(p).unwrap()
        }),
        case("MulElem", Domain::Any, |g, x| {
            let t = g.tanh(x).unwrap();
            g.mul(x, t).unwrap()
        }),
        case("MatMul", Domain::Any, |g, x| {
            let w = g.constant(
                Tensor::new([2, 3], vec![0.5, -0.3, 0.8, 0.2, 0.7, -0.6]).unwrap(),
            );
            let z = g.matmul(x, w, false, true).unwrap();
            let z = g.tanh(z).unwrap();
            // x^T x exercises the other transpose path.
            let xtx = g.matmul(x, x, true, false).unwrap();
            let xtx = g.tanh(xtx).unwrap();
            let a = g.sum_all(z).unwrap();
            let b = g.sum_all(xtx).unwrap();
            g.add(a, b).unwrap()
        }),
        case("SumAxis", Domain::Any, |g, x| {
            let s = g.sum_axis(x).unwrap();
            g.tanh(s).unwrap()
        }),
        case("Square", Domain::Any, |g, x| {
            let t = g.tanh(x).unwrap();
            g.square(t).unwrap()
        }),
        case("Tanh", Domain::Any, |g, x| g.tanh(x).unwrap()),
        case("Relu", Domain::AwayFromZero, |g, x| {
            let r = g.relu(x).unwrap();
            let s = g.tanh(x).unwrap();
            g.mul(r, s).unwrap()
        }),
        case("IRelu", Domain::AwayFromZero, |g, x| {
            let r = g.irelu(x).unwrap();
            let s = g.tanh(x).unwrap();
            g.mul(r, s).unwrap()
        }),
        case("Softplus", Domain::Any, |g, x| unary(g, x, Op::Softplus)),
        case("ShiftedSoftplus", Domain::Any, |g, x| unary(g, x, Op::ShiftedSoftplus)),
        case("Silu", Domain::Any, |g, x| unary(g, x, Op::Silu)),
        case("Heaviside", Domain::AwayFromZero, |g, x| {
            let h = g.heaviside(x).unwrap();
            let s = g.tanh(x).unwrap();
            g.mul(h, s).unwrap()
        }),
        case("Reciprocal", Domain::Positive, |g, x| g.reciprocal(x).unwrap()),
        case("Sqrt", Domain::Positive, |g, x| g.sqrt(x).unwrap()),
    ]
}

/// Operator names present in a graph, including everything its gradient
/// graphs introduce.
pub fn op_names(g: &Graph) -> BTreeSet<&'static str> {
    g.nodes().iter().map(|n| n.op.name()).collect()
}

/// Maximum relative error of `case` at `points` random points, per order.
pub fn check_case(case: &OpCase, points: usize, seed: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..points {
        let data: Vec<f64> = (0..12).map(|_| case.domain.draw(&mut rng)).collect();
        let point: HashMap<String, Tensor> =
            [("x".to_string(), Tensor::new([4, 3], data).unwrap())].into();
        for (k, w) in worst.iter_mut().enumerate() {
            let e = check_grad_order(&case.graph, "y", "x", &point, EPS, k + 1).unwrap();
            *w = w.max(e);
        }
    }
    worst
}

fn mixed(hidden: Vec<usize>, acts: [Activation; 2], seed: u64) -> MlpConfig {
    MlpConfig {
        layer_activations: Some(acts.to_vec()),
        ..MlpConfig::new(2, hidden, 1, acts[0]).with_seed(seed)
    }
}

/// The random networks the oracle covers; between them every activation
/// appears once.
pub fn mlp_configs() -> Vec<MlpConfig> {
    vec![
        mixed(vec![40, 40], [Activation::Tanh, Activation::Relu], 11),
        mixed(vec![24, 24], [Activation::IRelu, Activation::ShiftedSoftplus], 12),
        mixed(vec![16, 16], [Activation::Silu, Activation::Softplus], 13),
    ]
}

/// Pre-activations of every hidden unit, batch norm off.
fn preactivations(m: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut all = Vec::new();
    let n = m.layers().len();
    for (i, l) in m.layers().iter().enumerate().take(n - 1) {
        let (out, inp) = (l.weight.shape().dims()[0], l.weight.shape().dims()[1]);
        let z: Vec<f64> = (0..out)
            .map(|o| l.bias.data()[o] + (0..inp).map(|j| l.weight.data()[o * inp + j] * h[j]).sum::<f64>())
            .collect();
        all.extend(&z);
        h = z.iter().map(|&v| m.config().activation_of(i).apply(v)).collect();
    }
    all
}

/// Graph with variable `x` of shape `(rows, 2)`, output `y = sum(mlp(x))`,
/// and the parameters bound from the model.
pub fn mlp_graph(m: &Mlp, rows: usize) -> Graph {
    let mut g = Graph::new();
    let x = g.var("x", [rows, m.config().input_dim]).unwrap();
    let f = m.forward(&mut g, x, "", Mode::Eval).unwrap();
    let y = g.sum_all(f.output).unwrap();
    g.set_output("y", y);
    g
}

/// Worst relative error per order for input derivatives of `cfg`, plus the
/// worst error of the first-layer weight gradient of the second-order sum.
pub fn check_mlp(cfg: &MlpConfig, points: usize, seed: u64) -> ([f64; 3], f64) {
    const ROWS: usize = 3;
    let m = Mlp::build(cfg.clone()).unwrap();
    let g = mlp_graph(&m, ROWS);
    let mixed = dctrain::autodiff::nested_sums(&g, "y", "x", 2).unwrap();
    let smooth = (0..cfg.hidden.len())
        .all(|i| !matches!(cfg.activation_of(i), Activation::IRelu | Activation::Relu));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    let mut worst_mixed = 0.0f64;
    let mut done = 0;
    while done < points {
        let data: Vec<f64> = (0..ROWS * 2).map(|_| rng.gen_range(-1.5..1.5)).collect();
        if !smooth {
            let near_kink = data
                .chunks(2)
                .any(|r| preactivations(&m, r).iter().any(|z| z.abs() < KINK_MARGIN));
            if near_kink {
                continue;
            }
        }
        let mut point = m.state("");
        point.insert("x".into(), Tensor::new([ROWS, 2], data).unwrap());
        for (k, w) in worst.iter_mut().enumerate() {
            *w = w.max(check_grad_order(&g, "y", "x", &point, EPS, k + 1).unwrap());
        }
        let e = dctrain::autodiff::check_grad(&mixed, "y^2", "l0.weight", &point, EPS).unwrap();
        worst_mixed = worst_mixed.max(e);
        done += 1;
    }
    (worst, worst_mixed)
}
