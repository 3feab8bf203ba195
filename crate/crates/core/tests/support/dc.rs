//! Oracles for the loss builders and the reference solver. Shared by the
//! core tests and the acceptance suite.

#![allow(dead_code)]

use dctrain::autodiff::{check_grad, Binder};
use dctrain::dcloss::{
    diffreact_loss, energy_force_loss, pes_bindings, DcWeights, DiffReactFields, Head, LossFlags, LossGraph,
    PdeConstants,
};
use dctrain::nn::{Activation, Mlp, MlpConfig, Mode};
use dctrain::pde::{fhn_step, gen_diffreact, solve_diffreact, DiffReactParams, PesBatch};
use dctrain::Tensor;
use indexmap::IndexMap;

/// Evaluates named outputs of a loss graph with its data plus `extra`.
pub fn eval_terms(lg: &LossGraph, extra: &IndexMap<String, Tensor>, names: &[&str]) -> Vec<f64> {
    let binders: [&dyn Binder; 2] = [&lg.data, extra];
    lg.graph
        .eval_outputs(&binders[..], names)
        .unwrap()
        .into_iter()
        .map(|t| t.item().unwrap_or(f64::NAN))
        .collect()
}

/// `(pred, force, total)` of the energy/force loss on `batch` with labels
/// divided by `c`.
pub fn pes_terms(m: &Mlp, batch: &PesBatch, weights: DcWeights, c: f64) -> [f64; 3] {
    let lg = energy_force_loss(m, batch.x.shape().dims()[0], weights, Mode::Eval).unwrap();
    let mut b = m.state("energy.");
    b.extend(pes_bindings(batch, c).unwrap());
    let v = eval_terms(&lg, &b, &["pred", "force", "total"]);
    [v[0], v[1], v[2]]
}

/// Loss terms with the labels pre-divided by hand and `C = 1`.
pub fn pes_terms_predivided(m: &Mlp, batch: &PesBatch, weights: DcWeights, c: f64) -> [f64; 3] {
    let manual = PesBatch {
        x: batch.x.clone(),
        energy: batch.energy.map(|e| e / c),
        force: batch.force.map(|f| f / c),
    };
    pes_terms(m, &manual, weights, 1.0)
}

/// Predicted forces at `points` through the loss graph's `force_pred`.
pub fn predicted_forces(m: &Mlp, points: &[Vec<f64>]) -> Tensor {
    let n = points.len();
    let d = points[0].len();
    let lg = energy_force_loss(m, n, DcWeights::default(), Mode::Eval).unwrap();
    let mut b = m.state("energy.");
    b.insert("X".into(), Tensor::from_rows(points).unwrap());
    b.insert("E".into(), Tensor::zeros([n, 1]));
    b.insert("F".into(), Tensor::zeros([n, d]));
    lg.graph.eval_outputs(&b, &["force_pred"]).unwrap().remove(0)
}

/// Closed 64-segment polyline around an ellipse with a wobble, integrated
/// with Simpson's rule per segment. Returns `(|sum F.dx|, path length, max |F|)`.
pub fn loop_integral(m: &Mlp, center: [f64; 2], radius: f64) -> (f64, f64, f64) {
    const SEGMENTS: usize = 64;
    let vertex = |k: usize| {
        let a = std::f64::consts::TAU * k as f64 / SEGMENTS as f64;
        let r = radius * (1.0 + 0.2 * (3.0 * a).sin());
        vec![center[0] + 1.3 * r * a.cos(), center[1] + r * a.sin()]
    };
    let mut pts = Vec::with_capacity(2 * SEGMENTS + 1);
    for k in 0..SEGMENTS {
        let (a, b) = (vertex(k), vertex(k + 1));
        pts.push(a.clone());
        pts.push(vec![0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
    }
    pts.push(vertex(SEGMENTS));
    let f = predicted_forces(m, &pts);
    let mut integral = 0.0;
    let mut length = 0.0;
    for k in 0..SEGMENTS {
        let (i0, im, i1) = (2 * k, 2 * k + 1, 2 * k + 2);
        let dx = [pts[i1][0] - pts[i0][0], pts[i1][1] - pts[i0][1]];
        length += (dx[0] * dx[0] + dx[1] * dx[1]).sqrt();
        let dot = |i: usize| f.row(i)[0] * dx[0] + f.row(i)[1] * dx[1];
        integral += (dot(i0) + 4.0 * dot(im) + dot(i1)) / 6.0;
    }
    let max_f = f.data().chunks(2).map(|r| r[0].hypot(r[1])).fold(0.0, f64::max);
    (integral.abs(), length, max_f)
}

/// Tiny diffusion-reaction problem for third-order gradient checks.
pub fn tiny_diffreact() -> DiffReactParams {
    DiffReactParams {
        nx: 8,
        ny: 8,
        dt: 1e-3,
        horizon: 0.05,
        d_u: DiffReactParams::default_du(),
        d_v: DiffReactParams::default_dv(),
        k: DiffReactParams::default_k(),
        save_every: 10,
        n_f: 6,
        n_ic: 4,
        n_bc: 4,
        n_test: 4,
        seed: 3,
    }
}

/// Worst relative error between the transformed-graph gradient of the
/// diffusion-reaction `f` term and central differences, over every parameter
/// of both heads. The term holds second input derivatives, so its parameter
/// gradient is a third-order derivative.
pub fn diffreact_param_check(activation: Activation, flags: LossFlags, eps: f64) -> f64 {
    let (sets, _) = gen_diffreact(&tiny_diffreact()).unwrap();
    let u = Mlp::build(MlpConfig::new(3, vec![6, 6], 1, activation).with_seed(21)).unwrap();
    let v = Mlp::build(MlpConfig::new(3, vec![6, 6], 1, activation).with_seed(22)).unwrap();
    let (hu, hv) = (Head::new(&u, "u."), Head::new(&v, "v."));
    let fields = DiffReactFields { u: &hu, v: &hv };
    let lg = diffreact_loss(&fields, &sets, &PdeConstants::default(), flags, Mode::Train).unwrap();
    let mut params = u.state("u.");
    params.extend(v.state("v."));
    let binders: [&dyn Binder; 2] = [&lg.data, &params];
    let mut worst = 0.0f64;
    for name in params.keys() {
        let e = check_grad(&lg.graph, "f", name, &binders[..], eps).unwrap();
        worst = worst.max(e);
    }
    worst
}

/// Cell trajectory of the reaction ODE `u' = u - u^3 - v`, `v' = u - v`
/// (no diffusion, `k = 0`) by classical RK4.
pub fn rk4_reaction(u0: f64, v0: f64, t: f64, steps: usize) -> (f64, f64) {
    let rhs = |u: f64, v: f64| (u - u * u * u - v, u - v);
    let h = t / steps as f64;
    let (mut u, mut v) = (u0, v0);
    for _ in 0..steps {
        let k1 = rhs(u, v);
        let k2 = rhs(u + 0.5 * h * k1.0, v + 0.5 * h * k1.1);
        let k3 = rhs(u + 0.5 * h * k2.0, v + 0.5 * h * k2.1);
        let k4 = rhs(u + h * k3.0, v + h * k3.1);
        u += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        v += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
    }
    (u, v)
}

/// Worst deviation of the explicit solver from the RK4 oracle at `dt/100`
/// for independent cells (zero diffusion, `k = 0`).
pub fn ode_limit_error(dt: f64, horizon: f64) -> f64 {
    let p = DiffReactParams {
        nx: 2,
        ny: 2,
        dt,
        horizon,
        d_u: 0.0,
        d_v: 0.0,
        k: 0.0,
        save_every: (horizon / dt).round() as usize,
        n_f: 1,
        n_ic: 1,
        n_bc: 1,
        n_test: 1,
        seed: 0,
    };
    let u0 = vec![0.5, -1.2, 0.1, 2.0];
    let v0 = vec![-0.2, 0.3, 0.0, -1.0];
    let field = solve_diffreact(u0.clone(), v0.clone(), &p).unwrap();
    let last = field.times.len() - 1;
    let steps = 100 * (horizon / dt).round() as usize;
    (0..4)
        .map(|i| {
            let (u, v) = rk4_reaction(u0[i], v0[i], field.times[last], steps);
            (field.u[last][i] - u).abs().max((field.v[last][i] - v).abs())
        })
        .fold(0.0, f64::max)
}

/// Largest drift of `sum u` and `sum v` over `steps` pure-diffusion steps.
pub fn diffusion_sum_drift(steps: usize) -> f64 {
    let p = DiffReactParams {
        nx: 16,
        ny: 12,
        dt: 1e-2,
        ..tiny_diffreact()
    };
    let (mut u, mut v) = dctrain::pde::diffreact_initial(&p);
    let (su, sv) = (u.iter().sum::<f64>(), v.iter().sum::<f64>());
    let mut worst = 0.0f64;
    for _ in 0..steps {
        fhn_step(&mut u, &mut v, &p, false);
        worst = worst
            .max((u.iter().sum::<f64>() - su).abs())
            .max((v.iter().sum::<f64>() - sv).abs());
    }
    worst
}

/// Maximum absolute value of a zero-initialized field after `horizon` with
/// `k = 0`.
pub fn zero_fixed_point(horizon: f64) -> f64 {
    let p = DiffReactParams {
        k: 0.0,
        horizon,
        ..tiny_diffreact()
    };
    let n = p.nx * p.ny;
    let field = solve_diffreact(vec![0.0; n], vec![0.0; n], &p).unwrap();
    field
        .u
        .iter()
        .chain(&field.v)
        .flatten()
        .fold(0.0f64, |m, x| m.max(x.abs()))
}
