//! Synthetic datasets with exact or numerically computed references.
//!
//! * Potential-energy-surface samples `(x, E, F)` from analytic potentials,
//!   with `F = -grad U` checked against central differences at generation.
//! * Advection point sets with an analytic travelling-wave solution.
//! * Compressible-flow point sets (initial data only, periodic pairs).
//! * FitzHugh-Nagumo diffusion-reaction point sets with an explicit
//!   finite-difference reference solution.
//!
//! Every generator is a pure function of its parameters and seed. Samples
//! draw from per-sample ChaCha streams keyed by `(seed, index)` so results
//! do not depend on how generation is scheduled.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use indexmap::IndexMap;
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("label {index} is not finite")]
    NonFiniteLabel { index: usize },
    #[error("no labels to rescale")]
    NoLabels,
    #[error("dataset is empty")]
    Empty,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("sample {index}: force disagrees with -grad U (relative error {error:e})")]
    ForceCheck { index: usize, error: f64 },
    #[error("explicit scheme unstable: dt = {dt} exceeds dx^2 / (4 max D) = {limit}")]
    Stability { dt: f64, limit: f64 },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

// ---------------------------------------------------------------------------
// Label rescaling

/// Power-of-ten constant dividing every label of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RescaleInfo {
    #[serde(rename = "C")]
    pub c: f64,
    pub max_abs_label: f64,
}

impl RescaleInfo {
    pub fn identity() -> Self {
        RescaleInfo {
            c: 1.0,
            max_abs_label: 0.0,
        }
    }
}

/// Smallest power of ten `C` with `max |label| <= C`; `C = 1` when every
/// label is zero. Signs are untouched by rescaling.
pub fn rescale_constant<I: IntoIterator<Item = f64>>(labels: I) -> Result<RescaleInfo, DataError> {
    let mut max = 0.0f64;
    let mut count = 0usize;
    for (index, l) in labels.into_iter().enumerate() {
        if !l.is_finite() {
            return Err(DataError::NonFiniteLabel { index });
        }
        max = max.max(l.abs());
        count += 1;
    }
    if count == 0 {
        return Err(DataError::NoLabels);
    }
    if max == 0.0 {
        return Ok(RescaleInfo {
            c: 1.0,
            max_abs_label: 0.0,
        });
    }
    let mut exp = max.log10().ceil() as i32;
    let pow = |e: i32| 10f64.powi(e);
    while pow(exp) < max {
        exp += 1;
    }
    while pow(exp - 1) >= max {
        exp -= 1;
    }
    Ok(RescaleInfo {
        c: pow(exp),
        max_abs_label: max,
    })
}

// ---------------------------------------------------------------------------
// Potential energy surfaces

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Potential {
    /// `U = x^T A x / 2` with symmetric positive-definite `A`.
    Quadratic { a: Vec<Vec<f64>> },
    /// `U = a (x_1^2 - b)^2 + sum_{j>1} c x_j^2`.
    DoubleWell { a: f64, b: f64, c: f64 },
    /// `U = -sum_k w_k exp(-|x - mu_k|^2 / (2 s_k^2))`.
    GaussianMix {
        weights: Vec<f64>,
        centers: Vec<Vec<f64>>,
        widths: Vec<f64>,
    },
}

impl Potential {
    pub fn validate(&self, dim: usize) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidParams(m));
        match self {
            Potential::Quadratic { a } => {
                if a.len() != dim || a.iter().any(|r| r.len() != dim) {
                    return bad(format!("A must be {dim}x{dim}"));
                }
                for i in 0..dim {
                    for j in 0..i {
                        if a[i][j] != a[j][i] {
                            return bad("A must be symmetric".into());
                        }
                    }
                }
                if !is_positive_definite(a) {
                    return bad("A is not positive definite".into());
                }
            }
            Potential::DoubleWell { a, b, c } => {
                if ![a, b, c].iter().all(|v| v.is_finite()) || *a <= 0.0 || *c < 0.0 {
                    return bad("double well needs a > 0, c >= 0".into());
                }
            }
            Potential::GaussianMix {
                weights,
                centers,
                widths,
            } => {
                if weights.is_empty() || weights.len() != centers.len() || weights.len() != widths.len() {
                    return bad("weights, centers and widths must have equal non-zero length".into());
                }
                if centers.iter().any(|c| c.len() != dim) {
                    return bad(format!("centers must have dimension {dim}"));
                }
                if widths.iter().any(|&s| !(s > 0.0)) {
                    return bad("widths must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        match self {
            Potential::Quadratic { a } => {
                let mut e = 0.0;
                for (i, row) in a.iter().enumerate() {
                    for (j, aij) in row.iter().enumerate() {
                        e += x[i] * aij * x[j];
                    }
                }
                0.5 * e
            }
            Potential::DoubleWell { a, b, c } => {
                let w = x[0] * x[0] - b;
                a * w * w + x[1..].iter().map(|v| c * v * v).sum::<f64>()
            }
            Potential::GaussianMix {
                weights,
                centers,
                widths,
            } => -weights
                .iter()
                .zip(centers)
                .zip(widths)
                .map(|((w, mu), s)| w * (-dist2(x, mu) / (2.0 * s * s)).exp())
                .sum::<f64>(),
        }
    }

    /// `-grad U`.
    pub fn force(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Potential::Quadratic { a } => a
                .iter()
                .map(|row| -row.iter().zip(x).map(|(aij, xj)| aij * xj).sum::<f64>())
                .collect(),
            Potential::DoubleWell { a, b, c } => {
                let mut f: Vec<f64> = x.iter().map(|v| -2.0 * c * v).collect();
                f[0] = -4.0 * a * x[0] * (x[0] * x[0] - b);
                f
            }
            Potential::GaussianMix {
                weights,
                centers,
                widths,
            } => {
                let mut f = vec![0.0; x.len()];
                for ((w, mu), s) in weights.iter().zip(centers).zip(widths) {
                    let s2 = s * s;
                    let e = w * (-dist2(x, mu) / (2.0 * s2)).exp();
                    for (fi, (xi, mi)) in f.iter_mut().zip(x.iter().zip(mu)) {
                        *fi -= e * (xi - mi) / s2;
                    }
                }
                f
            }
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn is_positive_definite(a: &[Vec<f64>]) -> bool {
    // Cholesky; fails on the first non-positive pivot.
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) {
                    return false;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PesGenerator {
    pub potential: Potential,
    pub n: usize,
    /// `[lo, hi]` per coordinate.
    pub domain: Vec<[f64; 2]>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PesSample {
    pub x: Vec<f64>,
    #[serde(rename = "E")]
    pub energy: f64,
    #[serde(rename = "F")]
    pub force: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PesDataset {
    pub generator: Option<PesGenerator>,
    pub samples: Vec<PesSample>,
}

/// Tensors for a slice of PES samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PesBatch {
    /// `(n, d)`.
    pub x: Tensor,
    /// `(n, 1)`.
    pub energy: Tensor,
    /// `(n, d)`.
    pub force: Tensor,
}

impl PesBatch {
    pub fn len(&self) -> usize {
        self.x.shape().dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.shape().dims()[1]
    }

    /// Labels divided by `c`; `c = 1` leaves every bit unchanged.
    pub fn rescaled(&self, c: f64) -> PesBatch {
        PesBatch {
            x: self.x.clone(),
            energy: self.energy.map(|e| e / c),
            force: self.force.map(|f| f / c),
        }
    }
}

impl PesDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    pub fn rescale_info(&self) -> Result<RescaleInfo, DataError> {
        rescale_constant(
            self.samples
                .iter()
                .flat_map(|s| std::iter::once(s.energy).chain(s.force.iter().copied())),
        )
    }

    pub fn batch(&self, idx: &[usize]) -> PesBatch {
        let d = self.dim();
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut e = Vec::with_capacity(idx.len());
        let mut f = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            let s = &self.samples[i];
            x.extend_from_slice(&s.x);
            e.push(s.energy);
            f.extend_from_slice(&s.force);
        }
        PesBatch {
            x: Tensor::new([idx.len(), d], x).expect("rows have the dataset dimension"),
            energy: Tensor::column(e),
            force: Tensor::new([idx.len(), d], f).expect("rows have the dataset dimension"),
        }
    }

    pub fn all(&self) -> PesBatch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// Population variance of all force components.
    pub fn force_variance(&self) -> f64 {
        let vals: Vec<f64> = self.samples.iter().flat_map(|s| s.force.iter().copied()).collect();
        variance(&vals)
    }

    pub fn energy_stats(&self) -> (f64, f64) {
        let vals: Vec<f64> = self.samples.iter().map(|s| s.energy).collect();
        (mean(&vals), variance(&vals))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        if let Some(gen) = &self.generator {
            let header = serde_json::json!({ "generator": gen });
            writeln!(out, "{header}").unwrap();
        }
        for s in &self.samples {
            writeln!(out, "{}", serde_json::to_string(s).expect("sample serializes")).unwrap();
        }
        out
    }

    /// Parses JSONL; an optional first line `{"generator": ...}` carries the
    /// generator descriptor.
    pub fn from_jsonl(text: &str) -> Result<Self, DataError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Header {
            generator: PesGenerator,
        }
        let mut ds = PesDataset::default();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if i == 0 && line.trim_start().starts_with("{\"generator\"") {
                let h: Header = serde_json::from_str(line).map_err(|e| DataError::Malformed {
                    line: line_no,
                    message: e.to_string(),
                })?;
                ds.generator = Some(h.generator);
                continue;
            }
            let s: PesSample = serde_json::from_str(line).map_err(|e| DataError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
            let d = *dim.get_or_insert(s.x.len());
            if s.x.is_empty() || s.x.len() != d || s.force.len() != d {
                return Err(DataError::Malformed {
                    line: line_no,
                    message: format!("expected x and F of dimension {d}"),
                });
            }
            ds.samples.push(s);
        }
        if ds.samples.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// Relative tolerance of the generation-time force check. The floor of one
/// in the denominator keeps near-zero forces from amplifying rounding noise.
const FORCE_CHECK_TOL: f64 = 1e-6;

fn fd_force(potential: &Potential, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|j| {
            let h = 1e-5 * x[j].abs().max(1.0);
            p[j] = x[j] + h;
            let hi = potential.energy(&p);
            p[j] = x[j] - h;
            let lo = potential.energy(&p);
            p[j] = x[j];
            -(hi - lo) / (2.0 * h)
        })
        .collect()
}

pub fn gen_pes(gen: &PesGenerator) -> Result<PesDataset, DataError> {
    let dim = gen.domain.len();
    if gen.n == 0 || dim == 0 {
        return Err(DataError::InvalidParams("need n > 0 and a non-empty domain".into()));
    }
    if gen.domain.iter().any(|[lo, hi]| !(lo < hi)) {
        return Err(DataError::InvalidParams("domain bounds must satisfy lo < hi".into()));
    }
    gen.potential.validate(dim)?;
    let mut samples = Vec::with_capacity(gen.n);
    for index in 0..gen.n {
        let mut rng = stream(gen.seed, index as u64);
        let x: Vec<f64> = gen.domain.iter().map(|[lo, hi]| rng.gen_range(*lo..*hi)).collect();
        let energy = gen.potential.energy(&x);
        let force = gen.potential.force(&x);
        let error = force_check_error(&gen.potential, &x);
        if error > FORCE_CHECK_TOL {
            return Err(DataError::ForceCheck { index, error });
        }
        samples.push(PesSample { x, energy, force });
    }
    Ok(PesDataset {
        generator: Some(gen.clone()),
        samples,
    })
}

// ---------------------------------------------------------------------------
// PINN point sets

/// Points with optional per-field target values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointSet {
    pub coords: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub targets: IndexMap<String, Vec<f64>>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// `(n, dim)` tensor; `None` for an empty set.
    pub fn tensor(&self) -> Option<Tensor> {
        (!self.coords.is_empty()).then(|| Tensor::from_rows(&self.coords).expect("rows share a dimension"))
    }

    pub fn target_tensor(&self, field: &str) -> Option<Tensor> {
        self.targets.get(field).map(|v| Tensor::column(v.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum PinnGenerator {
    Advection {
        params: AdvectionParams,
        solution: AdvectionSolution,
    },
    Cfd {
        params: CfdParams,
    },
    Diffreact {
        params: DiffReactParams,
    },
}

/// Collocation, initial, boundary and test points of one PINN problem.
/// Coordinates are ordered spatial first, time last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinnPointSets {
    pub generator: PinnGenerator,
    /// Field names in head order.
    pub fields: Vec<String>,
    /// Spatial `[lo, hi]` per axis.
    pub domain: Vec<[f64; 2]>,
    pub horizon: f64,
    pub collocation: PointSet,
    pub initial: PointSet,
    pub boundary: PointSet,
    /// Periodic pairs as `(left, right)` indices into `boundary`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub periodic_pairs: Vec<(usize, usize)>,
    /// Held-out points with reference values; empty when no reference exists.
    pub test: PointSet,
}

impl PinnPointSets {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("point sets serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let p: PinnPointSets = serde_json::from_str(text)?;
        if p.collocation.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Every target value in the initial, boundary and test sets.
    pub fn labels(&self) -> Vec<f64> {
        [&self.initial, &self.boundary, &self.test]
            .iter()
            .flat_map(|s| s.targets.values().flatten().copied())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Advection

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvectionParams {
    #[serde(default = "AdvectionParams::default_beta")]
    pub beta: f64,
    #[serde(default = "one")]
    pub length: f64,
    #[serde(default = "two")]
    pub horizon: f64,
    pub n_f: usize,
    pub n_ic: usize,
    pub n_bc: usize,
    #[serde(default = "AdvectionParams::default_test")]
    pub n_test: usize,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn two() -> f64 {
    2.0
}

impl AdvectionParams {
    fn default_beta() -> f64 {
        0.1
    }

    fn default_test() -> usize {
        1000
    }

    pub fn new(n_f: usize, n_ic: usize, n_bc: usize, seed: u64) -> Self {
        AdvectionParams {
            beta: Self::default_beta(),
            length: 1.0,
            horizon: 2.0,
            n_f,
            n_ic,
            n_bc,
            n_test: Self::default_test(),
            seed,
        }
    }
}

/// `psi(x, t) = u0(x - beta t)` with `u0(x) = sum_i sin(k_i x + phi_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvectionSolution {
    pub beta: f64,
    /// `(k, phi)` per wave.
    pub modes: Vec<(f64, f64)>,
}

impl AdvectionSolution {
    pub fn initial(&self, x: f64) -> f64 {
        self.modes.iter().map(|(k, p)| (k * x + p).sin()).sum()
    }

    pub fn value(&self, x: f64, t: f64) -> f64 {
        self.initial(x - self.beta * t)
    }

    pub fn d_dx(&self, x: f64, t: f64) -> f64 {
        let xi = x - self.beta * t;
        self.modes.iter().map(|(k, p)| k * (k * xi + p).cos()).sum()
    }

    pub fn d_dt(&self, x: f64, t: f64) -> f64 {
        -self.beta * self.d_dx(x, t)
    }

    /// `psi_t + beta psi_x`, zero up to rounding.
    pub fn residual(&self, x: f64, t: f64) -> f64 {
        self.d_dt(x, t) + self.beta * self.d_dx(x, t)
    }
}

pub fn gen_advection(p: &AdvectionParams) -> Result<(PinnPointSets, AdvectionSolution), DataError> {
    if p.n_f == 0 || p.n_ic == 0 || p.n_bc == 0 {
        return Err(DataError::InvalidParams("point counts must be positive".into()));
    }
    if p.n_bc % 2 != 0 {
        return Err(DataError::InvalidParams("n_bc counts periodic pairs' points and must be even".into()));
    }
    if !(p.length > 0.0 && p.horizon > 0.0 && p.beta.is_finite()) {
        return Err(DataError::InvalidParams("length and horizon must be positive".into()));
    }
    let (l, t_end) = (p.length, p.horizon);
    let mut rng = stream(p.seed, 0);
    let modes: Vec<(f64, f64)> = (0..2)
        .map(|_| {
            let m = rng.gen_range(1..=4) as f64;
            (m * 2.0 * PI / l, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let sol = AdvectionSolution { beta: p.beta, modes };

    let mut rng = stream(p.seed, 1);
    let collocation = PointSet {
        coords: (0..p.n_f)
            .map(|_| vec![rng.gen_range(0.0..=l), rng.gen_range(0.0..=t_end)])
            .collect(),
        targets: IndexMap::new(),
    };
    let mut rng = stream(p.seed, 2);
    let ic_x: Vec<f64> = (0..p.n_ic).map(|_| rng.gen_range(0.0..=l)).collect();
    let initial = PointSet {
        coords: ic_x.iter().map(|&x| vec![x, 0.0]).collect(),
        targets: IndexMap::from([("u".to_string(), ic_x.iter().map(|&x| sol.initial(x)).collect())]),
    };
    let mut rng = stream(p.seed, 3);
    let mut boundary = PointSet::default();
    let mut pairs = Vec::new();
    let mut bc_targets = Vec::new();
    for _ in 0..p.n_bc / 2 {
        let t = rng.gen_range(0.0..=t_end);
        let i = boundary.coords.len();
        for x in [0.0, l] {
            boundary.coords.push(vec![x, t]);
            bc_targets.push(sol.value(x, t));
        }
        pairs.push((i, i + 1));
    }
    boundary.targets.insert("u".into(), bc_targets);
    let mut rng = stream(p.seed, 4);
    let test_pts: Vec<(f64, f64)> = (0..p.n_test)
        .map(|_| (rng.gen_range(0.0..=l), rng.gen_range(0.0..=t_end)))
        .collect();
    let test = PointSet {
        coords: test_pts.iter().map(|&(x, t)| vec![x, t]).collect(),
        targets: IndexMap::from([(
            "u".to_string(),
            test_pts.iter().map(|&(x, t)| sol.value(x, t)).collect(),
        )]),
    };
    Ok((
        PinnPointSets {
            generator: PinnGenerator::Advection {
                params: p.clone(),
                solution: sol.clone(),
            },
            fields: vec!["u".into()],
            domain: vec![[0.0, l]],
            horizon: t_end,
            collocation,
            initial,
            boundary,
            periodic_pairs: pairs,
            test,
        },
        sol,
    ))
}

// ---------------------------------------------------------------------------
// Compressible flow

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfdParams {
    #[serde(default = "one")]
    pub length: f64,
    #[serde(default = "one")]
    pub horizon: f64,
    pub n_f: usize,
    pub n_ic: usize,
    pub n_bc: usize,
    pub seed: u64,
}

/// Initial profile: a base value plus a scaled superposition of four waves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveProfile {
    pub base: f64,
    /// `(amplitude, k, phi)` per wave.
    pub waves: Vec<(f64, f64, f64)>,
}

impl WaveProfile {
    pub fn value(&self, x: f64) -> f64 {
        self.base + self.waves.iter().map(|(a, k, p)| a * (k * x + p).sin()).sum::<f64>()
    }
}

/// Initial profiles for density, velocity and pressure.
pub fn cfd_initial_profiles(p: &CfdParams) -> [WaveProfile; 3] {
    let mut rng = stream(p.seed, 0);
    let mut profile = |base: f64, scale: f64| WaveProfile {
        base,
        waves: (0..4)
            .map(|_| {
                let m = rng.gen_range(1..=4) as f64;
                (
                    scale * rng.gen_range(0.0..1.0) / 4.0,
                    m * 2.0 * PI / p.length,
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect(),
    };
    // Density and pressure stay within [0.5, 1.5]; velocity within [-0.5, 0.5].
    [profile(1.0, 0.5), profile(0.0, 0.5), profile(1.0, 0.5)]
}

pub fn gen_cfd(p: &CfdParams) -> Result<PinnPointSets, DataError> {
    if p.n_f == 0 || p.n_ic == 0 || p.n_bc == 0 || p.n_bc % 2 != 0 {
        return Err(DataError::InvalidParams("point counts must be positive, n_bc even".into()));
    }
    let [rho, v, pr] = cfd_initial_profiles(p);
    let mut rng = stream(p.seed, 1);
    let collocation = PointSet {
        coords: (0..p.n_f)
            .map(|_| vec![rng.gen_range(0.0..=p.length), rng.gen_range(0.0..=p.horizon)])
            .collect(),
        targets: IndexMap::new(),
    };
    let mut rng = stream(p.seed, 2);
    let xs: Vec<f64> = (0..p.n_ic).map(|_| rng.gen_range(0.0..=p.length)).collect();
    let initial = PointSet {
        coords: xs.iter().map(|&x| vec![x, 0.0]).collect(),
        targets: IndexMap::from([
            ("rho".to_string(), xs.iter().map(|&x| rho.value(x)).collect()),
            ("v".to_string(), xs.iter().map(|&x| v.value(x)).collect()),
            ("p".to_string(), xs.iter().map(|&x| pr.value(x)).collect()),
        ]),
    };
    let mut rng = stream(p.seed, 3);
    let mut boundary = PointSet::default();
    let mut pairs = Vec::new();
    for _ in 0..p.n_bc / 2 {
        let t = rng.gen_range(0.0..=p.horizon);
        let i = boundary.coords.len();
        boundary.coords.push(vec![0.0, t]);
        boundary.coords.push(vec![p.length, t]);
        pairs.push((i, i + 1));
    }
    Ok(PinnPointSets {
        generator: PinnGenerator::Cfd { params: p.clone() },
        fields: vec!["rho".into(), "v".into(), "p".into()],
        domain: vec![[0.0, p.length]],
        horizon: p.horizon,
        collocation,
        initial,
        boundary,
        periodic_pairs: pairs,
        test: PointSet::default(),
    })
}

// ---------------------------------------------------------------------------
// Diffusion-reaction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffReactParams {
    pub nx: usize,
    pub ny: usize,
    pub dt: f64,
    pub horizon: f64,
    #[serde(default = "DiffReactParams::default_du")]
    pub d_u: f64,
    #[serde(default = "DiffReactParams::default_dv")]
    pub d_v: f64,
    #[serde(default = "DiffReactParams::default_k")]
    pub k: f64,
    /// Solver steps between stored snapshots.
    pub save_every: usize,
    pub n_f: usize,
    pub n_ic: usize,
    pub n_bc: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl DiffReactParams {
    pub fn default_du() -> f64 {
        1e-3
    }

    pub fn default_dv() -> f64 {
        5e-3
    }

    pub fn default_k() -> f64 {
        0.005
    }

    /// Cell width on `[-1, 1]`.
    pub fn spacing(&self) -> (f64, f64) {
        (2.0 / self.nx as f64, 2.0 / self.ny as f64)
    }

    pub fn stability_limit(&self) -> f64 {
        let (dx, dy) = self.spacing();
        let h = dx.min(dy);
        let d = self.d_u.max(self.d_v);
        if d == 0.0 {
            f64::INFINITY
        } else {
            h * h / (4.0 * d)
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.nx < 2 || self.ny < 2 || self.save_every == 0 || !(self.dt > 0.0) || !(self.horizon > 0.0) {
            return Err(DataError::InvalidParams(
                "need a grid of at least 2x2, dt > 0, horizon > 0, save_every > 0".into(),
            ));
        }
        if self.d_u < 0.0 || self.d_v < 0.0 {
            return Err(DataError::InvalidParams("diffusion coefficients must be non-negative".into()));
        }
        let limit = self.stability_limit();
        if self.dt > limit {
            return Err(DataError::Stability { dt: self.dt, limit });
        }
        Ok(())
    }
}

/// Cell-centred grid values, row-major `(ny, nx)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceField {
    pub nx: usize,
    pub ny: usize,
    pub times: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl ReferenceField {
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let (dx, dy) = (2.0 / self.nx as f64, 2.0 / self.ny as f64);
        (-1.0 + (i as f64 + 0.5) * dx, -1.0 + (j as f64 + 0.5) * dy)
    }
}

/// 5-point Laplacian with zero-flux (mirrored ghost cell) boundaries.
fn laplacian(f: &[f64], nx: usize, ny: usize, dx: f64, dy: f64, out: &mut [f64]) {
    let (ix2, iy2) = (1.0 / (dx * dx), 1.0 / (dy * dy));
    for j in 0..ny {
        for i in 0..nx {
            let c = f[j * nx + i];
            let w = if i > 0 { f[j * nx + i - 1] } else { c };
            let e = if i + 1 < nx { f[j * nx + i + 1] } else { c };
            let s = if j > 0 { f[(j - 1) * nx + i] } else { c };
            let n = if j + 1 < ny { f[(j + 1) * nx + i] } else { c };
            out[j * nx + i] = (w + e - 2.0 * c) * ix2 + (s + n - 2.0 * c) * iy2;
        }
    }
}

/// One forward-Euler step of
/// `u_t = D_u lap u + u - u^3 - k - v`, `v_t = D_v lap v + u - v`.
/// With `reaction = false` only the diffusion terms are applied.
pub fn fhn_step(u: &mut [f64], v: &mut [f64], p: &DiffReactParams, reaction: bool) {
    let (nx, ny) = (p.nx, p.ny);
    let (dx, dy) = p.spacing();
    let mut lu = vec![0.0; u.len()];
    let mut lv = vec![0.0; v.len()];
    laplacian(u, nx, ny, dx, dy, &mut lu);
    laplacian(v, nx, ny, dx, dy, &mut lv);
    for idx in 0..u.len() {
        let (uu, vv) = (u[idx], v[idx]);
        let mut du = p.d_u * lu[idx];
        let mut dv = p.d_v * lv[idx];
        if reaction {
            du += uu - uu * uu * uu - p.k - vv;
            dv += uu - vv;
        }
        u[idx] = uu + p.dt * du;
        v[idx] = vv + p.dt * dv;
    }
}

/// Runs the explicit solver from `(u0, v0)` and stores a snapshot every
/// `save_every` steps (the initial state included).
pub fn solve_diffreact(u0: Vec<f64>, v0: Vec<f64>, p: &DiffReactParams) -> Result<ReferenceField, DataError> {
    p.validate()?;
    let steps = (p.horizon / p.dt).round() as usize;
    let (mut u, mut v) = (u0, v0);
    let mut field = ReferenceField {
        nx: p.nx,
        ny: p.ny,
        times: vec![0.0],
        u: vec![u.clone()],
        v: vec![v.clone()],
    };
    for step in 1..=steps {
        fhn_step(&mut u, &mut v, p, true);
        if step % p.save_every == 0 {
            field.times.push(step as f64 * p.dt);
            field.u.push(u.clone());
            field.v.push(v.clone());
        }
    }
    Ok(field)
}

/// Standard-normal cell values smoothed by one explicit diffusion step with
/// unit diffusion number 1/8.
pub fn diffreact_initial(p: &DiffReactParams) -> (Vec<f64>, Vec<f64>) {
    let n = p.nx * p.ny;
    let mut rng = stream(p.seed, 0);
    let mut u: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let (dx, dy) = p.spacing();
    let r = 0.125 * dx.min(dy).powi(2);
    let mut lap = vec![0.0; n];
    for f in [&mut u, &mut v] {
        laplacian(f, p.nx, p.ny, dx, dy, &mut lap);
        for (x, l) in f.iter_mut().zip(&lap) {
            *x += r * l;
        }
    }
    (u, v)
}

pub fn gen_diffreact(p: &DiffReactParams) -> Result<(PinnPointSets, ReferenceField), DataError> {
    p.validate()?;
    if p.n_f == 0 || p.n_ic == 0 || p.n_bc == 0 {
        return Err(DataError::InvalidParams("point counts must be positive".into()));
    }
    let (u0, v0) = diffreact_initial(p);
    let field = solve_diffreact(u0, v0, p)?;
    let snaps = field.times.len();
    let (nx, ny) = (p.nx, p.ny);

    let interior = |rng: &mut ChaCha8Rng, snap: usize| -> (Vec<f64>, f64, f64) {
        let (i, j) = (rng.gen_range(0..nx), rng.gen_range(0..ny));
        let (x, y) = field.cell_center(i, j);
        let c = j * nx + i;
        (vec![x, y, field.times[snap]], field.u[snap][c], field.v[snap][c])
    };
    let collect = |rows: Vec<(Vec<f64>, f64, f64)>, with_targets: bool| {
        let mut set = PointSet::default();
        let (mut tu, mut tv) = (Vec::new(), Vec::new());
        for (c, u, v) in rows {
            set.coords.push(c);
            tu.push(u);
            tv.push(v);
        }
        if with_targets {
            set.targets.insert("u".into(), tu);
            set.targets.insert("v".into(), tv);
        }
        set
    };

    let mut rng = stream(p.seed, 1);
    let collocation = collect(
        (0..p.n_f)
            .map(|_| {
                let s = rng.gen_range(0..snaps);
                interior(&mut rng, s)
            })
            .collect(),
        false,
    );
    let mut rng = stream(p.seed, 2);
    let initial = collect((0..p.n_ic).map(|_| interior(&mut rng, 0)).collect(), true);
    // Boundary points sit on the domain edge; zero flux makes the adjacent
    // cell value a second-order estimate of the edge value.
    let mut rng = stream(p.seed, 3);
    let boundary = collect(
        (0..p.n_bc)
            .map(|_| {
                let s = rng.gen_range(0..snaps);
                let side = rng.gen_range(0..4);
                let (i, j, x, y) = match side {
                    0 | 1 => {
                        let j = rng.gen_range(0..ny);
                        let i = if side == 0 { 0 } else { nx - 1 };
                        (i, j, if side == 0 { -1.0 } else { 1.0 }, field.cell_center(i, j).1)
                    }
                    _ => {
                        let i = rng.gen_range(0..nx);
                        let j = if side == 2 { 0 } else { ny - 1 };
                        (i, j, field.cell_center(i, j).0, if side == 2 { -1.0 } else { 1.0 })
                    }
                };
                let c = j * nx + i;
                (vec![x, y, field.times[s]], field.u[s][c], field.v[s][c])
            })
            .collect(),
        true,
    );
    let mut rng = stream(p.seed, 4);
    let test = collect(
        (0..p.n_test)
            .map(|_| {
                let s = rng.gen_range(0..snaps);
                interior(&mut rng, s)
            })
            .collect(),
        true,
    );
    Ok((
        PinnPointSets {
            generator: PinnGenerator::Diffreact { params: p.clone() },
            fields: vec!["u".into(), "v".into()],
            domain: vec![[-1.0, 1.0], [-1.0, 1.0]],
            horizon: *field.times.last().expect("initial snapshot present"),
            collocation,
            initial,
            boundary,
            periodic_pairs: Vec::new(),
            test,
        },
        field,
    ))
}

/// Uniform sample helper shared with tests.
pub fn uniform_points(seed: u64, n: usize, domain: &[[f64; 2]]) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            domain
                .iter()
                .map(|[lo, hi]| Uniform::new_inclusive(*lo, *hi).sample(&mut rng))
                .collect()
        })
        .collect()
}

/// Largest relative deviation of the analytic force from central
/// differences of the energy, as checked at generation time.
pub fn force_check_error(potential: &Potential, x: &[f64]) -> f64 {
    potential
        .force(x)
        .iter()
        .zip(fd_force(potential, x))
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}
