use dctrain::dcloss::DcWeights;
use dctrain::nn::{Activation, MlpConfig};
use dctrain::pde::{gen_advection, gen_pes, AdvectionParams, PesDataset, PesGenerator, Potential};
use dctrain::trainer::{
    ablate, ablation_csv, ablation_markdown, adam_step, beta_sweep, epoch_permutation, history_csv,
    loss_and_grads, median, run_summary, train, AdamConfig, AdamState, Model, Problem, TaskKind, TrainConfig,
    TrainError, Variant,
};
use dctrain::Tensor;
use indexmap::IndexMap;
use proptest::prelude::*;

fn quadratic(n: usize, scale: f64, seed: u64) -> PesDataset {
    gen_pes(&PesGenerator {
        potential: Potential::Quadratic {
            a: vec![vec![40.0, 10.0], vec![10.0, 20.0]],
        },
        n,
        domain: vec![[-3.0 * scale, 3.0 * scale]; 2],
        seed,
    })
    .unwrap()
}

fn pes_cfg(epochs: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(epochs);
    c.seed = seed;
    c.rescale = true;
    c
}

#[test]
fn histories_are_bit_identical() {
    let ds = quadratic(60, 1.0, 1);
    let problem = Problem::Pes { train: &ds, test: None };
    let base = MlpConfig::new(2, vec![8, 8], 1, Activation::Tanh).with_batchnorm(true);
    let run = || {
        let mut m = Model::for_task(TaskKind::Pes, 2, &base).unwrap();
        let out = train(&mut m, &problem, &pes_cfg(5, 3)).unwrap();
        (history_csv(&out), m)
    };
    assert_eq!(run(), run());

    let (sets, _) = gen_advection(&AdvectionParams::new(50, 10, 10, 2)).unwrap();
    let problem = Problem::Pinn {
        task: TaskKind::Advection,
        sets: &sets,
    };
    let base = MlpConfig::new(2, vec![8, 8], 1, Activation::IRelu);
    let run = || {
        let mut m = Model::for_task(TaskKind::Advection, 2, &base).unwrap();
        history_csv(&train(&mut m, &problem, &TrainConfig::new(5)).unwrap())
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.starts_with("epoch,f,IC,BC,total,MSE\n"), "{a}");
}

#[test]
fn pes_loss_decreases_by_epoch_50() {
    let ds = quadratic(200, 1.0, 7);
    let problem = Problem::Pes { train: &ds, test: None };
    for seed in 0..5 {
        let base = MlpConfig::new(2, vec![32, 32], 1, Activation::IRelu).with_seed(seed);
        let mut m = Model::for_task(TaskKind::Pes, 2, &base).unwrap();
        let out = train(&mut m, &problem, &pes_cfg(50, seed)).unwrap();
        let (first, last) = (out.history[0].terms["total"], out.history[49].terms["total"]);
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}

fn overflowing() -> (PesDataset, MlpConfig) {
    let ds = quadratic(20, 1e6, 0);
    let base = MlpConfig::new(2, vec![16; 6], 1, Activation::IRelu);
    (ds, base)
}

#[test]
fn overflow_surfaces_as_divergence() {
    let (ds, base) = overflowing();
    let problem = Problem::Pes { train: &ds, test: None };
    let mut m = Model::for_task(TaskKind::Pes, 2, &base).unwrap();
    match train(&mut m, &problem, &TrainConfig::new(3)) {
        Err(TrainError::Diverged(d)) => {
            assert_eq!(d.epoch, 1);
            assert!(d.history.is_empty());
            assert!(!d.term.is_empty());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
    let (summary, model) = run_summary(&problem, &base, &TrainConfig::new(3)).unwrap();
    assert!(summary.is_diverged() && model.is_none());
    assert_eq!(summary.nan_epoch, Some(1));
}

#[test]
fn diverged_variant_reads_nan() {
    let (ds, base) = overflowing();
    let problem = Problem::Pes { train: &ds, test: None };
    let variants = vec![
        Variant::new("IReLU", Activation::IRelu, false, false),
        Variant::new("Tanh+rescale", Activation::Tanh, false, true),
    ];
    let rows = ablate(&problem, &variants, &[0, 1], &base, &TrainConfig::new(2)).unwrap();
    assert_eq!(rows[0].n_diverged, 2);
    assert_eq!(rows[1].n_diverged, 0);
    let csv = ablation_csv(&rows);
    let first = csv.lines().nth(1).unwrap();
    assert!(first.starts_with("IReLU,2,2,NaN,NaN"), "{csv}");
    assert!(ablation_markdown(&rows).lines().nth(2).unwrap().contains("NaN"));
}

#[test]
fn single_variant_single_seed_equals_a_run() {
    let ds = quadratic(40, 1.0, 2);
    let problem = Problem::Pes { train: &ds, test: None };
    let base = MlpConfig::new(2, vec![8], 1, Activation::Tanh);
    let mut cfg = TrainConfig::new(3);
    cfg.batch_size = 10;
    let v = Variant::new("only", Activation::IRelu, false, true);
    let rows = ablate(&problem, &[v], &[5], &base, &cfg).unwrap();
    assert_eq!(rows.len(), 1);

    let mut direct_model = base.clone().with_seed(5);
    direct_model.activation = Activation::IRelu;
    let mut direct = cfg.clone();
    direct.seed = 5;
    direct.rescale = true;
    let (summary, _) = run_summary(&problem, &direct_model, &direct).unwrap();
    assert_eq!(rows[0].median, summary.metrics);
    assert!(rows[0].spread.values().all(|&s| s == 0.0));
}

#[test]
fn zero_beta_ignores_force_labels() {
    let ds = quadratic(40, 1.0, 4);
    let mut scrambled = ds.clone();
    for s in &mut scrambled.samples {
        s.force = vec![123.0, -45.0];
    }
    let base = MlpConfig::new(2, vec![8, 8], 1, Activation::IRelu).with_seed(2);
    let mut cfg = TrainConfig::new(4);
    cfg.weights = DcWeights { alpha: 1.0, beta: 0.0 };
    let fit = |d: &PesDataset| {
        let mut m = Model::for_task(TaskKind::Pes, 2, &base).unwrap();
        train(&mut m, &Problem::Pes { train: d, test: None }, &cfg).unwrap();
        m
    };
    assert_eq!(fit(&ds), fit(&scrambled));
}

/// Comparative claim that energy-only training wins on the energy metric.
/// It does not hold on this problem: force labels act as extra supervision
/// and every beta > 0 reaches a lower energy error.
#[test]
#[ignore = "does not hold: force supervision improves the energy fit"]
fn zero_beta_gives_the_best_energy() {
    let ds = quadratic(100, 1.0, 4);
    let problem = Problem::Pes { train: &ds, test: None };
    let betas = [0.0, 1.0, 10.0, 100.0];
    let mut per_beta: Vec<Vec<f64>> = vec![Vec::new(); betas.len()];
    for seed in 0..5 {
        let base = MlpConfig::new(2, vec![16, 16], 1, Activation::Tanh).with_seed(seed);
        let rows = beta_sweep(&problem, &base, &pes_cfg(300, seed), &betas).unwrap();
        for (i, r) in rows.iter().enumerate() {
            per_beta[i].push(r.energy_loss);
        }
    }
    let medians: Vec<f64> = per_beta.iter_mut().map(|v| median(v)).collect();
    for (b, m) in betas.iter().zip(&medians).skip(1) {
        assert!(medians[0] < *m, "beta 0: {} vs beta {b}: {m}", medians[0]);
    }
}

#[test]
fn single_beta_gives_one_row() {
    let ds = quadratic(20, 1.0, 4);
    let problem = Problem::Pes { train: &ds, test: None };
    let base = MlpConfig::new(2, vec![4], 1, Activation::IRelu);
    let rows = beta_sweep(&problem, &base, &pes_cfg(1, 0), &[30.0]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].alpha, rows[0].beta), (1.0, 30.0));
}

#[test]
fn pinn_step_equals_adam_on_full_batch_gradient() {
    let (sets, _) = gen_advection(&AdvectionParams::new(30, 6, 6, 1)).unwrap();
    let problem = Problem::Pinn {
        task: TaskKind::Advection,
        sets: &sets,
    };
    let base = MlpConfig::new(2, vec![6], 1, Activation::Tanh);
    let m0 = Model::for_task(TaskKind::Advection, 2, &base).unwrap();
    let mut trained = m0.clone();
    let cfg = TrainConfig::new(1);
    train(&mut trained, &problem, &cfg).unwrap();
    let (_, grads) = loss_and_grads(&m0, &problem, &cfg, &[]).unwrap();
    let mut p = m0.trainable();
    adam_step(&mut p, &grads, &mut AdamState::default(), &cfg.adam).unwrap();
    assert_eq!(trained.trainable(), p);
}

#[test]
fn multi_head_seeds_and_names() {
    let base = MlpConfig::new(3, vec![4], 1, Activation::Tanh).with_seed(10);
    let m = Model::for_task(TaskKind::Diffreact, 3, &base).unwrap();
    assert_eq!(m.heads.keys().collect::<Vec<_>>(), ["u", "v"]);
    assert_eq!(m.head("v").config().init.seed, 11);
    assert!(m.trainable().keys().all(|k| k.starts_with("u.") || k.starts_with("v.")));
    let back = Model::from_checkpoint(&m.to_checkpoint()).unwrap();
    assert_eq!(back, m);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn epoch_permutation_is_a_deterministic_permutation(seed in any::<u64>(), epoch in 1usize..1000, n in 0usize..200) {
        let p = epoch_permutation(seed, epoch, n);
        prop_assert_eq!(&p, &epoch_permutation(seed, epoch, n));
        let mut sorted = p.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn adam_zero_gradient_never_moves(values in prop::collection::vec(-10.0f64..10.0, 1..8), steps in 1usize..5) {
        let n = values.len();
        let mut p = IndexMap::from([("w".to_string(), Tensor::new([n], values).unwrap())]);
        let before = p.clone();
        let g = IndexMap::from([("w".to_string(), Tensor::zeros([n]))]);
        let mut st = AdamState::default();
        for _ in 0..steps {
            adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        }
        prop_assert_eq!(p, before);
    }
}
