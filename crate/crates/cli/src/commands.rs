//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use dctrain::pde::{
    gen_advection, gen_cfd, gen_diffreact, gen_pes, DataError, PesDataset, PinnGenerator, PinnPointSets,
    RescaleInfo,
};
use dctrain::trainer::{
    ablation_csv, ablation_jobs, ablation_markdown, aggregate, default_variants, history_csv_from, sweep_configs,
    sweep_csv, sweep_row, timing_csv, train, Model, Problem, Summary, SweepRow, TaskKind, TrainConfig, TrainError,
    DEFAULT_BETAS,
};
use dctrain::nn::MlpConfig;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, DEFAULT_SEEDS};
use crate::CliError;

pub const PES_FILE: &str = "dataset.jsonl";
pub const POINTS_FILE: &str = "points.json";
pub const REFERENCE_FILE: &str = "reference.json";
pub const RESCALE_FILE: &str = "rescale.json";

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: usize,
    pub force: bool,
}

fn out_dir(cfg: &ExperimentConfig, common: &Common) -> Result<PathBuf, CliError> {
    common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set `out`".into()))
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Refuses to overwrite any of `files` in `dir` unless `force` is set.
fn prepare(dir: &Path, files: &[&str], force: bool) -> Result<(), CliError> {
    if !force {
        for f in files {
            let p = dir.join(f);
            if p.exists() {
                return Err(CliError::Io(format!(
                    "{} exists; pass --force to overwrite",
                    p.display()
                )));
            }
        }
    }
    fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let p = dir.join(name);
    fs::write(&p, contents).map_err(|e| io(&p, e))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn data_error(e: DataError) -> CliError {
    match e {
        DataError::Io(e) => CliError::Io(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Data(d) => data_error(d),
        TrainError::Diverged(d) => CliError::Diverged(d.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

// ---------------------------------------------------------------------------
// gen

pub fn gen(cfg: &ExperimentConfig, common: &Common) -> Result<(), CliError> {
    let dir = out_dir(cfg, common)?;
    let d = &cfg.data;
    let missing = || CliError::Config(format!("config has no data.{} section", cfg.task.label()));
    match cfg.task {
        TaskKind::Pes => {
            let mut g = d.pes.clone().ok_or_else(missing)?;
            if let Some(s) = common.seed {
                g.seed = s;
            }
            let ds = gen_pes(&g).map_err(data_error)?;
            let info = ds.rescale_info().map_err(data_error)?;
            prepare(&dir, &[PES_FILE, RESCALE_FILE], common.force)?;
            write(&dir, PES_FILE, &ds.to_jsonl())?;
            write(&dir, RESCALE_FILE, &json(&info))?;
            let (mean, var) = ds.energy_stats();
            println!(
                "pes: n = {}, d = {}, C = {}, max |label| = {}, mean energy = {mean}, energy variance = {var}, force variance = {}",
                ds.len(),
                ds.dim(),
                info.c,
                info.max_abs_label,
                ds.force_variance()
            );
        }
        TaskKind::Advection | TaskKind::Cfd | TaskKind::Diffreact => {
            let (sets, reference) = match cfg.task {
                TaskKind::Advection => {
                    let mut p = d.advection.clone().ok_or_else(missing)?;
                    if let Some(s) = common.seed {
                        p.seed = s;
                    }
                    (gen_advection(&p).map_err(data_error)?.0, None)
                }
                TaskKind::Cfd => {
                    let mut p = d.cfd.clone().ok_or_else(missing)?;
                    if let Some(s) = common.seed {
                        p.seed = s;
                    }
                    (gen_cfd(&p).map_err(data_error)?, None)
                }
                _ => {
                    let mut p = d.diffreact.clone().ok_or_else(missing)?;
                    if let Some(s) = common.seed {
                        p.seed = s;
                    }
                    let (sets, field) = gen_diffreact(&p).map_err(data_error)?;
                    (sets, Some(field))
                }
            };
            let labels = sets.labels();
            let info = if labels.is_empty() {
                RescaleInfo::identity()
            } else {
                dctrain::pde::rescale_constant(labels).map_err(data_error)?
            };
            let mut files = vec![POINTS_FILE, RESCALE_FILE];
            if reference.is_some() {
                files.push(REFERENCE_FILE);
            }
            prepare(&dir, &files, common.force)?;
            write(&dir, POINTS_FILE, &sets.to_json())?;
            write(&dir, RESCALE_FILE, &json(&info))?;
            if let Some(r) = reference {
                write(&dir, REFERENCE_FILE, &serde_json::to_string(&r).expect("serializable"))?;
            }
            println!(
                "{}: collocation = {}, initial = {}, boundary = {}, test = {}, C = {}, max |label| = {}",
                cfg.task.label(),
                sets.collocation.len(),
                sets.initial.len(),
                sets.boundary.len(),
                sets.test.len(),
                info.c,
                info.max_abs_label
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Loading data

pub enum Loaded {
    Pes(PesDataset, Option<PesDataset>),
    Pinn(TaskKind, PinnPointSets),
}

impl Loaded {
    pub fn problem(&self) -> Problem<'_> {
        match self {
            Loaded::Pes(train, test) => Problem::Pes {
                train,
                test: test.as_ref(),
            },
            Loaded::Pinn(task, sets) => Problem::Pinn { task: *task, sets },
        }
    }
}

fn resolve(path: &Path, default_file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_file)
    } else {
        path.to_path_buf()
    }
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Loaded, CliError> {
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| CliError::Config("config has no data.path".into()))?;
    let file = resolve(path, if cfg.task == TaskKind::Pes { PES_FILE } else { POINTS_FILE });
    if !file.exists() {
        return Err(CliError::Config(format!("dataset not found: {}", file.display())));
    }
    match cfg.task {
        TaskKind::Pes => {
            let train = PesDataset::load(&file).map_err(data_error)?;
            let test = match &cfg.data.test_path {
                Some(p) => {
                    let f = resolve(p, PES_FILE);
                    if !f.exists() {
                        return Err(CliError::Config(format!("dataset not found: {}", f.display())));
                    }
                    Some(PesDataset::load(&f).map_err(data_error)?)
                }
                None => None,
            };
            Ok(Loaded::Pes(train, test))
        }
        task => {
            let sets = PinnPointSets::load(&file).map_err(data_error)?;
            let matches = matches!(
                (&sets.generator, task),
                (PinnGenerator::Advection { .. }, TaskKind::Advection)
                    | (PinnGenerator::Cfd { .. }, TaskKind::Cfd)
                    | (PinnGenerator::Diffreact { .. }, TaskKind::Diffreact)
            );
            if !matches {
                return Err(CliError::Config(format!(
                    "{} does not hold {} point sets",
                    file.display(),
                    task.label()
                )));
            }
            Ok(Loaded::Pinn(task, sets))
        }
    }
}

// ---------------------------------------------------------------------------
// train

const RUN_FILES: [&str; 4] = ["summary.json", "history.csv", "timing.csv", "checkpoint.json"];

/// Trains one model into `dir`. Divergence writes a diverged summary and
/// the completed history before being reported.
pub fn run_into(
    dir: &Path,
    problem: &Problem<'_>,
    model_cfg: &MlpConfig,
    train_cfg: &TrainConfig,
    label: &str,
    force: bool,
) -> Result<Summary, CliError> {
    prepare(dir, &RUN_FILES, force)?;
    let task = problem.task();
    let mut model = Model::for_task(task, problem.input_dim(), model_cfg).map_err(train_error)?;
    match train(&mut model, problem, train_cfg) {
        Ok(outcome) => {
            let mut summary = Summary::finished(task, &outcome);
            summary.label = Some(label.to_string());
            write(dir, "history.csv", &history_csv_from(&outcome.history, &outcome.term_names, &outcome.eval_names))?;
            write(dir, "timing.csv", &timing_csv(&outcome.history))?;
            write(dir, "checkpoint.json", &json(&model.to_checkpoint()))?;
            write(dir, "summary.json", &json(&summary))?;
            Ok(summary)
        }
        Err(TrainError::Diverged(d)) => {
            let c = dctrain::trainer::rescale_for(problem, train_cfg).map_err(train_error)?.c;
            let mut summary = Summary::diverged(task, &d, c);
            summary.label = Some(label.to_string());
            let terms: Vec<String> = d
                .history
                .first()
                .map(|r| r.terms.keys().cloned().collect())
                .unwrap_or_default();
            let evals = dctrain::trainer::eval_names(problem);
            write(dir, "history.csv", &history_csv_from(&d.history, &terms, &evals))?;
            write(dir, "timing.csv", &timing_csv(&d.history))?;
            write(dir, "summary.json", &json(&summary))?;
            Ok(summary)
        }
        Err(e) => Err(train_error(e)),
    }
}

fn with_seed(cfg: &ExperimentConfig, common: &Common) -> Result<(MlpConfig, TrainConfig, Loaded), CliError> {
    let data = load_data(cfg)?;
    let mut model = cfg.model()?.mlp(data.problem().input_dim());
    let mut train = cfg.train()?.clone();
    if let Some(s) = common.seed {
        model.init.seed = s;
        train.seed = s;
    }
    Ok((model, train, data))
}

pub fn train_cmd(cfg: &ExperimentConfig, common: &Common) -> Result<(), CliError> {
    let dir = out_dir(cfg, common)?;
    let (model, train, data) = with_seed(cfg, common)?;
    let summary = run_into(&dir, &data.problem(), &model, &train, &cfg.label(), common.force)?;
    println!("{}", serde_json::to_string(&summary).expect("serializable"));
    if summary.is_diverged() {
        return Err(CliError::Diverged(format!(
            "diverged at epoch {} in term `{}`",
            summary.nan_epoch.unwrap_or(0),
            summary.nan_term.as_deref().unwrap_or("?")
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep and ablate

fn thread_count(jobs: usize) -> usize {
    let cap = std::env::var("DCTRAIN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(usize::MAX);
    jobs.max(1).min(cap)
}

fn run_parallel<T: Send, F>(n: usize, jobs: usize, f: F) -> Result<Vec<T>, CliError>
where
    F: Fn(usize) -> Result<T, CliError> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(jobs))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

pub fn sweep_cmd(cfg: &ExperimentConfig, common: &Common) -> Result<(), CliError> {
    if cfg.task != TaskKind::Pes {
        return Err(CliError::Config("sweep runs on the pes task".into()));
    }
    let dir = out_dir(cfg, common)?;
    let (model, train, data) = with_seed(cfg, common)?;
    let betas = cfg
        .sweep
        .as_ref()
        .and_then(|s| s.betas.clone())
        .unwrap_or_else(|| DEFAULT_BETAS.to_vec());
    if betas.is_empty() {
        return Err(CliError::Config("empty beta list".into()));
    }
    prepare(&dir, &["sweep.csv", "sweep.md"], common.force)?;
    let configs = sweep_configs(&train, &betas);
    let problem = data.problem();
    let summaries = run_parallel(configs.len(), common.jobs, |i| {
        let sub = dir.join(format!("beta_{}", configs[i].weights.beta));
        run_into(&sub, &problem, &model, &configs[i], &cfg.label(), common.force)
    })?;
    let rows: Vec<SweepRow> = configs.iter().zip(&summaries).map(|(c, s)| sweep_row(c, s)).collect();
    let md = sweep_markdown(&rows);
    write(&dir, "sweep.csv", &sweep_csv(&rows))?;
    write(&dir, "sweep.md", &md)?;
    print!("{md}");
    Ok(())
}

/// Sweep table with the force-to-energy training loss ratio as the
/// difficulty gap.
pub fn sweep_markdown(rows: &[SweepRow]) -> String {
    let mut s = String::from("| beta | alpha | energy loss | force loss | force/energy | energy MSE | force MSE |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        if r.diverged {
            s.push_str(&format!("| {} | {} | NaN | NaN | NaN | NaN | NaN |\n", r.beta, r.alpha));
        } else {
            s.push_str(&format!(
                "| {} | {} | {:.6e} | {:.6e} | {:.3e} | {:.6e} | {:.6e} |\n",
                r.beta,
                r.alpha,
                r.energy_loss,
                r.force_loss,
                r.force_loss / r.energy_loss,
                r.energy_mse,
                r.force_mse
            ));
        }
    }
    s
}

pub fn ablate_cmd(cfg: &ExperimentConfig, common: &Common) -> Result<(), CliError> {
    let dir = out_dir(cfg, common)?;
    let data = load_data(cfg)?;
    let model = cfg.model()?.mlp(data.problem().input_dim());
    let train = cfg.train()?.clone();
    let spec = cfg.ablation.clone().unwrap_or_default();
    let variants = spec.variants.unwrap_or_else(|| default_variants(cfg.task));
    let seeds = match common.seed {
        Some(s) => vec![s],
        None => spec.seeds.unwrap_or_else(|| DEFAULT_SEEDS.to_vec()),
    };
    let jobs = ablation_jobs(&variants, &seeds, &model, &train).map_err(|e| CliError::Config(e.to_string()))?;
    prepare(&dir, &["ablation.csv", "ablation.md"], common.force)?;
    let problem = data.problem();
    let summaries = run_parallel(jobs.len(), common.jobs, |i| {
        let j = &jobs[i];
        let sub = dir.join(j.dir_name(&variants));
        run_into(&sub, &problem, &j.model, &j.train, &variants[j.variant].label, common.force)
    })?;
    let rows = aggregate(
        jobs.iter()
            .zip(&summaries)
            .map(|(j, s)| (variants[j.variant].label.as_str(), s)),
    );
    let md = ablation_markdown(&rows);
    write(&dir, "ablation.csv", &ablation_csv(&rows))?;
    write(&dir, "ablation.md", &md)?;
    print!("{md}");
    Ok(())
}

// ---------------------------------------------------------------------------
// report

fn read_summary(path: &Path) -> Option<Summary> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

/// Summaries in each directory or, failing that, its immediate children.
pub fn collect_summaries(dirs: &[PathBuf]) -> Vec<(String, Summary)> {
    let mut out = Vec::new();
    for d in dirs {
        let direct = d.join("summary.json");
        let found: Vec<PathBuf> = if direct.is_file() {
            vec![direct]
        } else {
            let mut children: Vec<PathBuf> = fs::read_dir(d)
                .map(|it| it.filter_map(|e| e.ok()).map(|e| e.path().join("summary.json")).collect())
                .unwrap_or_default();
            children.retain(|p| p.is_file());
            children.sort();
            children
        };
        for p in found {
            if let Some(s) = read_summary(&p) {
                let fallback = p
                    .parent()
                    .and_then(Path::file_name)
                    .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
                let label = s.label.clone().unwrap_or(fallback);
                out.push((label, s));
            }
        }
    }
    out
}

pub fn report_cmd(dirs: &[PathBuf], common: &Common) -> Result<(), CliError> {
    let summaries = collect_summaries(dirs);
    if summaries.is_empty() {
        return Err(CliError::Config("no valid summary.json found".into()));
    }
    let rows = aggregate(summaries.iter().map(|(l, s)| (l.as_str(), s)));
    let md = ablation_markdown(&rows);
    if let Some(dir) = &common.out {
        prepare(dir, &["report.csv", "report.md"], common.force)?;
        write(dir, "report.csv", &ablation_csv(&rows))?;
        write(dir, "report.md", &md)?;
    }
    print!("{md}");
    Ok(())
}
