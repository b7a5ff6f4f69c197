//! End-to-end experiment driver behind the CLI: data and model assembly,
//! training runs with on-disk artifacts, evaluation from checkpoints,
//! landscape scans, the toy comparison and parameter sweeps.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::attacks::AttackSpec;
use crate::config::{DataConfig, ExperimentConfig, ModelKind, RawConfig};
use crate::data::{gen_toy, load_idx, LabeledDataset, ToySpec};
use crate::error::{Result, SlatError};
use crate::metrics::{
    self, accuracy, boundary_nonrobust_ratio, detect_catastrophic_overfitting, loss_landscape, parse_metrics_csv,
    robust_accuracy, CsvSink, Evaluator, LandscapeGrid, MetricRecord, OverfitThresholds, ProbeGrid, Tee,
};
use crate::models::{build_linear, build_mlp, build_small_cnn, build_toy_mlp, Model};
use crate::tensor::Tensor;
use crate::training::{train, Method};

/// Train and test sets for a config.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, test) = match &cfg.data {
        DataConfig::Toy { mu, sigma, n_per_class, test_per_class } => {
            let spec = ToySpec { mu: *mu, sigma: *sigma, n_per_class: *n_per_class, seed: cfg.seed };
            let test_spec = ToySpec { n_per_class: *test_per_class, seed: cfg.seed.wrapping_add(1 << 32), ..spec.clone() };
            (gen_toy(&spec)?, gen_toy(&test_spec)?)
        }
        DataConfig::Idx { images, labels, test_size, train_size, .. } => {
            let all = load_idx(images, labels)?;
            // The split is fixed across seeds so runs differ only in training randomness.
            let (test, train) = all.split(*test_size, 0);
            let train = match train_size {
                Some(n) if *n < train.len() => train.subset(&(0..*n).collect::<Vec<_>>()),
                _ => train,
            };
            (train, test)
        }
    };
    if matches!(cfg.model.kind, ModelKind::Linear | ModelKind::Mlp) && train.sample_shape().len() > 1 {
        return Ok((train.flattened(), test.flattened()));
    }
    Ok((train, test))
}

pub fn build_model(cfg: &ExperimentConfig, sample_shape: &[usize], classes: usize) -> Result<Model> {
    let m = &cfg.model;
    let d_in: usize = sample_shape.iter().product();
    let mut model = match m.kind {
        ModelKind::Linear => build_linear(d_in, classes, cfg.seed)?,
        ModelKind::ToyMlp => {
            if sample_shape != [2] || classes != 2 {
                return Err(SlatError::InvalidArgument("toy_mlp needs 2-D binary data".into()));
            }
            build_toy_mlp(m.hidden[0], m.activation, cfg.seed)?
        }
        ModelKind::Mlp => build_mlp(d_in, &m.hidden, classes, m.activation, cfg.seed)?,
        ModelKind::SmallCnn => build_small_cnn(sample_shape, classes, m.activation, cfg.seed)?,
    };
    match &m.sites {
        Some(sites) => model.set_sites(sites.iter().copied(), m.eta)?,
        None => {
            let sites: Vec<usize> = model.sites().iter().copied().collect();
            model.set_sites(sites, m.eta)?;
        }
    }
    Ok(model)
}

fn eval_set(cfg: &ExperimentConfig, test: &LabeledDataset) -> (Tensor, Vec<usize>) {
    let n = cfg.eval.size.min(test.len());
    test.batch(&(0..n).collect::<Vec<_>>())
}

pub fn evaluator(cfg: &ExperimentConfig, test: &LabeledDataset) -> Evaluator {
    let (x, y) = eval_set(cfg, test);
    let e = &cfg.eval;
    let mut ev = Evaluator::new(x, y, e.epsilon, cfg.train.clamp, cfg.seed);
    ev.pgd = AttackSpec::pgd(e.epsilon, 2.5 * e.epsilon / e.pgd_steps as f64, e.pgd_steps, e.pgd_restarts, cfg.seed)
        .with_clamp(cfg.train.clamp);
    ev.probe_size = e.probe_size;
    ev
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub steps: usize,
    pub final_train_loss: Option<f64>,
    pub eval_epsilon: f64,
    pub eval_examples: usize,
    pub clean_acc: f64,
    /// Accuracy under the per-checkpoint PGD attack.
    pub pgd_acc: f64,
    pub pgd_attack: String,
    /// Accuracy under the stronger final attack.
    pub final_pgd_acc: f64,
    pub final_attack: String,
    pub catastrophic_overfitting_step: Option<usize>,
    pub landscape_residual: f64,
    pub landscape_adv_residual: f64,
    pub boundary_ratio: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub eval_only: bool,
    pub ckpt: Option<PathBuf>,
}

/// Everything a run produces in memory, besides what it writes to disk.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub model: Model,
    pub records: Vec<MetricRecord>,
    pub landscape: LandscapeGrid,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn landscape_for(cfg: &ExperimentConfig, model: &Model, test: &LabeledDataset) -> Result<LandscapeGrid> {
    let n = cfg.eval.landscape_samples.min(test.len());
    let (x, y) = test.batch(&(0..n).collect::<Vec<_>>());
    loss_landscape(model, &x, &y, cfg.eval.epsilon, cfg.eval.landscape_n, cfg.seed)
}

fn overfit_thresholds(cfg: &ExperimentConfig) -> OverfitThresholds {
    OverfitThresholds::with_window(cfg.eval.overfit_window)
}

/// Trains (or loads) a model and writes `metrics.csv`, `final.ckpt`,
/// `landscape_<method>.csv`, `summary.json` and `timing.json` under the
/// configured output directory.
///
/// A non-finite gradient aborts with `SlatError::NonFiniteGradient` after
/// the metrics recorded so far have been flushed.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let started = Instant::now();
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    let (train_set, test) = load_data(cfg)?;
    let mut model = build_model(cfg, train_set.sample_shape(), train_set.classes())?;
    let ev = evaluator(cfg, &test);
    let method = cfg.train.method;

    let (records, report) = if opts.eval_only {
        let ckpt = opts.ckpt.clone().unwrap_or_else(|| out.join("final.ckpt"));
        model.load_checkpoint(&ckpt)?;
        let records = match fs::read_to_string(out.join("metrics.csv")) {
            Ok(text) => parse_metrics_csv(&text)?,
            Err(_) => Vec::new(),
        };
        (records, None)
    } else {
        if let Some(ckpt) = &opts.ckpt {
            model.load_checkpoint(ckpt)?;
        }
        let mut records = Vec::new();
        let mut csv = CsvSink::new(BufWriter::new(File::create(out.join("metrics.csv"))?));
        let report = train(&mut model, &train_set, &cfg.train, Some(&ev), &mut Tee(&mut csv, &mut records))?;
        model.save_checkpoint(out.join("final.ckpt"))?;
        (records, Some(report))
    };
    let train_secs = started.elapsed().as_secs_f64();

    let e = &cfg.eval;
    let final_attack = AttackSpec::pgd(
        e.epsilon,
        2.5 * e.epsilon / e.final_pgd_steps as f64,
        e.final_pgd_steps,
        e.final_pgd_restarts,
        cfg.seed,
    )
    .with_clamp(cfg.train.clamp);
    let landscape = landscape_for(cfg, &model, &test)?;
    fs::write(out.join(format!("landscape_{method}.csv")), landscape.to_csv())?;
    let boundary_ratio = match &cfg.data {
        DataConfig::Toy { mu, sigma, .. } => Some(boundary_nonrobust_ratio(&model, &ProbeGrid::for_toy(*mu, *sigma))?),
        DataConfig::Idx { .. } => None,
    };
    let summary = RunSummary {
        method,
        seed: cfg.seed,
        steps: report.as_ref().map_or_else(|| records.last().map_or(0, |r| r.step), |r| r.steps),
        final_train_loss: report.as_ref().map(|r| r.final_loss),
        eval_epsilon: e.epsilon,
        eval_examples: ev.y.len(),
        clean_acc: accuracy(&model, &ev.x, &ev.y)?,
        pgd_acc: robust_accuracy(&model, &ev.x, &ev.y, &ev.pgd)?,
        pgd_attack: format!("pgd-{}-{}", e.pgd_steps, e.pgd_restarts),
        final_pgd_acc: robust_accuracy(&model, &ev.x, &ev.y, &final_attack)?,
        final_attack: format!("pgd-{}-{}", e.final_pgd_steps, e.final_pgd_restarts),
        catastrophic_overfitting_step: detect_catastrophic_overfitting(&records, &overfit_thresholds(cfg)),
        landscape_residual: landscape.plane_fit_residual(),
        landscape_adv_residual: landscape.adv_slice_residual(),
        boundary_ratio,
    };
    let name = if opts.eval_only { "eval_summary.json" } else { "summary.json" };
    write_json(&out.join(name), &summary)?;
    write_json(
        &out.join("timing.json"),
        &serde_json::json!({ "train_seconds": train_secs, "total_seconds": started.elapsed().as_secs_f64() }),
    )?;
    Ok(RunOutcome { summary, model, records, landscape })
}

/// Recomputes the landscape of a saved model.
pub fn landscape(cfg: &ExperimentConfig, ckpt: &Path) -> Result<LandscapeGrid> {
    let (train_set, test) = load_data(cfg)?;
    let mut model = build_model(cfg, train_set.sample_shape(), train_set.classes())?;
    model.load_checkpoint(ckpt)?;
    let grid = landscape_for(cfg, &model, &test)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(format!("landscape_{}.csv", cfg.train.method)), grid.to_csv())?;
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyDemoEntry {
    pub method: Method,
    pub boundary_ratio: f64,
    pub clean_acc: f64,
    pub pgd_acc: f64,
}

/// Standard training, FGSM AT and SLAT on the toy task, one subdirectory
/// each, plus a combined `summary.json`.
pub fn toy_demo(cfg: &ExperimentConfig) -> Result<Vec<ToyDemoEntry>> {
    if !cfg.data.is_toy() {
        return Err(SlatError::InvalidArgument("toy-demo needs data.source = toy".into()));
    }
    let mut entries = Vec::new();
    for method in [Method::Standard, Method::FgsmAt, Method::Slat] {
        let mut c = cfg.clone();
        c.train.method = method;
        c.out_dir = cfg.out_dir.join(method.as_str());
        let s = run(&c, &RunOptions::default())?.summary;
        entries.push(ToyDemoEntry {
            method,
            boundary_ratio: s.boundary_ratio.unwrap_or(f64::NAN),
            clean_acc: s.clean_acc,
            pgd_acc: s.pgd_acc,
        });
    }
    write_json(&cfg.out_dir.join("summary.json"), &entries)?;
    Ok(entries)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub status: String,
    pub clean_acc: Option<f64>,
    pub pgd_acc: Option<f64>,
    pub final_pgd_acc: Option<f64>,
    pub catastrophic_overfitting_step: Option<usize>,
}

/// Worker count for sweeps: `SLATLAB_THREADS` if set, else available cores.
pub fn sweep_threads() -> usize {
    std::env::var("SLATLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// One run per value of `param`, each in `<out>/<param>=<value>/`, merged
/// into `<out>/sweep.csv`. A failing run is recorded and the rest continue.
pub fn sweep(raw: &RawConfig, param: &str, values: &[String], threads: usize) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(SlatError::InvalidArgument("sweep needs at least one value".into()));
    }
    let base = ExperimentConfig::from_raw(raw)?;
    if raw.get(param).is_none() && !known_key(raw, param) {
        return Err(SlatError::InvalidArgument(format!("`{param}` is not a config key")));
    }
    let one = |value: &String| -> SweepRow {
        let mut r = raw.clone();
        r.set(param, value);
        r.set("output.dir", &base.out_dir.join(format!("{param}={value}")).to_string_lossy());
        let result = ExperimentConfig::from_raw(&r).and_then(|c| run(&c, &RunOptions::default()));
        match result {
            Ok(o) => SweepRow {
                value: value.clone(),
                status: "ok".into(),
                clean_acc: Some(o.summary.clean_acc),
                pgd_acc: Some(o.summary.pgd_acc),
                final_pgd_acc: Some(o.summary.final_pgd_acc),
                catastrophic_overfitting_step: o.summary.catastrophic_overfitting_step,
            },
            Err(e) => SweepRow {
                value: value.clone(),
                status: format!("error: {e}").replace(',', ";"),
                clean_acc: None,
                pgd_acc: None,
                final_pgd_acc: None,
                catastrophic_overfitting_step: None,
            },
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.clamp(1, values.len()))
        .build()
        .map_err(|e| SlatError::InvalidArgument(e.to_string()))?;
    let rows: Vec<SweepRow> = pool.install(|| values.par_iter().map(one).collect());
    fs::create_dir_all(&base.out_dir)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut csv = format!("{param},status,clean_acc,pgd_acc,final_pgd_acc,catastrophic_overfitting_step\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.value,
            r.status,
            opt(r.clean_acc),
            opt(r.pgd_acc),
            opt(r.final_pgd_acc),
            r.catastrophic_overfitting_step.map_or(String::new(), |s| s.to_string())
        ));
    }
    fs::write(base.out_dir.join("sweep.csv"), csv)?;
    Ok(rows)
}

/// Whether setting `key` produces a config that parses without an unknown-key error.
fn known_key(raw: &RawConfig, key: &str) -> bool {
    let mut r = raw.clone();
    r.set(key, "0");
    match ExperimentConfig::from_raw(&r) {
        Err(SlatError::Validation(v)) => !v.iter().any(|e| e == &format!("unknown key `{key}`")),
        _ => true,
    }
}

/// Metric records saved by a previous run.
pub fn read_metrics(dir: &Path) -> Result<Vec<MetricRecord>> {
    metrics::parse_metrics_csv(&fs::read_to_string(dir.join("metrics.csv"))?)
}
