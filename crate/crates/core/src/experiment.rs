//! Experiment orchestration: data preparation, per-seed training and
//! evaluation, baselines, latent graphs, aggregation across seeds and
//! output manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    additive_fit_dataset, additive_predict, pca_additive_fit, pca_additive_predict, pca_fit,
    single_pseudobulks, AdditiveModel, PcaAdditiveModel,
};
use crate::data::{self, Condition, PerturbDataset, MANIFEST_FILE};
use crate::eval::{self, EvalOptions, EvalReport, HitMap};
use crate::model::{Model, ModelConfig};
use crate::numerics::{Matrix, Purpose, RngStream};
use crate::objective::LossBreakdown;
use crate::structure::{self, GraphFormat, LatentGraph};
use crate::synth::{self, SynthConfig};
use crate::trainer::{self, EpochRecord, TrainConfig, TrainOptions};
use crate::{Error, Result};

pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const GRAPH_JSON: &str = "graph.json";
pub const GRAPH_DOT: &str = "graph.dot";
pub const HIT_MAP_CSV: &str = "hit_map.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const THREADS_ENV: &str = "PERTVAE_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Dataset directory; either one dataset or `train/` and `test/` splits.
    pub dataset: Option<PathBuf>,
    /// Synthetic source used when no dataset is given. The run seed
    /// replaces its `seed` field.
    pub synth: Option<SynthConfig>,
    /// `x_dim` and `u_dim` are taken from the data.
    pub model: ModelConfig,
    /// `seed` is replaced by the run seed.
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub baselines: bool,
    /// PCA components for the PCA baselines; defaults to `d_nu + d_iota`.
    pub pca_components: Option<usize>,
    pub threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            synth: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            out_dir: PathBuf::from("runs"),
            seeds: vec![0],
            baselines: true,
            pca_components: None,
            threshold: structure::DEFAULT_THRESHOLD,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds list is empty".into()));
        }
        if self.dataset.is_some() && self.synth.is_some() {
            return Err(Error::InvalidConfig(
                "give either a dataset or a synthetic config, not both".into(),
            ));
        }
        if let Some(p) = &self.dataset {
            if !p.exists() {
                return Err(Error::InvalidConfig(format!(
                    "dataset path {} does not exist",
                    p.display()
                )));
            }
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::InvalidConfig("threshold must be nonnegative".into()));
        }
        if self.eval.de_k == 0 {
            return Err(Error::InvalidConfig("de_k must be at least 1".into()));
        }
        self.train.validate()
    }

    fn synth_for(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            ..self.synth.clone().unwrap_or_default()
        }
    }
}

/// Train and evaluation data for one run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: PerturbDataset,
    pub test: PerturbDataset,
    /// Conditions of `test` that are scored.
    pub eval_conditions: Vec<usize>,
    pub input_hash: String,
}

/// Loads a dataset directory. With `train/` and `test/` subdirectories
/// every perturbed test condition is scored. A single dataset is split by
/// condition size: controls and singles train, doubles are held out; with
/// no doubles the singles are scored in sample.
pub fn load_split(dir: &Path) -> Result<PreparedData> {
    let (tr, te) = (dir.join("train"), dir.join("test"));
    if tr.join(MANIFEST_FILE).exists() && te.join(MANIFEST_FILE).exists() {
        let train = data::load_dataset(&tr)?;
        let test = data::load_dataset(&te)?;
        if train.n_genes() != test.n_genes() || train.u_dim != test.u_dim {
            return Err(Error::Schema(
                "train and test splits disagree on genes or u_dim".into(),
            ));
        }
        let hash = data::sha256_hex(
            &[
                fs::read(tr.join(MANIFEST_FILE))?,
                fs::read(te.join(MANIFEST_FILE))?,
            ]
            .concat(),
        );
        let eval_conditions = with_rows(&test, |c| !c.is_control());
        return Ok(PreparedData {
            train,
            test,
            eval_conditions,
            input_hash: hash,
        });
    }
    let ds = data::load_dataset(dir)?;
    let hash = data::sha256_hex(&fs::read(dir.join(MANIFEST_FILE))?);
    let doubles = with_rows(&ds, |c| c.targets.len() == 2);
    let (train, test, eval_conditions) = if doubles.is_empty() {
        let singles = with_rows(&ds, |c| c.targets.len() == 1);
        (ds.clone(), ds, singles)
    } else {
        let train = ds.subset(&ds.rows_where(|c| c.targets.len() <= 1));
        let test = ds.subset(&ds.rows_where(|c| c.targets.len() != 1));
        (train, test, doubles)
    };
    Ok(PreparedData {
        train,
        test,
        eval_conditions,
        input_hash: hash,
    })
}

fn with_rows(ds: &PerturbDataset, pred: impl Fn(&Condition) -> bool) -> Vec<usize> {
    let mut present = vec![false; ds.conditions.len()];
    for &c in &ds.env {
        present[c] = true;
    }
    (0..ds.conditions.len())
        .filter(|&c| present[c] && pred(&ds.conditions[c]))
        .collect()
}

/// Synthetic train and test splits for one seed.
pub fn synthetic_split(cfg: &SynthConfig) -> Result<PreparedData> {
    let (train, test, _) = synth::generate(cfg)?;
    let hash = data::sha256_hex(&serde_json::to_vec(cfg)?);
    let test = test.to_perturb_dataset(cfg.n_envs);
    let eval_conditions = with_rows(&test, |c| !c.is_control());
    Ok(PreparedData {
        train: train.to_perturb_dataset(cfg.n_envs),
        test,
        eval_conditions,
        input_hash: hash,
    })
}

pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    match &cfg.dataset {
        Some(dir) => load_split(dir),
        None => synthetic_split(&cfg.synth_for(seed)),
    }
}

/// Model configuration with data-dependent sizes filled in.
pub fn resolve_model_config(base: &ModelConfig, ds: &PerturbDataset) -> ModelConfig {
    ModelConfig {
        x_dim: ds.n_genes(),
        u_dim: ds.u_dim,
        ..base.clone()
    }
}

/// Everything one seed produces, serialized to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: Option<LossBreakdown>,
    pub model: EvalReport,
    pub baselines: Vec<EvalReport>,
    pub graph_edges: usize,
}

impl RunReport {
    pub fn methods(&self) -> impl Iterator<Item = &EvalReport> {
        std::iter::once(&self.model).chain(self.baselines.iter())
    }
}

/// Per-run manifest with the full configuration echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub input_hash: String,
    pub config: ExperimentConfig,
}

/// Callback receiving `(seed, epoch record)` during training.
pub type EpochHook = dyn Fn(u64, &EpochRecord) + Send + Sync;

/// Fitted baselines for one training set.
pub struct Baselines {
    pub additive: AdditiveModel,
    pub pca_additive: PcaAdditiveModel,
}

pub fn fit_baselines(train: &PerturbDataset, p: usize) -> Result<Baselines> {
    let additive = additive_fit_dataset(train)?;
    let p = p.min(train.n_rows()).min(train.n_genes());
    let pca = pca_fit(train.x.view(), p)?;
    let pca_additive = pca_additive_fit(pca, &single_pseudobulks(train)?, &train.control_mean()?)?;
    Ok(Baselines {
        additive,
        pca_additive,
    })
}

/// Reports for the additive and PCA-additive baselines.
pub fn evaluate_baselines(
    b: &Baselines,
    test: &PerturbDataset,
    conditions: &[usize],
    opts: &EvalOptions,
    probe_seed: u64,
) -> Result<Vec<EvalReport>> {
    let as_row = |v: crate::numerics::Vector| v.insert_axis(Axis(0));
    let additive = eval::evaluate_predictions("additive", test, conditions, opts, |c, _| {
        Ok(as_row(additive_predict(
            &b.additive,
            &test.conditions[c].targets,
        )?))
    })?;
    let mut pca = eval::evaluate_predictions("pca_additive", test, conditions, opts, |c, _| {
        Ok(as_row(pca_additive_predict(
            &b.pca_additive,
            &test.conditions[c].targets,
        )?))
    })?;
    if b.pca_additive.pca.n_components() > 0 {
        let reps = b.pca_additive.pca.transform(test.x.view());
        pca.probe_accuracy =
            eval::probe_if_possible(reps.view(), &test.env, probe_seed, opts.probe)?;
    }
    Ok(vec![additive, pca])
}

/// Graph over the responsive block averaged across the training
/// environments, with programs assigned from the training hit map.
pub fn latent_graph(
    model: &Model,
    train: &PerturbDataset,
    tau: f64,
) -> Result<(LatentGraph, Option<HitMap>)> {
    let envs: Vec<_> = with_rows(train, |_| true)
        .into_iter()
        .map(|c| train.u_of(c))
        .collect();
    let mut graph = structure::threshold_graph(&structure::extract_adjacency(model, &envs)?, tau)?;
    graph.signed = Some(structure::signed_adjacency(model, &envs)?);
    let singles = with_rows(train, |c| c.targets.len() == 1);
    let hit = if singles.is_empty() || train.control_rows().is_empty() {
        None
    } else {
        let (z_nu, _) = model.latent_means(train.x.view(), train.u_matrix().view())?;
        let h = eval::hit_map_from_latents(z_nu.view(), train, &singles)?;
        graph.program_assignment = Some(structure::assign_programs(&h));
        Some(h)
    };
    Ok((graph, hit))
}

pub fn latent_labels(d_nu: usize) -> Vec<String> {
    (0..d_nu).map(|i| format!("z_nu_{i}")).collect()
}

pub fn hit_map_csv(h: &HitMap) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["component".to_string()];
    header.extend(h.perturbations.iter().cloned());
    w.write_record(&header)?;
    for (i, row) in h.values.rows().into_iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| data::fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    into_string(w)
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Per-condition metrics of every method in one table.
pub fn metrics_csv(report: &RunReport) -> Result<String> {
    let mut out = String::new();
    for (i, r) in report.methods().enumerate() {
        let table = r.conditions_csv()?;
        for (j, line) in table.lines().enumerate() {
            if j == 0 {
                if i == 0 {
                    out.push_str("method,");
                    out.push_str(line);
                    out.push('\n');
                }
                continue;
            }
            out.push_str(&r.method);
            out.push(',');
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trains and evaluates one seed, writing its outputs under `dir`.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    prepared: &PreparedData,
    dir: &Path,
    hook: Option<&EpochHook>,
) -> Result<RunReport> {
    fs::create_dir_all(dir)?;
    write_json(
        &dir.join(RUN_MANIFEST_FILE),
        &RunManifest {
            seed,
            input_hash: prepared.input_hash.clone(),
            config: cfg.clone(),
        },
    )?;
    let model_cfg = resolve_model_config(&cfg.model, &prepared.train);
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.to_path_buf()),
        on_epoch: hook
            .map(|h| Box::new(move |r: &EpochRecord| h(seed, r)) as Box<dyn FnMut(&EpochRecord)>),
    };
    let outcome = trainer::train(&prepared.train, &model_cfg, &train_cfg, opts)?;
    let model = outcome.model;

    let mut model_report = eval::evaluate_model(
        &model,
        &prepared.test,
        &prepared.eval_conditions,
        &cfg.eval,
        seed,
    )?;
    model_report.method = "model".into();
    let baselines = if cfg.baselines {
        let p = cfg
            .pca_components
            .unwrap_or(model_cfg.d_nu + model_cfg.d_iota);
        let b = fit_baselines(&prepared.train, p)?;
        evaluate_baselines(
            &b,
            &prepared.test,
            &prepared.eval_conditions,
            &cfg.eval,
            seed,
        )?
    } else {
        Vec::new()
    };

    let (graph, hit) = latent_graph(&model, &prepared.train, cfg.threshold)?;
    let labels = latent_labels(model_cfg.d_nu);
    fs::write(
        dir.join(GRAPH_JSON),
        structure::export_graph(&graph, &labels, GraphFormat::Json)?,
    )?;
    fs::write(
        dir.join(GRAPH_DOT),
        structure::export_graph(&graph, &labels, GraphFormat::Dot)?,
    )?;
    if let Some(h) = &hit {
        fs::write(dir.join(HIT_MAP_CSV), hit_map_csv(h)?)?;
    }

    let report = RunReport {
        seed,
        epochs: train_cfg.epochs,
        final_loss: outcome.history.last().map(|r| r.loss),
        model: model_report,
        baselines,
        graph_edges: graph.edges.len(),
    };
    write_json(&dir.join(REPORT_FILE), &report)?;
    fs::write(dir.join(METRICS_FILE), metrics_csv(&report)?)?;
    Ok(report)
}

/// Mean, sample standard deviation and median of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                median: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Self {
            mean,
            std,
            median,
            n,
        }
    }
}

/// Metric name to value for the scalar fields of a report.
pub fn report_metrics(r: &EvalReport) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    for (name, v) in [
        ("mcc_nu", r.mcc_nu),
        ("r2_block_nu", r.r2_block_nu),
        ("r2_block_iota", r.r2_block_iota),
    ] {
        if let Some(v) = v {
            out.push((name, v));
        }
    }
    out.extend([
        ("rmse", r.rmse),
        ("r2_population", r.r2_population),
        ("pseudobulk_l2", r.pseudobulk_l2),
        ("delta_pearson", r.delta_pearson),
        ("de_rmse", r.de_rmse),
        ("de_r2", r.de_r2),
    ]);
    if let Some(p) = r.probe_accuracy {
        out.push(("probe_accuracy", p));
    }
    out
}

/// `method -> metric -> statistic` across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub methods: BTreeMap<String, BTreeMap<String, Stat>>,
}

pub fn summarize(reports: &[RunReport]) -> Summary {
    let mut values: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in reports {
        for m in r.methods() {
            let entry = values.entry(m.method.clone()).or_default();
            for (name, v) in report_metrics(m) {
                entry.entry(name.to_string()).or_default().push(v);
            }
        }
    }
    Summary {
        seeds: reports.iter().map(|r| r.seed).collect(),
        methods: values
            .into_iter()
            .map(|(m, metrics)| {
                (
                    m,
                    metrics
                        .into_iter()
                        .map(|(k, v)| (k, Stat::of(&v)))
                        .collect(),
                )
            })
            .collect(),
    }
}

impl Summary {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "metric", "mean", "std", "median", "n"])?;
        for (method, metrics) in &self.methods {
            for (name, s) in metrics {
                w.write_record([
                    method.clone(),
                    name.clone(),
                    data::fmt_f64(s.mean),
                    data::fmt_f64(s.std),
                    data::fmt_f64(s.median),
                    s.n.to_string(),
                ])?;
            }
        }
        into_string(w)
    }

    /// Human-readable `mean ± std` table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (method, metrics) in &self.methods {
            out.push_str(method);
            out.push('\n');
            for (name, s) in metrics {
                out.push_str(&format!(
                    "  {name:<16} {:.4} ± {:.4} (median {:.4}, n={})\n",
                    s.mean, s.std, s.median, s.n
                ));
            }
        }
        out
    }
}

/// Result of a multi-seed experiment.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<RunReport>,
    pub summary: Summary,
}

/// Top-level manifest of an experiment directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// Seed to content hash of its inputs.
    pub inputs: BTreeMap<u64, String>,
}

/// Worker count for seed fan-out: `PERTVAE_THREADS` if set, else all cores.
pub fn thread_cap() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::InvalidConfig(format!(
                "{THREADS_ENV} must be a positive integer, got '{v}'"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Runs every seed (in parallel up to [`thread_cap`]) and writes per-seed
/// outputs, the aggregate summary and the experiment manifest.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    hook: Option<&EpochHook>,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap()?)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let results: Vec<Result<(RunReport, String)>> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let data = prepare_data(cfg, seed)?;
                let report = run_seed(cfg, seed, &data, &seed_dir(&cfg.out_dir, seed), hook)?;
                Ok((report, data.input_hash))
            })
            .collect()
    });
    let mut reports = Vec::with_capacity(results.len());
    let mut inputs = BTreeMap::new();
    for r in results {
        let (report, hash) = r?;
        inputs.insert(report.seed, hash);
        reports.push(report);
    }
    write_json(
        &cfg.out_dir.join(RUN_MANIFEST_FILE),
        &ExperimentManifest {
            config: cfg.clone(),
            seeds: cfg.seeds.clone(),
            inputs,
        },
    )?;
    let summary = summarize(&reports);
    write_json(&cfg.out_dir.join(SUMMARY_JSON), &summary)?;
    fs::write(cfg.out_dir.join(SUMMARY_CSV), summary.to_csv()?)?;
    Ok(ExperimentOutcome { reports, summary })
}

/// Reads the per-seed reports of an experiment directory, in seed order.
pub fn collect_reports(out: &Path) -> Result<Vec<RunReport>> {
    let mut reports = Vec::new();
    for entry in fs::read_dir(out)? {
        let path = entry?.path();
        let report = path.join(REPORT_FILE);
        if path.is_dir() && report.exists() {
            reports.push(serde_json::from_slice::<RunReport>(&fs::read(report)?)?);
        }
    }
    if reports.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no {REPORT_FILE} found under {}",
            out.display()
        )));
    }
    reports.sort_by_key(|r| r.seed);
    Ok(reports)
}

/// One row of the alignment ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub alpha: f64,
    pub mcc_nu: Option<f64>,
    pub r2_block_nu: Option<f64>,
    pub r2_block_iota: Option<f64>,
    pub probe_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub without: ExperimentOutcome,
    pub with: ExperimentOutcome,
    pub rows: Vec<AblationRow>,
}

/// Runs the `alpha = 0` and `alpha = target` arms on identical data and
/// seeds, in `alpha_0/` and `alpha_<target>/` under the output directory.
pub fn run_ablation(cfg: &ExperimentConfig, hook: Option<&EpochHook>) -> Result<AblationOutcome> {
    cfg.validate()?;
    let target = cfg.train.weights.alpha;
    let arm = |alpha: f64| -> Result<ExperimentOutcome> {
        let mut c = cfg.clone();
        c.train.weights.alpha = alpha;
        c.out_dir = cfg.out_dir.join(format!("alpha_{alpha}"));
        run_experiment(&c, hook)
    };
    let without = arm(0.0)?;
    let with = arm(target)?;
    let mut rows = Vec::new();
    for (alpha, outcome) in [(0.0, &without), (target, &with)] {
        for r in &outcome.reports {
            rows.push(AblationRow {
                seed: r.seed,
                alpha,
                mcc_nu: r.model.mcc_nu,
                r2_block_nu: r.model.r2_block_nu,
                r2_block_iota: r.model.r2_block_iota,
                probe_accuracy: r.model.probe_accuracy,
            });
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "seed",
        "alpha",
        "mcc_nu",
        "r2_block_nu",
        "r2_block_iota",
        "probe_accuracy",
    ])?;
    let opt = |v: Option<f64>| v.map(data::fmt_f64).unwrap_or_default();
    for r in &rows {
        w.write_record([
            r.seed.to_string(),
            data::fmt_f64(r.alpha),
            opt(r.mcc_nu),
            opt(r.r2_block_nu),
            opt(r.r2_block_iota),
            opt(r.probe_accuracy),
        ])?;
    }
    fs::write(cfg.out_dir.join(ABLATION_CSV), into_string(w)?)?;
    Ok(AblationOutcome {
        without,
        with,
        rows,
    })
}

/// Parses `"a+b"` into a condition. Parts are target names when
/// `target_names` is given, otherwise indices.
pub fn parse_condition(
    spec: &str,
    target_names: Option<&[String]>,
    u_dim: usize,
) -> Result<Condition> {
    let mut targets = Vec::new();
    for part in spec.split('+').map(str::trim) {
        if part.is_empty() || part == "ctrl" {
            continue;
        }
        let t = match target_names.and_then(|names| names.iter().position(|n| n == part)) {
            Some(t) => t,
            None => part.parse::<usize>().map_err(|_| {
                Error::InvalidArgument(format!("unknown perturbation target '{part}'"))
            })?,
        };
        if t >= u_dim {
            return Err(Error::InvalidArgument(format!(
                "target {t} outside u_dim {u_dim}"
            )));
        }
        targets.push(t);
    }
    if targets.len() > 2 {
        return Err(Error::InvalidArgument(format!(
            "'{spec}' names more than two targets"
        )));
    }
    targets.sort_unstable();
    Ok(Condition {
        name: spec.trim().to_string(),
        targets,
    })
}

fn u_vector(c: &Condition, u_dim: usize) -> crate::numerics::Vector {
    let mut u = crate::numerics::Vector::zeros(u_dim);
    for &t in &c.targets {
        u[t] += 1.0;
    }
    u
}

/// Predicted pseudobulk per condition from `n_samples` virtual cells.
pub fn predict_conditions(
    model: &Model,
    ctrl: ArrayView2<f64>,
    conditions: &[Condition],
    n_samples: usize,
    seed: u64,
) -> Result<Matrix> {
    let mut rng = RngStream::new(seed).substream(Purpose::Predict);
    let mut out = Matrix::zeros((conditions.len(), model.config.x_dim));
    for (i, c) in conditions.iter().enumerate() {
        let u = u_vector(c, model.config.u_dim);
        out.row_mut(i)
            .assign(&model.predict_mean(ctrl, u.view(), n_samples, &mut rng)?);
    }
    Ok(out)
}

/// Additive baseline pseudobulks in the same layout as [`predict_conditions`].
pub fn additive_conditions(model: &AdditiveModel, conditions: &[Condition]) -> Result<Matrix> {
    let mut out = Matrix::zeros((conditions.len(), model.ctrl_mean.len()));
    for (i, c) in conditions.iter().enumerate() {
        out.row_mut(i).assign(&additive_predict(model, &c.targets)?);
    }
    Ok(out)
}

pub fn pca_additive_conditions(
    model: &PcaAdditiveModel,
    conditions: &[Condition],
) -> Result<Matrix> {
    let mut out = Matrix::zeros((conditions.len(), model.pca.mean.len()));
    for (i, c) in conditions.iter().enumerate() {
        out.row_mut(i)
            .assign(&pca_additive_predict(model, &c.targets)?);
    }
    Ok(out)
}

/// Per-condition prediction CSV: `condition` then one column per gene.
pub fn predictions_csv(
    conditions: &[Condition],
    genes: Option<&[String]>,
    preds: &Matrix,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["condition".to_string()];
    match genes {
        Some(g) => header.extend(g.iter().cloned()),
        None => header.extend((0..preds.ncols()).map(|j| format!("x_{j}"))),
    }
    w.write_record(&header)?;
    for (c, row) in conditions.iter().zip(preds.rows()) {
        let mut rec = vec![c.name.clone()];
        rec.extend(row.iter().map(|v| data::fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    into_string(w)
}
