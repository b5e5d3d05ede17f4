//! `pertvae` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use pertvae::data::{self, Condition, PerturbDataset};
use pertvae::eval::{self, EvalReport};
use pertvae::experiment::{self, ExperimentConfig, PreparedData};
use pertvae::model::Model;
use pertvae::scm::{self, ScmParams};
use pertvae::structure::{self, GraphFormat};
use pertvae::synth::{self, SynthConfig};
use pertvae::trainer::{Checkpoint, EpochRecord, CHECKPOINT_FILE};

#[derive(Parser)]
#[command(
    name = "pertvae",
    version,
    about = "Perturbation-aware VAE with a latent causal model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground-truth latents.
    Simulate(Common),
    /// Check environment and intervention sufficiency of a ground-truth SCM.
    Audit(Common),
    /// Train and evaluate one model per seed.
    Train(Common),
    /// Evaluate a trained checkpoint.
    Eval(WithCheckpoint),
    /// Predict pseudobulk expression for (possibly unseen) conditions.
    Predict(PredictArgs),
    /// Linear probe of frozen representations against condition labels.
    Probe(WithCheckpoint),
    /// Fit and evaluate the additive and PCA-additive baselines.
    Baseline(BaselineArgs),
    /// Export the learned latent graph.
    Graph(GraphArgs),
    /// Run the alignment ablation (alpha = 0 against the target alpha).
    Ablate(Common),
    /// Aggregate the per-seed reports of an experiment directory.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; overrides any data source in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Contrastive alignment weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Latent block sizes as `d_nu,d_iota`.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<(usize, usize)>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Clone)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint file or the run directory containing it.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Clone)]
struct PredictArgs {
    #[command(flatten)]
    run: WithCheckpoint,
    /// Comma-separated conditions such as `A+B` (target names or indices).
    /// Defaults to every double condition in the data.
    #[arg(long, value_delimiter = ',')]
    conditions: Option<Vec<String>>,
    /// Virtual cells per condition.
    #[arg(long, default_value_t = 500)]
    samples: usize,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args, Clone)]
struct BaselineArgs {
    #[command(flatten)]
    common: Common,
    /// PCA components; defaults to `d_nu + d_iota`.
    #[arg(long)]
    components: Option<usize>,
}

#[derive(Args, Clone)]
struct GraphArgs {
    #[command(flatten)]
    run: WithCheckpoint,
    #[arg(long, default_value_t = structure::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, value_enum, default_value_t = Format::Dot)]
    format: Format,
}

#[derive(Args, Clone)]
struct ReportArgs {
    /// Experiment output directory.
    dir: PathBuf,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Dot,
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected d_nu,d_iota")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<pertvae::Error>())
                .map_or(1, |pe| pe.category().exit_code());
            ExitCode::from(code as u8)
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Simulate(c) => simulate(&c),
        Command::Audit(c) => audit(&c),
        Command::Train(c) => train(&c),
        Command::Eval(a) => evaluate(&a),
        Command::Predict(a) => predict(&a),
        Command::Probe(a) => probe(&a),
        Command::Baseline(a) => baseline(&a),
        Command::Graph(a) => graph(&a),
        Command::Ablate(c) => ablate(&c),
        Command::Report(a) => report(&a),
    }
}

fn experiment_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &c.data {
        cfg.dataset = Some(d.clone());
        cfg.synth = None;
    }
    if cfg.dataset.is_none() && cfg.synth.is_none() {
        cfg.synth = Some(SynthConfig::default());
    }
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = &c.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(a) = c.alpha {
        cfg.train.weights.alpha = a;
    }
    if let Some(e) = c.epochs {
        cfg.train.epochs = e;
    }
    if let Some((dn, di)) = c.dims {
        cfg.model.d_nu = dn;
        cfg.model.d_iota = di;
        if let Some(s) = cfg.synth.as_mut() {
            s.d_nu = dn;
            s.d_iota = di;
        }
    }
    Ok(cfg)
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds.first().copied().unwrap_or(0)
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn epoch_line(seed: u64, r: &EpochRecord) {
    emit(json!({
        "event": "epoch",
        "seed": seed,
        "epoch": r.epoch,
        "total": r.loss.total,
        "rec": r.loss.rec,
        "kl_nu": r.loss.kl_nu,
        "kl_iota": r.loss.kl_iota,
        "contrast": r.loss.contrast,
    }));
}

fn simulate(c: &Common) -> anyhow::Result<()> {
    let cfg = experiment_config(c)?;
    let out = c.out.clone().context("--out is required")?;
    let synth_cfg = SynthConfig {
        seed: first_seed(&cfg),
        ..cfg.synth.clone().unwrap_or_default()
    };
    let (train, test, gt) = synth::generate(&synth_cfg)?;
    synth::write_synthetic(&out, &synth_cfg, &train, &test, &gt)?;
    emit(json!({
        "event": "simulated",
        "out": out,
        "seed": synth_cfg.seed,
        "n_train": train.x.nrows(),
        "n_test": test.x.nrows(),
        "x_dim": synth_cfg.x_dim,
    }));
    Ok(())
}

fn ground_truth_scm(c: &Common) -> anyhow::Result<ScmParams> {
    if let Some(d) = &c.data {
        for dir in [d.clone(), d.join("train")] {
            if dir.join(data::GROUND_TRUTH_FILE).exists() {
                return Ok(synth::load_ground_truth(&dir)?.scm);
            }
        }
        bail!(pertvae::Error::Schema(format!(
            "no {} under {}",
            data::GROUND_TRUTH_FILE,
            d.display()
        )));
    }
    let cfg = experiment_config(c)?;
    let synth_cfg = SynthConfig {
        seed: first_seed(&cfg),
        require_sufficiency: false,
        ..cfg.synth.clone().unwrap_or_default()
    };
    let root = pertvae::RngStream::new(synth_cfg.seed);
    let gt = synth::sample_ground_truth(
        &synth_cfg,
        &mut root.substream(pertvae::numerics::Purpose::GroundTruth),
    )?;
    Ok(gt.scm)
}

fn audit(c: &Common) -> anyhow::Result<()> {
    let params = ground_truth_scm(c)?;
    let env = scm::check_environment_sufficiency(&params)?;
    let flags = scm::check_intervention_sufficiency(&params);
    let interventions_ok = flags.iter().all(|&f| f);
    emit(json!({
        "event": "audit",
        "rank": env.rank,
        "required": env.required,
        "environment_sufficient": env.sufficient,
        "intervention_flags": flags,
        "intervention_sufficient": interventions_ok,
    }));
    if !env.sufficient || !interventions_ok {
        bail!(pertvae::Error::Schema(
            "ground truth fails the identifiability audit".into()
        ));
    }
    Ok(())
}

fn train(c: &Common) -> anyhow::Result<()> {
    let cfg = experiment_config(c)?;
    let hook = |seed: u64, r: &EpochRecord| epoch_line(seed, r);
    let outcome = experiment::run_experiment(&cfg, Some(&hook))?;
    for r in &outcome.reports {
        emit(
            json!({"event": "run", "seed": r.seed, "dir": experiment::seed_dir(&cfg.out_dir, r.seed), "model": brief(&r.model)}),
        );
    }
    eprint!("{}", outcome.summary.to_table());
    Ok(())
}

fn brief(r: &EvalReport) -> serde_json::Value {
    json!({
        "mcc_nu": r.mcc_nu,
        "r2_block_nu": r.r2_block_nu,
        "r2_block_iota": r.r2_block_iota,
        "rmse": r.rmse,
        "delta_pearson": r.delta_pearson,
        "probe_accuracy": r.probe_accuracy,
    })
}

fn load_checkpoint(path: &Path) -> anyhow::Result<(Checkpoint, PathBuf)> {
    let file = if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    };
    let ck = Checkpoint::load(&file).with_context(|| format!("loading {}", file.display()))?;
    let dir = file
        .parent()
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    Ok((ck, dir))
}

/// Model and data for a checkpoint command; the data seed defaults to the
/// checkpoint's training seed.
fn checkpoint_context(
    a: &WithCheckpoint,
) -> anyhow::Result<(Model, PreparedData, ExperimentConfig, PathBuf)> {
    let (ck, dir) = load_checkpoint(&a.checkpoint)?;
    let mut cfg = experiment_config(&a.common)?;
    if a.common.seed.is_none() && a.common.seeds.is_none() {
        cfg.seeds = vec![ck.train_config.seed];
    }
    if a.common.config.is_none() {
        cfg.model = ck.model_config.clone();
        if let Some(s) = cfg.synth.as_mut() {
            s.d_nu = ck.model_config.d_nu;
            s.d_iota = ck.model_config.d_iota;
            s.x_dim = ck.model_config.x_dim;
            s.n_envs = ck.model_config.u_dim + 1;
        }
    }
    let prepared = experiment::prepare_data(&cfg, first_seed(&cfg))?;
    Ok((ck.model(), prepared, cfg, dir))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn evaluate(a: &WithCheckpoint) -> anyhow::Result<()> {
    let (model, prepared, cfg, dir) = checkpoint_context(a)?;
    let out = a.common.out.clone().unwrap_or(dir);
    fs::create_dir_all(&out)?;
    let seed = first_seed(&cfg);
    let report = eval::evaluate_model(
        &model,
        &prepared.test,
        &prepared.eval_conditions,
        &cfg.eval,
        seed,
    )?;
    write_json(&out.join("eval_report.json"), &report)?;
    fs::write(out.join("eval_metrics.csv"), report.conditions_csv()?)?;
    emit(json!({"event": "eval", "out": out, "model": brief(&report)}));
    Ok(())
}

fn resolve_conditions(
    specs: Option<&[String]>,
    ds: &PerturbDataset,
) -> anyhow::Result<Vec<Condition>> {
    match specs {
        Some(specs) => specs
            .iter()
            .map(|s| {
                Ok(experiment::parse_condition(
                    s,
                    ds.target_names.as_deref(),
                    ds.u_dim,
                )?)
            })
            .collect(),
        None => {
            let mut ids = ds.conditions_with(2);
            if ids.is_empty() {
                ids = ds.conditions_with(1);
            }
            Ok(ids.into_iter().map(|c| ds.conditions[c].clone()).collect())
        }
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn predict(a: &PredictArgs) -> anyhow::Result<()> {
    let (model, prepared, cfg, _) = checkpoint_context(&a.run)?;
    let all = &prepared.test;
    let conditions = resolve_conditions(a.conditions.as_deref(), all)?;
    let ctrl = prepared.train.control_x();
    let preds = experiment::predict_conditions(
        &model,
        ctrl.view(),
        &conditions,
        a.samples,
        first_seed(&cfg),
    )?;
    let text = match a.format {
        Format::Csv => experiment::predictions_csv(&conditions, all.gene_names.as_deref(), &preds)?,
        Format::Json => {
            let rows: Vec<_> = conditions
                .iter()
                .zip(preds.rows())
                .map(
                    |(c, r)| json!({"condition": c.name, "targets": c.targets, "mean": r.to_vec()}),
                )
                .collect();
            serde_json::to_string_pretty(&rows)? + "\n"
        }
        Format::Dot => bail!(pertvae::Error::UnknownFormat(
            "dot (predict writes csv or json)".into()
        )),
    };
    write_or_print(a.run.common.out.as_deref(), &text)
}

fn probe(a: &WithCheckpoint) -> anyhow::Result<()> {
    let (model, prepared, cfg, _) = checkpoint_context(a)?;
    let ds = &prepared.test;
    let seed = first_seed(&cfg);
    let reps = model.encode(ds.x.view())?;
    let model_acc = eval::linear_probe_with(reps.view(), &ds.env, seed, cfg.eval.probe)?;
    let p = (model.config.d_nu + model.config.d_iota)
        .min(prepared.train.n_rows())
        .min(ds.n_genes());
    let pca = pertvae::baselines::pca_fit(prepared.train.x.view(), p)?;
    let pca_acc = eval::linear_probe_with(
        pca.transform(ds.x.view()).view(),
        &ds.env,
        seed,
        cfg.eval.probe,
    )?;
    let raw_acc = eval::linear_probe_with(ds.x.view(), &ds.env, seed, cfg.eval.probe)?;
    emit(json!({
        "event": "probe",
        "classes": ds.conditions.len(),
        "model_encoder": model_acc,
        "pca": pca_acc,
        "expression": raw_acc,
    }));
    Ok(())
}

fn baseline(a: &BaselineArgs) -> anyhow::Result<()> {
    let mut cfg = experiment_config(&a.common)?;
    if let Some(p) = a.components {
        cfg.pca_components = Some(p);
    }
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out)?;
    let seed = first_seed(&cfg);
    let prepared = experiment::prepare_data(&cfg, seed)?;
    let p = cfg
        .pca_components
        .unwrap_or(cfg.model.d_nu + cfg.model.d_iota);
    let fitted = experiment::fit_baselines(&prepared.train, p)?;
    let reports = experiment::evaluate_baselines(
        &fitted,
        &prepared.test,
        &prepared.eval_conditions,
        &cfg.eval,
        seed,
    )?;
    write_json(&out.join("baseline_report.json"), &reports)?;
    let conditions: Vec<Condition> = prepared
        .eval_conditions
        .iter()
        .map(|&c| prepared.test.conditions[c].clone())
        .collect();
    let genes = prepared.test.gene_names.as_deref();
    let add = experiment::additive_conditions(&fitted.additive, &conditions)?;
    fs::write(
        out.join("additive_predictions.csv"),
        experiment::predictions_csv(&conditions, genes, &add)?,
    )?;
    let pca = experiment::pca_additive_conditions(&fitted.pca_additive, &conditions)?;
    fs::write(
        out.join("pca_additive_predictions.csv"),
        experiment::predictions_csv(&conditions, genes, &pca)?,
    )?;
    for r in &reports {
        emit(json!({"event": "baseline", "method": r.method, "metrics": brief(r)}));
    }
    Ok(())
}

fn graph(a: &GraphArgs) -> anyhow::Result<()> {
    let (model, prepared, _, _) = checkpoint_context(&a.run)?;
    let (graph, _) = experiment::latent_graph(&model, &prepared.train, a.threshold)?;
    let format = match a.format {
        Format::Dot => GraphFormat::Dot,
        Format::Json => GraphFormat::Json,
        Format::Csv => bail!(pertvae::Error::UnknownFormat(
            "csv (graph writes dot or json)".into()
        )),
    };
    let labels = experiment::latent_labels(model.config.d_nu);
    write_or_print(
        a.run.common.out.as_deref(),
        &structure::export_graph(&graph, &labels, format)?,
    )
}

fn ablate(c: &Common) -> anyhow::Result<()> {
    let cfg = experiment_config(c)?;
    let hook = |seed: u64, r: &EpochRecord| epoch_line(seed, r);
    let outcome = experiment::run_ablation(&cfg, Some(&hook))?;
    for row in &outcome.rows {
        emit(json!({"event": "ablation", "row": row}));
    }
    Ok(())
}

fn report(a: &ReportArgs) -> anyhow::Result<()> {
    let reports = experiment::collect_reports(&a.dir)?;
    let summary = experiment::summarize(&reports);
    match a.format {
        Some(Format::Json) => println!("{}", serde_json::to_string_pretty(&summary)?),
        Some(Format::Csv) => print!("{}", summary.to_csv()?),
        Some(Format::Dot) => bail!(pertvae::Error::UnknownFormat(
            "dot (report writes csv or json)".into()
        )),
        None => print!("{}", summary.to_table()),
    }
    Ok(())
}
