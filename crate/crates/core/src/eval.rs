//! Evaluation metrics: latent identifiability (MCC, block R²), population
//! and pseudobulk prediction metrics, DE-gene restricted metrics, linear
//! probes and the perturbation hit map.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::PerturbDataset;
use crate::model::Model;
use crate::numerics::{
    column_means, linear_sum_assignment, ols_r2, pearson, Matrix, Purpose, RngStream, Vector,
};
use crate::{Error, Result};

/// Matched mean absolute correlation and the matching itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MccResult {
    pub value: f64,
    /// `permutation[true component] = learned component`.
    pub permutation: Vec<usize>,
    /// Absolute correlation of each matched pair.
    pub matched: Vec<f64>,
}

/// Mean absolute Pearson correlation after optimal one-to-one matching.
pub fn mcc(z_true: ArrayView2<f64>, z_learned: ArrayView2<f64>) -> Result<f64> {
    Ok(mcc_matching(z_true, z_learned)?.value)
}

pub fn mcc_matching(z_true: ArrayView2<f64>, z_learned: ArrayView2<f64>) -> Result<MccResult> {
    let d = z_true.ncols();
    if z_learned.ncols() != d {
        return Err(Error::DimensionMismatch {
            context: "mcc latent dimension",
            expected: d,
            found: z_learned.ncols(),
        });
    }
    if z_learned.nrows() != z_true.nrows() {
        return Err(Error::DimensionMismatch {
            context: "mcc rows",
            expected: z_true.nrows(),
            found: z_learned.nrows(),
        });
    }
    let mut corr = Matrix::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            corr[[i, j]] = pearson(z_true.column(i), z_learned.column(j))?.value.abs();
        }
    }
    let a = linear_sum_assignment(corr.view(), true)?;
    let matched: Vec<f64> = a
        .permutation
        .iter()
        .enumerate()
        .map(|(i, &j)| corr[[i, j]])
        .collect();
    let value = if d == 0 { 0.0 } else { a.total_cost / d as f64 };
    Ok(MccResult {
        value,
        permutation: a.permutation,
        matched,
    })
}

/// R² of the linear regression (with intercept) of the true block on the
/// learned block.
pub fn block_r2(z_true_block: ArrayView2<f64>, z_learned_block: ArrayView2<f64>) -> Result<f64> {
    ols_r2(z_learned_block, z_true_block)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationMetrics {
    pub rmse: f64,
    pub r2_population: f64,
}

/// Compares the mean expression of generated and observed cells.
pub fn population_metrics(
    generated: ArrayView2<f64>,
    observed: ArrayView2<f64>,
) -> Result<PopulationMetrics> {
    if generated.nrows() == 0 || observed.nrows() == 0 {
        return Err(Error::InvalidArgument(
            "population metrics need at least one cell on each side".into(),
        ));
    }
    let g = generated.mean_axis(Axis(0)).expect("nonempty");
    let o = observed.mean_axis(Axis(0)).expect("nonempty");
    mean_vector_metrics(g.view(), o.view())
}

fn mean_vector_metrics(g: ArrayView1<f64>, o: ArrayView1<f64>) -> Result<PopulationMetrics> {
    if g.len() != o.len() {
        return Err(Error::DimensionMismatch {
            context: "population metrics genes",
            expected: o.len(),
            found: g.len(),
        });
    }
    let n = g.len();
    let mse = g
        .iter()
        .zip(o.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n as f64;
    let r2 = ols_r2(g.insert_axis(Axis(1)), o.insert_axis(Axis(1)))?;
    Ok(PopulationMetrics {
        rmse: mse.sqrt(),
        r2_population: r2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudobulkMetrics {
    pub l2: f64,
    pub delta_pearson: f64,
    /// Set when either expression change is constant across genes.
    pub delta_pearson_degenerate: bool,
}

pub fn pseudobulk_metrics(
    pred_mean: ArrayView1<f64>,
    obs_mean: ArrayView1<f64>,
    ctrl_mean: ArrayView1<f64>,
) -> Result<PseudobulkMetrics> {
    let g = obs_mean.len();
    for (v, what) in [(pred_mean, "predicted mean"), (ctrl_mean, "control mean")] {
        if v.len() != g {
            return Err(Error::DimensionMismatch {
                context: what,
                expected: g,
                found: v.len(),
            });
        }
    }
    let l2 = (&pred_mean - &obs_mean).mapv(|v| v * v).sum().sqrt();
    let c = pearson(
        (&pred_mean - &ctrl_mean).view(),
        (&obs_mean - &ctrl_mean).view(),
    )?;
    Ok(PseudobulkMetrics {
        l2,
        delta_pearson: c.value,
        delta_pearson_degenerate: c.degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeMetrics {
    pub de_rmse: f64,
    pub de_r2: f64,
    /// Selected gene indices in ascending order.
    pub genes: Vec<usize>,
}

/// The `k` genes with the largest absolute mean shift, ties to the lowest
/// index, returned in ascending index order.
pub fn top_de_genes(
    obs_mean: ArrayView1<f64>,
    ctrl_mean: ArrayView1<f64>,
    k: usize,
) -> Result<Vec<usize>> {
    let g = obs_mean.len();
    if k > g {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds gene count {g}"
        )));
    }
    let shift: Vec<f64> = obs_mean
        .iter()
        .zip(ctrl_mean.iter())
        .map(|(o, c)| (o - c).abs())
        .collect();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| shift[b].total_cmp(&shift[a]).then(a.cmp(&b)));
    let mut genes = order[..k].to_vec();
    genes.sort_unstable();
    Ok(genes)
}

/// Population metrics restricted to the top-`k` DE genes of the observed
/// cells relative to control cells.
pub fn de_gene_metrics(
    pred: ArrayView2<f64>,
    obs: ArrayView2<f64>,
    ctrl: ArrayView2<f64>,
    k: usize,
) -> Result<DeMetrics> {
    if obs.nrows() == 0 || ctrl.nrows() == 0 {
        return Err(Error::InvalidArgument(
            "DE metrics need observed and control cells".into(),
        ));
    }
    let om = obs.mean_axis(Axis(0)).expect("nonempty");
    let cm = ctrl.mean_axis(Axis(0)).expect("nonempty");
    let genes = top_de_genes(om.view(), cm.view(), k)?;
    let m = population_metrics(
        pred.select(Axis(1), &genes).view(),
        obs.select(Axis(1), &genes).view(),
    )?;
    Ok(DeMetrics {
        de_rmse: m.rmse,
        de_r2: m.r2_population,
        genes,
    })
}

/// Softmax-regression probe settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.1,
            l2: 1e-4,
            train_fraction: 0.8,
        }
    }
}

/// Held-out top-1 accuracy of a multinomial logistic probe trained by
/// full-batch gradient descent on standardized features.
pub fn linear_probe(reps: ArrayView2<f64>, labels: &[usize], split_seed: u64) -> Result<f64> {
    linear_probe_with(reps, labels, split_seed, ProbeConfig::default())
}

pub fn linear_probe_with(
    reps: ArrayView2<f64>,
    labels: &[usize],
    split_seed: u64,
    cfg: ProbeConfig,
) -> Result<f64> {
    if labels.len() != reps.nrows() {
        return Err(Error::DimensionMismatch {
            context: "probe labels",
            expected: reps.nrows(),
            found: labels.len(),
        });
    }
    crate::numerics::ensure_finite(reps.iter(), "probe representations")?;
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::SingleClass);
    }
    let y: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("present"))
        .collect();
    let (train, test) = stratified_split(&y, classes.len(), cfg.train_fraction, split_seed);
    if test.is_empty() {
        return Err(Error::InvalidArgument("probe test split is empty".into()));
    }

    let xtr = reps.select(Axis(0), &train);
    let mean = column_means(&xtr);
    let sd = xtr
        .var_axis(Axis(0), 0.0)
        .mapv(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
    let standardize = |m: Matrix| (m - &mean) / &sd;
    let xtr = standardize(xtr);
    let xte = standardize(reps.select(Axis(0), &test));

    let (n, d, c) = (train.len(), reps.ncols(), classes.len());
    let mut w = Matrix::zeros((d, c));
    let mut b = Vector::zeros(c);
    let mut target = Matrix::zeros((n, c));
    for (r, &i) in train.iter().enumerate() {
        target[[r, y[i]]] = 1.0;
    }
    for _ in 0..cfg.iterations {
        let mut p = softmax_rows(xtr.dot(&w) + &b);
        p -= &target;
        p /= n as f64;
        let gw = xtr.t().dot(&p) + &(&w * cfg.l2);
        let gb = p.sum_axis(Axis(0));
        w.scaled_add(-cfg.learning_rate, &gw);
        b.scaled_add(-cfg.learning_rate, &gb);
    }
    let scores = xte.dot(&w) + &b;
    let correct = test
        .iter()
        .enumerate()
        .filter(|&(r, &i)| argmax(scores.row(r)) == y[i])
        .count();
    Ok(correct as f64 / test.len() as f64)
}

fn stratified_split(
    y: &[usize],
    n_classes: usize,
    train_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = RngStream::new(seed).substream(Purpose::Split);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..n_classes {
        let mut rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
        rng.shuffle(&mut rows);
        let n_train = ((rows.len() as f64) * train_fraction).round() as usize;
        let n_train = n_train.clamp(1.min(rows.len()), rows.len().saturating_sub(1).max(1));
        train.extend_from_slice(&rows[..n_train]);
        test.extend_from_slice(&rows[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn softmax_rows(mut m: Matrix) -> Matrix {
    for mut row in m.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row /= s;
    }
    m
}

/// Index of the largest entry, ties to the lowest index.
pub(crate) fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Absolute responsive-latent shift per perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitMap {
    /// `d_nu x n_perturbations`.
    #[serde(with = "crate::serde_util::matrix")]
    pub values: Matrix,
    pub perturbations: Vec<String>,
    /// Component with the largest response for each perturbation.
    pub argmax: Vec<usize>,
}

/// Hit map from per-row responsive latents: column `p` holds
/// `|mean z_nu over condition p - mean z_nu over control rows|`.
pub fn hit_map_from_latents(
    z_nu: ArrayView2<f64>,
    ds: &PerturbDataset,
    perturbations: &[usize],
) -> Result<HitMap> {
    if z_nu.nrows() != ds.n_rows() {
        return Err(Error::DimensionMismatch {
            context: "hit map latent rows",
            expected: ds.n_rows(),
            found: z_nu.nrows(),
        });
    }
    let ctrl = ds.control_rows();
    if ctrl.is_empty() {
        return Err(Error::MissingControl);
    }
    let ctrl_mean = z_nu
        .select(Axis(0), &ctrl)
        .mean_axis(Axis(0))
        .expect("nonempty");
    let mut values = Matrix::zeros((z_nu.ncols(), perturbations.len()));
    for (p, &c) in perturbations.iter().enumerate() {
        let rows = ds.rows_of(c);
        if rows.is_empty() {
            return Err(Error::EmptyCondition(ds.conditions[c].name.clone()));
        }
        let m = z_nu
            .select(Axis(0), &rows)
            .mean_axis(Axis(0))
            .expect("nonempty");
        values
            .column_mut(p)
            .assign(&(m - &ctrl_mean).mapv(f64::abs));
    }
    let argmax = (0..perturbations.len())
        .map(|p| argmax(values.column(p)))
        .collect();
    Ok(HitMap {
        values,
        perturbations: perturbations
            .iter()
            .map(|&c| ds.conditions[c].name.clone())
            .collect(),
        argmax,
    })
}

/// Hit map of a trained model over the single-target conditions of `ds`,
/// using posterior-mean responsive latents.
pub fn hit_map(model: &Model, ds: &PerturbDataset) -> Result<HitMap> {
    let (z_nu, _) = model.latent_means(ds.x.view(), ds.u_matrix().view())?;
    hit_map_from_latents(z_nu.view(), ds, &ds.conditions_with(1))
}

/// Evaluation settings shared by model and baseline reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub de_k: usize,
    /// Virtual cells generated per condition; `None` matches the observed count.
    pub n_virtual: Option<usize>,
    pub probe: ProbeConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            de_k: 20,
            n_virtual: None,
            probe: ProbeConfig::default(),
        }
    }
}

/// Metrics for one evaluated condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub condition: String,
    pub n_cells: usize,
    pub rmse: f64,
    pub r2_population: f64,
    pub l2: f64,
    pub delta_pearson: f64,
    pub delta_pearson_degenerate: bool,
    pub de_rmse: f64,
    pub de_r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub mcc_nu: Option<f64>,
    pub r2_block_nu: Option<f64>,
    pub r2_block_iota: Option<f64>,
    pub rmse: f64,
    pub r2_population: f64,
    pub pseudobulk_l2: f64,
    pub delta_pearson: f64,
    pub de_rmse: f64,
    pub de_r2: f64,
    pub probe_accuracy: Option<f64>,
    pub de_k: usize,
    pub population_r2_intercept: bool,
    pub conditions: Vec<ConditionMetrics>,
}

impl EvalReport {
    fn from_conditions(method: &str, de_k: usize, conditions: Vec<ConditionMetrics>) -> Self {
        let n = conditions.len().max(1) as f64;
        let avg = |f: fn(&ConditionMetrics) -> f64| conditions.iter().map(f).sum::<f64>() / n;
        Self {
            method: method.to_string(),
            mcc_nu: None,
            r2_block_nu: None,
            r2_block_iota: None,
            rmse: avg(|c| c.rmse),
            r2_population: avg(|c| c.r2_population),
            pseudobulk_l2: avg(|c| c.l2),
            delta_pearson: avg(|c| c.delta_pearson),
            de_rmse: avg(|c| c.de_rmse),
            de_r2: avg(|c| c.de_r2),
            probe_accuracy: None,
            de_k,
            population_r2_intercept: true,
            conditions,
        }
    }

    /// Per-condition table as CSV.
    pub fn conditions_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "condition",
            "n_cells",
            "rmse",
            "r2_population",
            "l2",
            "delta_pearson",
            "delta_pearson_degenerate",
            "de_rmse",
            "de_r2",
        ])?;
        for c in &self.conditions {
            w.write_record([
                c.condition.clone(),
                c.n_cells.to_string(),
                c.rmse.to_string(),
                c.r2_population.to_string(),
                c.l2.to_string(),
                c.delta_pearson.to_string(),
                c.delta_pearson_degenerate.to_string(),
                c.de_rmse.to_string(),
                c.de_r2.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Scores predictions for the listed conditions of `ds`. `predict` returns
/// generated cells (or a single pseudobulk row) for a condition index.
pub fn evaluate_predictions(
    method: &str,
    ds: &PerturbDataset,
    conditions: &[usize],
    opts: &EvalOptions,
    mut predict: impl FnMut(usize, usize) -> Result<Matrix>,
) -> Result<EvalReport> {
    let ctrl_rows = ds.control_rows();
    if ctrl_rows.is_empty() {
        return Err(Error::MissingControl);
    }
    let ctrl = ds.x.select(Axis(0), &ctrl_rows);
    let ctrl_mean = column_means(&ctrl);
    let k = opts.de_k.min(ds.n_genes());
    let mut rows_out = Vec::with_capacity(conditions.len());
    for &c in conditions {
        let rows = ds.rows_of(c);
        if rows.is_empty() {
            return Err(Error::EmptyCondition(ds.conditions[c].name.clone()));
        }
        let obs = ds.x.select(Axis(0), &rows);
        let pred = predict(c, opts.n_virtual.unwrap_or(rows.len()))?;
        let pop = population_metrics(pred.view(), obs.view())?;
        let pb = pseudobulk_metrics(
            column_means(&pred).view(),
            column_means(&obs).view(),
            ctrl_mean.view(),
        )?;
        let de = de_gene_metrics(pred.view(), obs.view(), ctrl.view(), k)?;
        rows_out.push(ConditionMetrics {
            condition: ds.conditions[c].name.clone(),
            n_cells: rows.len(),
            rmse: pop.rmse,
            r2_population: pop.r2_population,
            l2: pb.l2,
            delta_pearson: pb.delta_pearson,
            delta_pearson_degenerate: pb.delta_pearson_degenerate,
            de_rmse: de.de_rmse,
            de_r2: de.de_r2,
        });
    }
    Ok(EvalReport::from_conditions(method, k, rows_out))
}

/// Full model report on `ds`: prediction metrics for `conditions`, latent
/// identifiability when ground truth is attached, and a probe on the
/// encoder representation.
pub fn evaluate_model(
    model: &Model,
    ds: &PerturbDataset,
    conditions: &[usize],
    opts: &EvalOptions,
    seed: u64,
) -> Result<EvalReport> {
    let ctrl = ds.x.select(Axis(0), &ds.control_rows());
    let mut rng = RngStream::new(seed).substream(Purpose::Predict);
    let mut report = evaluate_predictions("model", ds, conditions, opts, |c, n| {
        model.predict(ctrl.view(), ds.u_of(c).view(), n, &mut rng)
    })?;

    if let Some(z) = &ds.z_true {
        let (z_nu, z_iota) = model.latent_means(ds.x.view(), ds.u_matrix().view())?;
        report.mcc_nu = Some(mcc(z.z_nu.view(), z_nu.view())?);
        report.r2_block_nu = Some(block_r2(z.z_nu.view(), z_nu.view())?);
        report.r2_block_iota = Some(block_r2(z.z_iota.view(), z_iota.view())?);
    }
    report.probe_accuracy =
        probe_if_possible(model.encode(ds.x.view())?.view(), &ds.env, seed, opts.probe)?;
    Ok(report)
}

/// Probe accuracy, or `None` when the labels hold a single class.
pub fn probe_if_possible(
    reps: ArrayView2<f64>,
    labels: &[usize],
    seed: u64,
    cfg: ProbeConfig,
) -> Result<Option<f64>> {
    match linear_probe_with(reps, labels, seed, cfg) {
        Ok(a) => Ok(Some(a)),
        Err(Error::SingleClass) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Stacks `[z_nu, z_iota]` posterior means for export.
pub fn latent_table(model: &Model, ds: &PerturbDataset) -> Result<Array2<f64>> {
    let (z_nu, z_iota) = model.latent_means(ds.x.view(), ds.u_matrix().view())?;
    let mut out = Matrix::zeros((ds.n_rows(), z_nu.ncols() + z_iota.ncols()));
    out.slice_mut(s![.., ..z_nu.ncols()]).assign(&z_nu);
    out.slice_mut(s![.., z_nu.ncols()..]).assign(&z_iota);
    Ok(out)
}
