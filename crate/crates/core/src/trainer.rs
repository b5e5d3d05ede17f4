//! Minibatch Adam training with random control pairing, checkpoints and a
//! per-epoch loss history.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::data::PerturbDataset;
use crate::model::{Model, ModelConfig, ModelParams, Noise};
use crate::numerics::{Purpose, RngState, RngStream};
use crate::objective::{
    loss_and_grad, schedule, ContrastMode, LossBreakdown, LossWeights, Schedule,
};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub schedule: Schedule,
    pub contrast: ContrastMode,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 100,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
            schedule: Schedule::default(),
            contrast: ContrastMode::Mean,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("adam_eps must be positive".into()));
        }
        self.weights.validate()
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }
}

/// Bias-corrected Adam update on flat slices; `step` is the 1-based count
/// including this update.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    h: AdamHyper,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(Error::DimensionMismatch {
            context: "adam_update",
            expected: n,
            found: grads.len(),
        });
    }
    crate::numerics::ensure_finite(grads.iter(), "gradient")?;
    let c1 = 1.0 - h.beta1.powf(step as f64);
    let c2 = 1.0 - h.beta2.powf(step as f64);
    for i in 0..n {
        let g = grads[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        params[i] -= h.lr * mh / (vh.sqrt() + h.eps);
    }
    Ok(())
}

/// One Adam step over every parameter tensor.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    h: AdamHyper,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    state.step += 1;
    let step = state.step;
    let gs = grads.groups();
    let ps = params.groups_mut();
    let ms = state.m.groups_mut();
    let vs = state.v.groups_mut();
    if gs.len() != ps.len() || ms.len() != ps.len() || vs.len() != ps.len() {
        return Err(Error::DimensionMismatch {
            context: "adam_step parameter groups",
            expected: ps.len(),
            found: gs.len(),
        });
    }
    for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
        adam_update(
            p.1.w.as_slice_mut().expect("standard layout"),
            g.1.w.as_slice().expect("standard layout"),
            m.1.w.as_slice_mut().expect("standard layout"),
            v.1.w.as_slice_mut().expect("standard layout"),
            step,
            h,
        )?;
        adam_update(
            p.1.b.as_slice_mut().expect("standard layout"),
            g.1.b.as_slice().expect("standard layout"),
            m.1.b.as_slice_mut().expect("standard layout"),
            v.1.b.as_slice_mut().expect("standard layout"),
            step,
            h,
        )?;
    }
    Ok(())
}

/// Uniform with-replacement draw of one control row per batch item.
pub fn pair_controls(batch_len: usize, pool: &[usize], rng: &mut RngStream) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::EmptyControlPool);
    }
    Ok((0..batch_len)
        .map(|_| pool[rng.below(pool.len())])
        .collect())
}

/// Mean loss of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: LossBreakdown,
}

/// Stream positions of the three training substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainRngState {
    pub shuffle: RngState,
    pub pairing: RngState,
    pub reparam: RngState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: TrainRngState,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if c.params.f_logvar.is_some() != c.model_config.learn_prior_var {
            return Err(Error::Schema(
                "checkpoint parameters do not match model config".into(),
            ));
        }
        Ok(c)
    }

    pub fn model(&self) -> Model {
        Model {
            config: self.model_config.clone(),
            params: self.params.clone(),
            trained: self.epoch > 0 || self.train_config.epochs == 0,
        }
    }
}

/// Where and how often to persist state, plus a per-epoch callback.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    pub on_epoch: Option<Box<dyn FnMut(&EpochRecord) + 'a>>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
}

fn check_dataset(ds: &PerturbDataset, cfg: &ModelConfig) -> Result<()> {
    if ds.n_genes() != cfg.x_dim {
        return Err(Error::DimensionMismatch {
            context: "dataset genes vs model x_dim",
            expected: cfg.x_dim,
            found: ds.n_genes(),
        });
    }
    if ds.u_dim != cfg.u_dim {
        return Err(Error::DimensionMismatch {
            context: "dataset u_dim vs model u_dim",
            expected: cfg.u_dim,
            found: ds.u_dim,
        });
    }
    ds.validate()
}

/// Trains a freshly initialized model.
pub fn train(
    ds: &PerturbDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    let model = Model::new(model_cfg.clone(), cfg.seed)?;
    let root = RngStream::new(cfg.seed);
    let start = Checkpoint {
        model_config: model_cfg.clone(),
        train_config: cfg.clone(),
        adam: AdamState::new(&model.params),
        params: model.params,
        epoch: 0,
        rng: TrainRngState {
            shuffle: root.substream(Purpose::Shuffle).state(),
            pairing: root.substream(Purpose::Pairing).state(),
            reparam: root.substream(Purpose::Reparam).state(),
        },
        history: Vec::new(),
    };
    resume(ds, start, opts)
}

/// Continues training from a checkpoint up to its configured epoch count.
pub fn resume(
    ds: &PerturbDataset,
    mut ck: Checkpoint,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    let cfg = ck.train_config.clone();
    cfg.validate()?;
    ck.model_config.validate()?;
    check_dataset(ds, &ck.model_config)?;
    let pool = ds.control_rows();
    if pool.is_empty() {
        return Err(Error::EmptyControlPool);
    }
    let u_all = ds.u_matrix();
    let hyper = AdamHyper::from_config(&cfg);
    let mut shuffle = RngStream::from_state(ck.rng.shuffle);
    let mut pairing = RngStream::from_state(ck.rng.pairing);
    let mut reparam = RngStream::from_state(ck.rng.reparam);
    let mut model = ck.model();
    let mut adam = ck.adam.clone();
    let ck_path = opts
        .checkpoint_dir
        .as_ref()
        .map(|d| d.join(CHECKPOINT_FILE));
    if let Some(dir) = &opts.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let mut last_saved: Option<PathBuf> = None;
    let n = ds.n_rows();

    for epoch in ck.epoch..cfg.epochs {
        let w = schedule(epoch, cfg.epochs, cfg.weights, cfg.schedule);
        let mut order: Vec<usize> = (0..n).collect();
        shuffle.shuffle(&mut order);
        let mut sums = [0.0f64; 5];
        for batch in order.chunks(cfg.batch_size) {
            let ctrl = pair_controls(batch.len(), &pool, &mut pairing)?;
            let x = ds.x.select(Axis(0), batch);
            let xc = ds.x.select(Axis(0), &ctrl);
            let u = u_all.select(Axis(0), batch);
            let noise = Noise::sample(batch.len(), &model.config, &mut reparam);
            let step = loss_and_grad(
                &model,
                x.view(),
                xc.view(),
                u.view(),
                &noise,
                w,
                cfg.contrast,
            )
            .and_then(|(loss, grads)| {
                if !loss.total.is_finite() {
                    return Err(Error::NonFinite("loss".into()));
                }
                adam_step(&mut model.params, &grads, &mut adam, hyper)?;
                Ok(loss)
            });
            let loss = match step {
                Ok(l) => l,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        checkpoint: last_saved,
                    })
                }
                Err(e) => return Err(e),
            };
            if !model.params.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    checkpoint: last_saved,
                });
            }
            let k = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([
                loss.rec,
                loss.kl_nu,
                loss.kl_iota,
                loss.contrast,
                loss.total,
            ]) {
                *s += k * v;
            }
        }
        let nf = n.max(1) as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: LossBreakdown {
                rec: sums[0] / nf,
                kl_nu: sums[1] / nf,
                kl_iota: sums[2] / nf,
                contrast: sums[3] / nf,
                total: sums[4] / nf,
                weights_used: w,
            },
        };
        ck.history.push(record);
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&record);
        }
        let done = epoch + 1;
        let periodic = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
        if let (Some(path), true) = (&ck_path, periodic && done < cfg.epochs) {
            snapshot(&mut ck, &model, &adam, done, &shuffle, &pairing, &reparam);
            ck.save(path)?;
            last_saved = Some(path.clone());
        }
    }
    model.trained = true;
    let done = ck.epoch.max(cfg.epochs);
    snapshot(&mut ck, &model, &adam, done, &shuffle, &pairing, &reparam);
    if let Some(path) = &ck_path {
        ck.save(path)?;
        if let Some(dir) = &opts.checkpoint_dir {
            write_history(&dir.join(HISTORY_FILE), &ck.history)?;
        }
    }
    Ok(TrainOutcome {
        history: ck.history.clone(),
        model,
        checkpoint: ck,
    })
}

fn snapshot(
    ck: &mut Checkpoint,
    model: &Model,
    adam: &AdamState,
    epoch: usize,
    shuffle: &RngStream,
    pairing: &RngStream,
    reparam: &RngStream,
) {
    ck.params = model.params.clone();
    ck.adam = adam.clone();
    ck.epoch = epoch;
    ck.rng = TrainRngState {
        shuffle: shuffle.state(),
        pairing: pairing.state(),
        reparam: reparam.state(),
    };
}

/// `epoch,rec,kl_nu,kl_iota,contrast,total,beta_nu,beta_iota,alpha`.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "epoch",
        "rec",
        "kl_nu",
        "kl_iota",
        "contrast",
        "total",
        "beta_nu",
        "beta_iota",
        "alpha",
    ])?;
    for r in history {
        let l = &r.loss;
        let f = crate::data::fmt_f64;
        w.write_record([
            r.epoch.to_string(),
            f(l.rec),
            f(l.kl_nu),
            f(l.kl_iota),
            f(l.contrast),
            f(l.total),
            f(l.weights_used.beta_nu),
            f(l.weights_used.beta_iota),
            f(l.weights_used.alpha),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn hyper(lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, hyper(0.1)).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut p = vec![0.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        for t in 1..=50 {
            adam_update(&mut p, &[3.0], &mut m, &mut v, t, hyper(0.01)).unwrap();
        }
        assert!(p[0] < -0.4);
    }

    #[test]
    fn quadratic_converges() {
        let target = 1.7;
        let mut p = vec![-3.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        for t in 1..=500 {
            let g = [2.0 * (p[0] - target)];
            adam_update(&mut p, &g, &mut m, &mut v, t, hyper(0.1)).unwrap();
        }
        assert!((p[0] - target).abs() < 1e-4, "{}", p[0]);
    }

    #[test]
    fn nan_gradient_rejected() {
        let mut p = vec![0.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        assert!(adam_update(&mut p, &[f64::NAN], &mut m, &mut v, 1, hyper(0.1)).is_err());
    }

    #[test]
    fn pairing_basics() {
        let mut rng = RngStream::new(0);
        assert_eq!(pair_controls(4, &[7], &mut rng).unwrap(), vec![7; 4]);
        assert!(matches!(
            pair_controls(1, &[], &mut rng),
            Err(Error::EmptyControlPool)
        ));
        let a = pair_controls(20, &[1, 2, 3], &mut RngStream::new(5)).unwrap();
        let b = pair_controls(20, &[1, 2, 3], &mut RngStream::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pairing_is_uniform() {
        let pool: Vec<usize> = (0..50).collect();
        let n = 100_000;
        let draws = pair_controls(n, &pool, &mut RngStream::new(9)).unwrap();
        let mut counts = [0f64; 50];
        for d in draws {
            counts[d] += 1.0;
        }
        let e = n as f64 / 50.0;
        let chi2: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
        // 99th percentile of chi-square with 49 degrees of freedom.
        assert!(chi2 < 74.92, "{chi2}");
    }

    fn small_problem() -> (PerturbDataset, ModelConfig) {
        let sc = SynthConfig {
            x_dim: 12,
            d_nu: 2,
            d_iota: 2,
            n_envs: 5,
            n_train: 100,
            n_test: 20,
            hard_interventions: 2,
            mixing_layers: 1,
            seed: 3,
            ..SynthConfig::default()
        };
        let (train, _, _) = generate(&sc).unwrap();
        let ds = train.to_perturb_dataset(5);
        let mc = ModelConfig {
            x_dim: 12,
            d_nu: 2,
            d_iota: 2,
            u_dim: 4,
            hidden_dim: 16,
            ..ModelConfig::default()
        };
        (ds, mc)
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (ds, mc) = small_problem();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&ds, &mc, &cfg, TrainOptions::default()).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.model.params, Model::new(mc, 0).unwrap().params);
    }

    #[test]
    fn training_is_reproducible_and_reduces_loss() {
        let (ds, mc) = small_problem();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = train(&ds, &mc, &cfg, TrainOptions::default()).unwrap();
        let b = train(&ds, &mc, &cfg, TrainOptions::default()).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        let first = a.history[0].loss.rec;
        let last = a.history.last().unwrap().loss.rec;
        assert!(last < 0.5 * first, "{first} -> {last}");
        assert!(a.model.trained);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (ds, mc) = small_problem();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 32,
            checkpoint_every: 3,
            seed: 1,
            ..TrainConfig::default()
        };
        let full = train(&ds, &mc, &cfg, TrainOptions::default()).unwrap();
        let half_cfg = TrainConfig {
            epochs: 3,
            ..cfg.clone()
        };
        let opts = TrainOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            on_epoch: None,
        };
        train(&ds, &mc, &half_cfg, opts).unwrap();
        let mut ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck.epoch, 3);
        ck.train_config = cfg;
        let resumed = resume(&ds, ck, TrainOptions::default()).unwrap();
        assert_eq!(resumed.model.params, full.model.params);
        assert_eq!(resumed.history, full.history);
        assert!(dir.path().join(HISTORY_FILE).exists());
    }

    #[test]
    fn missing_controls_rejected() {
        let (mut ds, mc) = small_problem();
        let rows: Vec<usize> = (0..ds.n_rows()).filter(|&r| ds.env[r] != 0).collect();
        ds = ds.subset(&rows);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&ds, &mc, &cfg, TrainOptions::default()),
            Err(Error::EmptyControlPool)
        ));
    }

    #[test]
    fn overflowing_loss_diverges() {
        let (mut ds, mc) = small_problem();
        ds.x.mapv_inplace(|v| v * 1e200);
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e3,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&ds, &mc, &cfg, TrainOptions::default()),
            Err(Error::Diverged { .. })
        ));
    }
}
