//! Synthetic datasets drawn from a random latent SCM pushed through an
//! injective leaky-rectifier mixing network.

use std::path::Path;

use ndarray::{concatenate, s, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{self, Condition, Manifest, PerturbDataset, WriteExtras};
use crate::numerics::{condition_number, rank, Matrix, Purpose, RngStream, Vector};
use crate::scm::{
    check_environment_sufficiency, check_intervention_sufficiency, concat_samples,
    structural_sample, LatentSample, ScmParams,
};
use crate::{Error, Result};

const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub x_dim: usize,
    pub d_nu: usize,
    pub d_iota: usize,
    pub n_envs: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Magnitude band of nonzero structural weights.
    pub weight_range: [f64; 2],
    pub edge_prob: f64,
    pub mixing_layers: usize,
    pub leaky_slope: f64,
    /// Environments `1..=hard_interventions` cut every incoming edge of one node.
    pub hard_interventions: usize,
    /// Enforce both identifiability audits on the ground truth.
    pub require_sufficiency: bool,
    /// Standard deviation of the mixing-layer biases.
    pub bias_scale: f64,
    /// Upper bound on the condition number of each square mixing layer.
    pub max_condition: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            x_dim: 500,
            d_nu: 4,
            d_iota: 7,
            n_envs: 12,
            n_train: 3000,
            n_test: 1000,
            weight_range: [0.3, 0.9],
            edge_prob: 0.5,
            mixing_layers: 3,
            leaky_slope: 0.2,
            hard_interventions: 4,
            require_sufficiency: true,
            bias_scale: 0.1,
            max_condition: 100.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let d = self.d_nu + self.d_iota;
        if self.d_nu == 0 || self.d_iota == 0 {
            return bad("d_nu and d_iota must be at least 1".into());
        }
        if self.x_dim < d {
            return bad(format!(
                "x_dim {} is below the latent dimension {d}",
                self.x_dim
            ));
        }
        if self.n_envs < 2 {
            return bad("need a reference and at least one perturbed environment".into());
        }
        if self.require_sufficiency && self.n_envs < 2 * self.d_nu + 1 {
            return bad(format!(
                "environment sufficiency needs n_envs >= 2 d_nu + 1 = {}, got {}",
                2 * self.d_nu + 1,
                self.n_envs
            ));
        }
        if self.hard_interventions > self.d_nu || self.hard_interventions >= self.n_envs {
            return bad(format!(
                "hard_interventions {} exceeds d_nu or the perturbed environments",
                self.hard_interventions
            ));
        }
        let [lo, hi] = self.weight_range;
        if !(0.0 <= lo && lo <= hi && hi.is_finite()) {
            return bad(format!("weight_range [{lo}, {hi}] is not an ordered band"));
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return bad(format!("edge_prob {} outside [0, 1]", self.edge_prob));
        }
        if !(self.leaky_slope > 0.0) {
            return bad("leaky_slope must be positive for the mixing to be injective".into());
        }
        if !(self.max_condition >= 1.0) {
            return bad("max_condition must be at least 1".into());
        }
        if self.n_train < self.n_envs || self.n_test < self.n_envs {
            return bad(format!(
                "every environment needs a row: n_train {} and n_test {} must be >= n_envs {}",
                self.n_train, self.n_test, self.n_envs
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingLayer {
    #[serde(with = "crate::serde_util::matrix")]
    pub weight: Matrix,
    #[serde(with = "crate::serde_util::vector")]
    pub bias: Vector,
}

/// `g(z) = lift * act(W_L ... act(W_1 z + b_1) ... + b_L)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixing {
    pub layers: Vec<MixingLayer>,
    #[serde(with = "crate::serde_util::matrix")]
    pub lift: Matrix,
    pub leaky_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scm: ScmParams,
    pub mixing: Mixing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub x: Matrix,
    pub env: Vec<usize>,
    pub z_true: LatentSample,
    pub control_rows: Vec<usize>,
}

impl SynthDataset {
    /// The general dataset view: env `e >= 1` targets index `e - 1`.
    pub fn to_perturb_dataset(&self, n_envs: usize) -> PerturbDataset {
        PerturbDataset {
            x: self.x.clone(),
            env: self.env.clone(),
            conditions: synth_conditions(n_envs),
            u_dim: n_envs - 1,
            gene_names: None,
            target_names: None,
            z_true: Some(self.z_true.clone()),
        }
    }
}

/// Condition table of a synthetic dataset: the reference plus one single
/// perturbation per remaining environment.
pub fn synth_conditions(n_envs: usize) -> Vec<Condition> {
    std::iter::once(Condition::control())
        .chain((1..n_envs).map(|e| Condition {
            name: format!("env_{e}"),
            targets: vec![e - 1],
        }))
        .collect()
}

fn random_weight(config: &SynthConfig, rng: &mut RngStream) -> f64 {
    if rng.bernoulli(config.edge_prob) {
        rng.sign() * rng.uniform(config.weight_range[0], config.weight_range[1])
    } else {
        0.0
    }
}

fn random_lower(n: usize, config: &SynthConfig, rng: &mut RngStream) -> Matrix {
    let mut m = Matrix::zeros((n, n));
    for i in 0..n {
        for j in 0..i {
            m[[i, j]] = random_weight(config, rng);
        }
    }
    m
}

fn resample_noise(scm: &mut ScmParams, rng: &mut RngStream) {
    for e in 1..scm.n_envs {
        for k in 0..scm.d_nu {
            scm.mu_nu[e][k] = rng.uniform(-2.0, 2.0);
            scm.beta_nu[e][k] = rng.uniform(0.5, 2.0);
        }
    }
}

fn gaussian_matrix(rows: usize, cols: usize, sd: f64, rng: &mut RngStream) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || sd * rng.normal())
}

/// Draws a ground-truth SCM and mixing network.
pub fn sample_ground_truth(config: &SynthConfig, rng: &mut RngStream) -> Result<GroundTruth> {
    config.validate()?;
    let (di, dn, ne) = (config.d_iota, config.d_nu, config.n_envs);
    let mut scm = ScmParams::empty(di, dn, ne);
    scm.lambda_ii = random_lower(di, config, rng);
    for e in 1..ne {
        scm.lambda_vv[e] = random_lower(dn, config, rng);
        scm.lambda_vi[e] = Matrix::from_shape_simple_fn((dn, di), || random_weight(config, rng));
        if e <= config.hard_interventions {
            scm.lambda_vv[e].row_mut(e - 1).fill(0.0);
            scm.lambda_vi[e].row_mut(e - 1).fill(0.0);
        }
    }
    if config.require_sufficiency && !check_intervention_sufficiency(&scm).iter().all(|&ok| ok) {
        return Err(Error::InvalidConfig(
            "intervention sufficiency fails: some responsive node has no environment cutting its parents"
                .into(),
        ));
    }
    let mut attempts = 0;
    loop {
        attempts += 1;
        resample_noise(&mut scm, rng);
        if !config.require_sufficiency || check_environment_sufficiency(&scm)?.sufficient {
            break;
        }
        if attempts >= MAX_ATTEMPTS {
            return Err(Error::SamplingExhausted {
                attempts,
                reason: "environment sufficiency".into(),
            });
        }
    }
    scm.validate()?;

    let d = di + dn;
    let sd = 1.0 / (d as f64).sqrt();
    let mut layers = Vec::with_capacity(config.mixing_layers);
    for _ in 0..config.mixing_layers {
        let weight = (0..MAX_ATTEMPTS)
            .map(|_| gaussian_matrix(d, d, sd, rng))
            .find(|w| condition_number(w.view()).is_ok_and(|c| c <= config.max_condition))
            .ok_or_else(|| Error::SamplingExhausted {
                attempts: MAX_ATTEMPTS,
                reason: "well-conditioned mixing layer".into(),
            })?;
        let bias = Vector::from_shape_simple_fn(d, || config.bias_scale * rng.normal());
        layers.push(MixingLayer { weight, bias });
    }
    let lift = (0..MAX_ATTEMPTS)
        .map(|_| gaussian_matrix(config.x_dim, d, sd, rng))
        .find(|l| rank(l.view(), 1e-10) == d)
        .ok_or_else(|| Error::SamplingExhausted {
            attempts: MAX_ATTEMPTS,
            reason: "full-column-rank lift".into(),
        })?;
    Ok(GroundTruth {
        scm,
        mixing: Mixing {
            layers,
            lift,
            leaky_slope: config.leaky_slope,
        },
    })
}

/// Applies the mixing network to latent rows ordered `(z_iota, z_nu)`.
pub fn mix(gt: &GroundTruth, z: &Matrix) -> Result<Matrix> {
    let d = gt.mixing.lift.ncols();
    if z.ncols() != d {
        return Err(Error::DimensionMismatch {
            context: "mix",
            expected: d,
            found: z.ncols(),
        });
    }
    let slope = gt.mixing.leaky_slope;
    let mut h = z.clone();
    for layer in &gt.mixing.layers {
        h = h.dot(&layer.weight.t()) + &layer.bias;
        h.mapv_inplace(|v| if v > 0.0 { v } else { slope * v });
    }
    Ok(h.dot(&gt.mixing.lift.t()))
}

/// Row counts per environment: an even split with the remainder on the
/// reference environment.
pub fn env_counts(n: usize, n_envs: usize) -> Vec<usize> {
    let per = n / n_envs;
    let mut counts = vec![per; n_envs];
    counts[0] += n - per * n_envs;
    counts
}

fn draw_split(gt: &GroundTruth, n: usize, rng: &mut RngStream) -> Result<SynthDataset> {
    let parts = env_counts(n, gt.scm.n_envs)
        .into_iter()
        .enumerate()
        .map(|(e, m)| structural_sample(&gt.scm, e, m, rng))
        .collect::<Result<Vec<_>>>()?;
    let z_true = concat_samples(&parts);
    let z = concatenate(Axis(1), &[z_true.z_iota.view(), z_true.z_nu.view()])
        .expect("equal row counts");
    let x = mix(gt, &z)?;
    let env = z_true.env.clone();
    let control_rows = (0..env.len()).filter(|&r| env[r] == 0).collect();
    Ok(SynthDataset {
        x,
        env,
        z_true,
        control_rows,
    })
}

/// Draws the ground truth and independent train and test splits, all from
/// substreams of `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<(SynthDataset, SynthDataset, GroundTruth)> {
    let root = RngStream::new(config.seed);
    let gt = sample_ground_truth(config, &mut root.substream(Purpose::GroundTruth))?;
    let train = draw_split(&gt, config.n_train, &mut root.substream(Purpose::TrainData))?;
    let test = draw_split(&gt, config.n_test, &mut root.substream(Purpose::TestData))?;
    Ok((train, test, gt))
}

/// Writes `train/` and `test/` dataset directories under `dir`, each with
/// data, latents, ground truth and manifest.
pub fn write_synthetic(
    dir: &Path,
    config: &SynthConfig,
    train: &SynthDataset,
    test: &SynthDataset,
    gt: &GroundTruth,
) -> Result<(Manifest, Manifest)> {
    let gt_json = serde_json::to_string_pretty(gt)?;
    let echo = serde_json::to_value(config)?;
    let write = |name: &str, split: &SynthDataset| {
        data::write_dataset(
            &dir.join(name),
            &split.to_perturb_dataset(config.n_envs),
            WriteExtras {
                ground_truth_json: Some(gt_json.clone()),
                seed: Some(config.seed),
                config: Some(echo.clone()),
                latents: None,
            },
        )
    };
    Ok((write("train", train)?, write("test", test)?))
}

/// Reads `ground_truth.json` from a dataset directory.
pub fn load_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let manifest = data::read_manifest(dir)?;
    let bytes = std::fs::read(dir.join(data::GROUND_TRUTH_FILE))?;
    if let Some(expected) = manifest.checksums.get(data::GROUND_TRUTH_FILE) {
        let found = data::sha256_hex(&bytes);
        if &found != expected {
            return Err(Error::ChecksumMismatch {
                file: data::GROUND_TRUTH_FILE.into(),
                expected: expected.clone(),
                found,
            });
        }
    }
    Ok(serde_json::from_slice(&bytes)?)
}

/// Latent rows ordered `(z_iota, z_nu)`.
pub fn stacked_latents(z: &LatentSample) -> Matrix {
    let d = z.z_iota.ncols() + z.z_nu.ncols();
    let mut out = Matrix::zeros((z.z_iota.nrows(), d));
    out.slice_mut(s![.., ..z.z_iota.ncols()]).assign(&z.z_iota);
    out.slice_mut(s![.., z.z_iota.ncols()..]).assign(&z.z_nu);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::z_to_noise;

    fn small() -> SynthConfig {
        SynthConfig {
            x_dim: 30,
            d_nu: 2,
            d_iota: 3,
            n_envs: 6,
            n_train: 120,
            n_test: 60,
            hard_interventions: 2,
            seed: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_ground_truth_passes_audits() {
        let gt = sample_ground_truth(&SynthConfig::default(), &mut RngStream::new(1)).unwrap();
        assert!(check_environment_sufficiency(&gt.scm).unwrap().sufficient);
        assert_eq!(check_intervention_sufficiency(&gt.scm), vec![true; 4]);
        for layer in &gt.mixing.layers {
            assert!(condition_number(layer.weight.view()).unwrap() <= 100.0);
        }
    }

    #[test]
    fn too_few_environments_rejected() {
        let cfg = SynthConfig {
            n_envs: 5,
            ..SynthConfig::default()
        };
        assert!(matches!(
            sample_ground_truth(&cfg, &mut RngStream::new(0)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn linear_mixing_spans_latent_dimension() {
        let cfg = SynthConfig {
            mixing_layers: 0,
            n_train: 600,
            ..small()
        };
        let (train, _, _) = generate(&cfg).unwrap();
        let centered = &train.x - &train.x.mean_axis(Axis(0)).unwrap();
        let cov = centered.t().dot(&centered);
        assert_eq!(rank(cov.view(), 1e-9), 5);
    }

    #[test]
    fn identity_layer_on_positive_inputs_is_the_lift() {
        let mut gt = sample_ground_truth(&small(), &mut RngStream::new(2)).unwrap();
        gt.mixing.layers = vec![MixingLayer {
            weight: Matrix::eye(5),
            bias: Vector::zeros(5),
        }];
        let z = Matrix::from_shape_fn((4, 5), |(i, j)| 0.1 + (i + j) as f64);
        let x = mix(&gt, &z).unwrap();
        let expected = z.dot(&gt.mixing.lift.t());
        assert!((&x - &expected).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn mixing_is_injective_on_random_pairs() {
        let gt = sample_ground_truth(&small(), &mut RngStream::new(3)).unwrap();
        let mut rng = RngStream::new(4);
        let a = Matrix::from_shape_simple_fn((10_000, 5), || rng.normal());
        let b = Matrix::from_shape_simple_fn((10_000, 5), || rng.normal());
        let (xa, xb) = (mix(&gt, &a).unwrap(), mix(&gt, &b).unwrap());
        let min = (0..10_000)
            .map(|r| (&xa.row(r) - &xb.row(r)).mapv(|v| v * v).sum())
            .fold(f64::INFINITY, f64::min);
        assert!(min > 0.0);
        let zero = Matrix::zeros((2, 5));
        let x0 = mix(&gt, &zero).unwrap();
        assert_eq!(x0.row(0), x0.row(1));
    }

    #[test]
    fn default_split_sizes() {
        let cfg = SynthConfig {
            x_dim: 20,
            mixing_layers: 1,
            ..SynthConfig::default()
        };
        let (train, test, _) = generate(&cfg).unwrap();
        assert_eq!(train.x.nrows(), 3000);
        assert_eq!(test.x.nrows(), 1000);
        assert_eq!(env_counts(3000, 12), vec![250; 12]);
        for e in 0..12 {
            assert_eq!(train.env.iter().filter(|&&v| v == e).count(), 250);
            assert!(test.env.contains(&e));
        }
        assert_eq!(train.control_rows.len(), 250);
    }

    #[test]
    fn remainder_goes_to_reference() {
        assert_eq!(env_counts(14, 4), vec![5, 3, 3, 3]);
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, b, g1) = generate(&small()).unwrap();
        let (c, d, g2) = generate(&small()).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, d);
        assert_eq!(g1, g2);
    }

    #[test]
    fn stored_latents_satisfy_structural_equations() {
        let (train, _, gt) = generate(&small()).unwrap();
        for e in 0..gt.scm.n_envs {
            let rows: Vec<usize> = (0..train.env.len())
                .filter(|&r| train.env[r] == e)
                .collect();
            let zi = train.z_true.z_iota.select(Axis(0), &rows);
            let zn = train.z_true.z_nu.select(Axis(0), &rows);
            let (ni, nn) = z_to_noise(&gt.scm, e, zi.view(), zn.view()).unwrap();
            assert!((&ni - &train.z_true.n_iota.select(Axis(0), &rows))
                .iter()
                .all(|d| d.abs() < 1e-10));
            assert!((&nn - &train.z_true.n_nu.select(Axis(0), &rows))
                .iter()
                .all(|d| d.abs() < 1e-10));
        }
    }

    #[test]
    fn written_directory_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let (train, test, gt) = generate(&cfg).unwrap();
        write_synthetic(dir.path(), &cfg, &train, &test, &gt).unwrap();
        let loaded = data::load_dataset(&dir.path().join("train")).unwrap();
        assert_eq!(loaded, train.to_perturb_dataset(cfg.n_envs));
        assert_eq!(load_ground_truth(&dir.path().join("test")).unwrap(), gt);
    }
}
