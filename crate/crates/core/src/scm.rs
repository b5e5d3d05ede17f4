//! Latent linear-Gaussian structural causal model.
//!
//! The latent vector is split into an invariant block `z_iota`, whose
//! mechanism never changes, and a responsive block `z_nu`, whose weights,
//! noise mean and noise variance depend on the environment:
//!
//! ```text
//! z_iota = L_ii z_iota + n_iota,        n_iota ~ N(mu_iota, diag beta_iota)
//! z_nu   = L_vi(u) z_iota + L_vv(u) z_nu + n_nu,  n_nu ~ N(mu_nu(u), diag beta_nu(u))
//! ```
//!
//! Environment 0 is the unperturbed reference.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::numerics::{rank, unit_lower_solve, Matrix, RngStream, Vector};
use crate::{Error, Result};

/// Relative pivot tolerance of the environment-sufficiency rank test.
pub const RANK_TOL: f64 = 1e-8;
/// Magnitude below which a structural weight counts as absent.
pub const EDGE_TOL: f64 = 1e-12;

/// All structural weights and per-environment noise parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmParams {
    pub d_iota: usize,
    pub d_nu: usize,
    pub n_envs: usize,
    #[serde(with = "crate::serde_util::matrix")]
    pub lambda_ii: Matrix,
    #[serde(with = "crate::serde_util::matrices")]
    pub lambda_vv: Vec<Matrix>,
    #[serde(with = "crate::serde_util::matrices")]
    pub lambda_vi: Vec<Matrix>,
    #[serde(with = "crate::serde_util::vectors")]
    pub mu_nu: Vec<Vector>,
    #[serde(with = "crate::serde_util::vectors")]
    pub beta_nu: Vec<Vector>,
    #[serde(with = "crate::serde_util::vector")]
    pub mu_iota: Vector,
    #[serde(with = "crate::serde_util::vector")]
    pub beta_iota: Vector,
}

/// Latents and the noise that generated them, one row per draw.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z_iota: Matrix,
    pub z_nu: Matrix,
    pub n_iota: Matrix,
    pub n_nu: Matrix,
    pub env: Vec<usize>,
}

/// Result of the environment-sufficiency audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    pub rank: usize,
    pub required: usize,
    pub sufficient: bool,
}

impl ScmParams {
    /// Parameters with no edges, zero means and unit variances.
    pub fn empty(d_iota: usize, d_nu: usize, n_envs: usize) -> Self {
        Self {
            d_iota,
            d_nu,
            n_envs,
            lambda_ii: Matrix::zeros((d_iota, d_iota)),
            lambda_vv: vec![Matrix::zeros((d_nu, d_nu)); n_envs],
            lambda_vi: vec![Matrix::zeros((d_nu, d_iota)); n_envs],
            mu_nu: vec![Vector::zeros(d_nu); n_envs],
            beta_nu: vec![Vector::ones(d_nu); n_envs],
            mu_iota: Vector::zeros(d_iota),
            beta_iota: Vector::ones(d_iota),
        }
    }

    /// Checks shapes, strict lower triangularity, positivity of variances
    /// and finiteness.
    pub fn validate(&self) -> Result<()> {
        let (di, dn, ne) = (self.d_iota, self.d_nu, self.n_envs);
        if ne == 0 {
            return Err(Error::InvalidConfig("n_envs must be at least 1".into()));
        }
        let shape = |m: &Matrix, r: usize, c: usize, what: &'static str| -> Result<()> {
            if m.dim() != (r, c) {
                return Err(Error::DimensionMismatch {
                    context: what,
                    expected: r * c,
                    found: m.len(),
                });
            }
            Ok(())
        };
        let count = |len: usize, what: &'static str| -> Result<()> {
            if len != ne {
                return Err(Error::DimensionMismatch {
                    context: what,
                    expected: ne,
                    found: len,
                });
            }
            Ok(())
        };
        shape(&self.lambda_ii, di, di, "lambda_ii")?;
        count(self.lambda_vv.len(), "lambda_vv environments")?;
        count(self.lambda_vi.len(), "lambda_vi environments")?;
        count(self.mu_nu.len(), "mu_nu environments")?;
        count(self.beta_nu.len(), "beta_nu environments")?;
        check_len(self.mu_iota.len(), di, "mu_iota")?;
        check_len(self.beta_iota.len(), di, "beta_iota")?;
        check_strictly_lower(self.lambda_ii.view(), "lambda_ii")?;
        for e in 0..ne {
            shape(&self.lambda_vv[e], dn, dn, "lambda_vv")?;
            shape(&self.lambda_vi[e], dn, di, "lambda_vi")?;
            check_len(self.mu_nu[e].len(), dn, "mu_nu")?;
            check_len(self.beta_nu[e].len(), dn, "beta_nu")?;
            check_strictly_lower(self.lambda_vv[e].view(), "lambda_vv")?;
            check_positive(self.beta_nu[e].view())?;
        }
        check_positive(self.beta_iota.view())?;
        let all = self
            .lambda_ii
            .iter()
            .chain(self.lambda_vv.iter().flatten())
            .chain(self.lambda_vi.iter().flatten())
            .chain(self.mu_nu.iter().flatten())
            .chain(self.beta_nu.iter().flatten())
            .chain(self.mu_iota.iter())
            .chain(self.beta_iota.iter());
        crate::numerics::ensure_finite(all, "scm parameters")
    }

    fn check_env(&self, env: usize) -> Result<()> {
        if env >= self.n_envs {
            return Err(Error::InvalidArgument(format!(
                "environment {env} out of range (n_envs = {})",
                self.n_envs
            )));
        }
        Ok(())
    }

    /// The full structural matrix `I - Lambda(u)` over `(z_iota, z_nu)`.
    pub fn block_matrix(&self, env: usize) -> Result<Matrix> {
        self.check_env(env)?;
        let (di, dn) = (self.d_iota, self.d_nu);
        let mut m = Matrix::eye(di + dn);
        m.slice_mut(s![..di, ..di])
            .scaled_add(-1.0, &self.lambda_ii);
        m.slice_mut(s![di.., ..di])
            .scaled_add(-1.0, &self.lambda_vi[env]);
        m.slice_mut(s![di.., di..])
            .scaled_add(-1.0, &self.lambda_vv[env]);
        Ok(m)
    }

    /// Pushes noise rows through the structural equations of `env`.
    pub fn noise_to_z(
        &self,
        env: usize,
        n_iota: ArrayView2<f64>,
        n_nu: ArrayView2<f64>,
    ) -> Result<(Matrix, Matrix)> {
        self.check_env(env)?;
        check_len(n_iota.ncols(), self.d_iota, "n_iota columns")?;
        check_len(n_nu.ncols(), self.d_nu, "n_nu columns")?;
        check_len(n_nu.nrows(), n_iota.nrows(), "n_nu rows")?;
        let n = n_iota.nrows();
        let mut z_iota = Matrix::zeros((n, self.d_iota));
        let mut z_nu = Matrix::zeros((n, self.d_nu));
        for r in 0..n {
            let zi = unit_lower_solve(self.lambda_ii.view(), n_iota.row(r))?;
            let rhs = self.lambda_vi[env].dot(&zi) + n_nu.row(r);
            let zn = unit_lower_solve(self.lambda_vv[env].view(), rhs.view())?;
            z_iota.row_mut(r).assign(&zi);
            z_nu.row_mut(r).assign(&zn);
        }
        Ok((z_iota, z_nu))
    }
}

fn check_len(found: usize, expected: usize, context: &'static str) -> Result<()> {
    if found != expected {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}

fn check_strictly_lower(m: ArrayView2<f64>, what: &str) -> Result<()> {
    for ((i, j), &v) in m.indexed_iter() {
        if j >= i && v != 0.0 {
            return Err(Error::InvalidConfig(format!(
                "{what} must be strictly lower triangular, entry ({i}, {j}) = {v}"
            )));
        }
    }
    Ok(())
}

fn check_positive(v: ArrayView1<f64>) -> Result<()> {
    for (index, &value) in v.iter().enumerate() {
        if !(value > 0.0) {
            return Err(Error::NonPositiveVariance { index, value });
        }
    }
    Ok(())
}

/// Draws `n` latent rows from environment `env`.
pub fn structural_sample(
    params: &ScmParams,
    env: usize,
    n: usize,
    rng: &mut RngStream,
) -> Result<LatentSample> {
    params.check_env(env)?;
    let (di, dn) = (params.d_iota, params.d_nu);
    let sd_i = params.beta_iota.mapv(f64::sqrt);
    let sd_n = params.beta_nu[env].mapv(f64::sqrt);
    let mut n_iota = Matrix::zeros((n, di));
    let mut n_nu = Matrix::zeros((n, dn));
    for r in 0..n {
        for k in 0..di {
            n_iota[[r, k]] = params.mu_iota[k] + sd_i[k] * rng.normal();
        }
        for k in 0..dn {
            n_nu[[r, k]] = params.mu_nu[env][k] + sd_n[k] * rng.normal();
        }
    }
    let (z_iota, z_nu) = params.noise_to_z(env, n_iota.view(), n_nu.view())?;
    Ok(LatentSample {
        z_iota,
        z_nu,
        n_iota,
        n_nu,
        env: vec![env; n],
    })
}

/// Inverts the structural equations: `n = (I - Lambda(u)) z`.
pub fn z_to_noise(
    params: &ScmParams,
    env: usize,
    z_iota: ArrayView2<f64>,
    z_nu: ArrayView2<f64>,
) -> Result<(Matrix, Matrix)> {
    params.check_env(env)?;
    check_len(z_iota.ncols(), params.d_iota, "z_iota columns")?;
    check_len(z_nu.ncols(), params.d_nu, "z_nu columns")?;
    check_len(z_nu.nrows(), z_iota.nrows(), "z_nu rows")?;
    let n_iota = &z_iota - &z_iota.dot(&params.lambda_ii.t());
    let n_nu =
        &z_nu - &z_nu.dot(&params.lambda_vv[env].t()) - z_iota.dot(&params.lambda_vi[env].t());
    Ok((n_iota, n_nu))
}

/// Change in natural parameters of the responsive noise relative to the
/// reference environment: `(mu/beta - mu0/beta0, -(1/beta - 1/beta0)/2)`.
pub fn delta_eta(params: &ScmParams, env: usize) -> Result<Vector> {
    params.check_env(env)?;
    if env == 0 {
        return Err(Error::InvalidArgument(
            "delta_eta is undefined for the reference environment".into(),
        ));
    }
    let dn = params.d_nu;
    let (mu, beta) = (&params.mu_nu[env], &params.beta_nu[env]);
    let (mu0, beta0) = (&params.mu_nu[0], &params.beta_nu[0]);
    let mut out = Vector::zeros(2 * dn);
    for k in 0..dn {
        out[k] = mu[k] / beta[k] - mu0[k] / beta0[k];
        out[dn + k] = -0.5 * (1.0 / beta[k] - 1.0 / beta0[k]);
    }
    Ok(out)
}

/// Stacks `delta_eta` over all non-reference environments.
pub fn delta_eta_matrix(params: &ScmParams) -> Result<Matrix> {
    let rows = params.n_envs.saturating_sub(1);
    let mut m = Matrix::zeros((rows, 2 * params.d_nu));
    for e in 1..params.n_envs {
        m.row_mut(e - 1).assign(&delta_eta(params, e)?);
    }
    Ok(m)
}

/// Whether the environments perturb the responsive noise in enough
/// independent directions: the stacked `delta_eta` matrix must have full
/// column rank `2 d_nu`.
pub fn check_environment_sufficiency(params: &ScmParams) -> Result<SufficiencyReport> {
    let required = 2 * params.d_nu;
    if params.n_envs < required + 1 {
        return Err(Error::TooFewEnvironments {
            have: params.n_envs,
            need: required + 1,
        });
    }
    let m = delta_eta_matrix(params)?;
    let r = rank(m.view(), RANK_TOL);
    Ok(SufficiencyReport {
        rank: r,
        required,
        sufficient: r == required,
    })
}

/// Per responsive node, whether some environment cuts every incoming edge.
pub fn check_intervention_sufficiency(params: &ScmParams) -> Vec<bool> {
    (0..params.d_nu)
        .map(|i| {
            (0..params.n_envs).any(|e| {
                let vv = params.lambda_vv[e].row(i);
                let vi = params.lambda_vi[e].row(i);
                vv.iter().chain(vi.iter()).all(|v| v.abs() <= EDGE_TOL)
            })
        })
        .collect()
}

/// Stacks latent samples row-wise.
pub fn concat_samples(parts: &[LatentSample]) -> LatentSample {
    let stack = |f: &dyn Fn(&LatentSample) -> &Matrix, cols: usize| -> Matrix {
        let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
        if views.is_empty() {
            Array2::zeros((0, cols))
        } else {
            ndarray::concatenate(Axis(0), &views).expect("consistent latent widths")
        }
    };
    let (di, dn) = parts
        .first()
        .map(|p| (p.z_iota.ncols(), p.z_nu.ncols()))
        .unwrap_or((0, 0));
    LatentSample {
        z_iota: stack(&|p| &p.z_iota, di),
        z_nu: stack(&|p| &p.z_nu, dn),
        n_iota: stack(&|p| &p.n_iota, di),
        n_nu: stack(&|p| &p.n_nu, dn),
        env: parts.iter().flat_map(|p| p.env.iter().copied()).collect(),
    }
}

/// Population mean of `z_nu` in `env` implied by the linear-Gaussian model.
pub fn expected_z_nu(params: &ScmParams, env: usize) -> Result<Array1<f64>> {
    params.check_env(env)?;
    let ez_i = unit_lower_solve(params.lambda_ii.view(), params.mu_iota.view())?;
    let rhs = params.lambda_vi[env].dot(&ez_i) + &params.mu_nu[env];
    unit_lower_solve(params.lambda_vv[env].view(), rhs.view())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numerics::determinant;
    use proptest::prelude::*;

    /// Random valid parameters with dense lower-triangular weights.
    pub(crate) fn random_params(
        d_iota: usize,
        d_nu: usize,
        n_envs: usize,
        rng: &mut RngStream,
    ) -> ScmParams {
        let mut p = ScmParams::empty(d_iota, d_nu, n_envs);
        for i in 0..d_iota {
            for j in 0..i {
                p.lambda_ii[[i, j]] = rng.uniform(-1.0, 1.0);
            }
            p.mu_iota[i] = rng.uniform(-1.0, 1.0);
            p.beta_iota[i] = rng.uniform(0.5, 2.0);
        }
        for e in 0..n_envs {
            for i in 0..d_nu {
                for j in 0..i {
                    p.lambda_vv[e][[i, j]] = rng.uniform(-1.0, 1.0);
                }
                for j in 0..d_iota {
                    p.lambda_vi[e][[i, j]] = rng.uniform(-1.0, 1.0);
                }
                p.mu_nu[e][i] = rng.uniform(-2.0, 2.0);
                p.beta_nu[e][i] = rng.uniform(0.5, 2.0);
            }
        }
        p
    }

    #[test]
    fn noiseless_without_edges_returns_means() {
        let mut p = ScmParams::empty(2, 3, 2);
        p.mu_iota = ndarray::array![0.5, -1.0];
        p.mu_nu[1] = ndarray::array![1.0, 2.0, 3.0];
        p.beta_iota.fill(1e-12);
        p.beta_nu[1].fill(1e-12);
        let s = structural_sample(&p, 1, 5, &mut RngStream::new(0)).unwrap();
        for r in 0..5 {
            for k in 0..2 {
                assert!((s.z_iota[[r, k]] - p.mu_iota[k]).abs() < 1e-5);
            }
            for k in 0..3 {
                assert!((s.z_nu[[r, k]] - p.mu_nu[1][k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sample_mean_matches_closed_form() {
        let mut rng = RngStream::new(17);
        let p = random_params(3, 3, 2, &mut rng);
        let n = 100_000;
        let s = structural_sample(&p, 1, n, &mut rng).unwrap();
        let mean = s.z_nu.mean_axis(Axis(0)).unwrap();
        let sd = s.z_nu.std_axis(Axis(0), 1.0);
        let expected = expected_z_nu(&p, 1).unwrap();
        for k in 0..3 {
            let se = sd[k] / (n as f64).sqrt();
            assert!(
                (mean[k] - expected[k]).abs() < 3.0 * se,
                "coord {k}: {} vs {}",
                mean[k],
                expected[k]
            );
        }
    }

    #[test]
    fn reference_env_is_standard_normal() {
        let p = ScmParams::empty(2, 2, 1);
        let n = 10_000;
        let s = structural_sample(&p, 0, n, &mut RngStream::new(4)).unwrap();
        for k in 0..2 {
            let mut col = s.z_nu.column(k).to_vec();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let d = col
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let f = std_normal_cdf(x);
                    (f - i as f64 / n as f64)
                        .abs()
                        .max(((i + 1) as f64 / n as f64 - f).abs())
                })
                .fold(0.0, f64::max);
            // Critical value for p = 0.01 is about 1.628 / sqrt(n).
            assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
        }
    }

    fn std_normal_cdf(x: f64) -> f64 {
        0.5 * erfc(-x / std::f64::consts::SQRT_2)
    }

    // Numerical Recipes erfc, relative error below 1.2e-7.
    fn erfc(x: f64) -> f64 {
        let z = x.abs();
        let t = 1.0 / (1.0 + 0.5 * z);
        let r = t
            * (-z * z - 1.26551223
                + t * (1.00002368
                    + t * (0.37409196
                        + t * (0.09678418
                            + t * (-0.18628806
                                + t * (0.27886807
                                    + t * (-1.13520398
                                        + t * (1.48851587
                                            + t * (-0.82215223 + t * 0.17087277)))))))))
                .exp();
        if x >= 0.0 {
            r
        } else {
            2.0 - r
        }
    }

    #[test]
    fn noise_round_trip() {
        let mut rng = RngStream::new(8);
        let p = random_params(4, 3, 3, &mut rng);
        let s = structural_sample(&p, 2, 50, &mut rng).unwrap();
        let (ni, nn) = z_to_noise(&p, 2, s.z_iota.view(), s.z_nu.view()).unwrap();
        assert!((&ni - &s.n_iota).iter().all(|d| d.abs() < 1e-10));
        assert!((&nn - &s.n_nu).iter().all(|d| d.abs() < 1e-10));
    }

    #[test]
    fn zero_weights_make_noise_equal_latents() {
        let p = ScmParams::empty(2, 2, 1);
        let z = Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64);
        let (ni, nn) = z_to_noise(&p, 0, z.view(), z.view()).unwrap();
        assert_eq!(ni, z);
        assert_eq!(nn, z);
    }

    #[test]
    fn unit_determinant() {
        let mut rng = RngStream::new(12);
        let p = random_params(5, 4, 3, &mut rng);
        for e in 0..3 {
            let det = determinant(p.block_matrix(e).unwrap().view()).unwrap();
            assert!((det.abs() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn delta_eta_examples() {
        let p = ScmParams::empty(1, 2, 3);
        assert!(delta_eta(&p, 1).unwrap().iter().all(|&v| v == 0.0));

        let mut p = ScmParams::empty(1, 1, 2);
        p.mu_nu[1][0] = 1.0;
        assert_eq!(delta_eta(&p, 1).unwrap().to_vec(), vec![1.0, 0.0]);

        let mut p = ScmParams::empty(1, 1, 2);
        p.beta_nu[1][0] = 2.0;
        assert_eq!(delta_eta(&p, 1).unwrap().to_vec(), vec![0.0, 0.25]);

        assert!(delta_eta(&p, 0).is_err());
    }

    #[test]
    fn cloned_reference_is_insufficient() {
        let p = ScmParams::empty(2, 2, 5);
        let r = check_environment_sufficiency(&p).unwrap();
        assert_eq!(r.rank, 0);
        assert!(!r.sufficient);
    }

    #[test]
    fn too_few_environments() {
        let p = ScmParams::empty(2, 2, 4);
        assert!(matches!(
            check_environment_sufficiency(&p),
            Err(Error::TooFewEnvironments { have: 4, need: 5 })
        ));
    }

    #[test]
    fn constructed_basis_is_sufficient() {
        // Env k (1..=d) shifts the mean of coordinate k; env d+k changes
        // its variance. Each Delta-eta is a scaled unit vector.
        let d = 3;
        let mut p = ScmParams::empty(1, d, 2 * d + 1);
        for k in 0..d {
            p.mu_nu[1 + k][k] = 1.5;
            p.beta_nu[1 + d + k][k] = 2.0;
        }
        let r = check_environment_sufficiency(&p).unwrap();
        assert_eq!(r.rank, 2 * d);
        assert!(r.sufficient);
    }

    #[test]
    fn intervention_flags() {
        let p = ScmParams::empty(2, 3, 2);
        assert_eq!(check_intervention_sufficiency(&p), vec![true; 3]);
        let mut p = ScmParams::empty(2, 2, 2);
        for e in 0..2 {
            p.lambda_vi[e][[1, 0]] = 0.4;
        }
        assert_eq!(check_intervention_sufficiency(&p), vec![true, false]);
    }

    #[test]
    fn validate_rejects_upper_entries() {
        let mut p = ScmParams::empty(2, 2, 1);
        p.lambda_vv[0][[0, 1]] = 0.3;
        assert!(matches!(p.validate(), Err(Error::InvalidConfig(_))));
        let mut p = ScmParams::empty(2, 2, 1);
        p.beta_iota[1] = 0.0;
        assert!(matches!(
            p.validate(),
            Err(Error::NonPositiveVariance { .. })
        ));
    }

    #[test]
    fn json_round_trip() {
        let p = random_params(3, 2, 3, &mut RngStream::new(1));
        let text = serde_json::to_string(&p).unwrap();
        let back: ScmParams = serde_json::from_str(&text).unwrap();
        assert_eq!(p, back);
        assert!(text.contains("\"lambda_vi\""));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn determinant_is_one(seed in any::<u64>(), di in 1usize..6, dn in 1usize..6) {
            let mut rng = RngStream::new(seed);
            let p = random_params(di, dn, 2, &mut rng);
            let det = determinant(p.block_matrix(1).unwrap().view()).unwrap();
            prop_assert!((det - 1.0).abs() < 1e-10);
        }

        #[test]
        fn delta_eta_ignores_weights(seed in any::<u64>()) {
            let mut rng = RngStream::new(seed);
            let p = random_params(3, 2, 3, &mut rng);
            let mut q = p.clone();
            q.lambda_ii.fill(0.0);
            for e in 0..3 {
                q.lambda_vv[e].fill(0.0);
                q.lambda_vi[e].mapv_inplace(|v| 2.0 * v);
            }
            prop_assert_eq!(delta_eta(&p, 2).unwrap(), delta_eta(&q, 2).unwrap());
        }

        #[test]
        fn sample_then_invert_is_identity(seed in any::<u64>()) {
            let mut rng = RngStream::new(seed);
            let p = random_params(3, 3, 2, &mut rng);
            let s = structural_sample(&p, 1, 8, &mut rng).unwrap();
            let (ni, nn) = z_to_noise(&p, 1, s.z_iota.view(), s.z_nu.view()).unwrap();
            let scale = 1.0 + s.n_nu.iter().chain(s.n_iota.iter()).fold(0.0f64, |a, v| a.max(v.abs()));
            prop_assert!((&ni - &s.n_iota).iter().all(|d| d.abs() < 1e-10 * scale));
            prop_assert!((&nn - &s.n_nu).iter().all(|d| d.abs() < 1e-10 * scale));
        }
    }
}
