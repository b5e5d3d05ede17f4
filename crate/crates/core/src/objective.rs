//! Training loss: reconstruction, weighted KL terms for both latent blocks,
//! and the alignment penalty between invariant posteriors of a perturbed
//! cell and its paired control. Every term is a batch mean.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelParams, Noise, OutputGrads};
use crate::numerics::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta_nu: f64,
    pub beta_iota: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta_nu: 1.5e-5,
            beta_iota: 5e-4,
            alpha: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_nu", self.beta_nu),
            ("beta_iota", self.beta_iota),
            ("alpha", self.alpha),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub kl_nu: f64,
    pub kl_iota: f64,
    pub contrast: f64,
    pub total: f64,
    pub weights_used: LossWeights,
}

/// Which invariant quantities the alignment term compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastMode {
    /// Posterior means.
    #[default]
    Mean,
    /// Reparameterized draws.
    Draw,
}

/// Shape of the weight schedule over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    /// Both betas ramp linearly from 0 over the first `fraction` of the
    /// epochs; alpha is constant.
    Warmup {
        fraction: f64,
    },
    Constant,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Warmup { fraction: 0.1 }
    }
}

/// Weights in effect at `epoch` (0-based) out of `total_epochs`.
pub fn schedule(
    epoch: usize,
    total_epochs: usize,
    target: LossWeights,
    kind: Schedule,
) -> LossWeights {
    let ramp = match kind {
        Schedule::Constant => 1.0,
        Schedule::Warmup { fraction } => {
            let span = fraction * total_epochs as f64;
            if span <= 0.0 {
                1.0
            } else {
                (epoch as f64 / span).min(1.0)
            }
        }
    };
    LossWeights {
        beta_nu: ramp * target.beta_nu,
        beta_iota: ramp * target.beta_iota,
        alpha: target.alpha,
    }
}

fn check_same(a: ArrayView2<f64>, b: ArrayView2<f64>, context: &'static str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context,
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

fn batch_mean(total: f64, rows: usize) -> f64 {
    if rows == 0 {
        0.0
    } else {
        total / rows as f64
    }
}

/// Mean over rows of `||x - x_hat||^2`.
pub fn recon_loss(x: ArrayView2<f64>, x_hat: ArrayView2<f64>) -> Result<f64> {
    check_same(x, x_hat, "recon_loss")?;
    let sq: f64 = x
        .iter()
        .zip(x_hat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(batch_mean(sq, x.nrows()))
}

/// Mean over rows of `KL(N(mu_q, exp lv_q) || N(mu_p, exp lv_p))` with
/// log-variance inputs; this is the responsive-block KL in noise
/// coordinates, where the prior has mean `mu_nu(u)`.
pub fn kl_nu(
    mu_q: ArrayView2<f64>,
    lv_q: ArrayView2<f64>,
    mu_p: ArrayView2<f64>,
    lv_p: ArrayView2<f64>,
) -> Result<f64> {
    check_same(mu_q, lv_q, "kl_nu logvar")?;
    check_same(mu_q, mu_p, "kl_nu prior mean")?;
    check_same(mu_q, lv_p, "kl_nu prior logvar")?;
    let mut acc = 0.0;
    for (((&m, &l), &mp), &lp) in mu_q
        .iter()
        .zip(lv_q.iter())
        .zip(mu_p.iter())
        .zip(lv_p.iter())
    {
        let d = m - mp;
        acc += 0.5 * ((l - lp).exp() + d * d * (-lp).exp() - 1.0 + lp - l);
    }
    Ok(batch_mean(acc, mu_q.nrows()))
}

fn kl_std_normal(mu: ArrayView2<f64>, lv: ArrayView2<f64>) -> f64 {
    mu.iter()
        .zip(lv.iter())
        .map(|(&m, &l)| 0.5 * (l.exp() + m * m - 1.0 - l))
        .sum()
}

/// Sum of the invariant-block KLs of the perturbed cell and of its control,
/// each against `N(0, I)`, averaged over rows.
pub fn kl_iota(
    mu1: ArrayView2<f64>,
    lv1: ArrayView2<f64>,
    mu2: ArrayView2<f64>,
    lv2: ArrayView2<f64>,
) -> Result<f64> {
    check_same(mu1, lv1, "kl_iota logvar")?;
    check_same(mu1, mu2, "kl_iota control mean")?;
    check_same(mu2, lv2, "kl_iota control logvar")?;
    Ok(batch_mean(
        kl_std_normal(mu1, lv1) + kl_std_normal(mu2, lv2),
        mu1.nrows(),
    ))
}

/// Mean over rows of `||a - b||^2`.
pub fn contrast_loss(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_same(a, b, "contrast_loss")?;
    let sq: f64 = a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(batch_mean(sq, a.nrows()))
}

/// Combines components into a breakdown.
pub fn total_loss(
    rec: f64,
    kl_nu: f64,
    kl_iota: f64,
    contrast: f64,
    w: LossWeights,
) -> Result<LossBreakdown> {
    for (name, v) in [
        ("rec", rec),
        ("kl_nu", kl_nu),
        ("kl_iota", kl_iota),
        ("contrast", contrast),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name}")));
        }
    }
    Ok(LossBreakdown {
        rec,
        kl_nu,
        kl_iota,
        contrast,
        total: rec + w.beta_nu * kl_nu + w.beta_iota * kl_iota + w.alpha * contrast,
        weights_used: w,
    })
}

/// Loss of one batch and its gradient with respect to every parameter.
pub fn loss_and_grad(
    model: &Model,
    x: ArrayView2<f64>,
    x_ctrl: ArrayView2<f64>,
    u: ArrayView2<f64>,
    noise: &Noise,
    weights: LossWeights,
    mode: ContrastMode,
) -> Result<(LossBreakdown, ModelParams)> {
    let (out, cache) = model.forward_cached(x, x_ctrl, u, noise)?;
    let b = x.nrows();
    let inv_b = if b == 0 { 0.0 } else { 1.0 / b as f64 };

    let rec = recon_loss(x, out.x_hat.view())?;
    let knu = kl_nu(
        out.mu_nu.view(),
        out.logvar_nu.view(),
        out.maps.mu.view(),
        out.maps.logvar.view(),
    )?;
    let kio = kl_iota(
        out.mu_iota1.view(),
        out.logvar_iota1.view(),
        out.mu_iota2.view(),
        out.logvar_iota2.view(),
    )?;
    let (ca, cb) = match mode {
        ContrastMode::Mean => (&out.mu_iota1, &out.mu_iota2),
        ContrastMode::Draw => (&out.z_iota1, &out.z_iota2),
    };
    let con = contrast_loss(ca.view(), cb.view())?;
    let breakdown = total_loss(rec, knu, kio, con, weights)?;

    let mut up = OutputGrads::zeros(b, &model.config);
    up.x_hat = (&out.x_hat - &x) * (2.0 * inv_b);

    let wn = weights.beta_nu * inv_b;
    let var_p = out.maps.logvar.mapv(|v| v.exp());
    let diff = &out.mu_nu - &out.maps.mu;
    let ratio = (&out.logvar_nu - &out.maps.logvar).mapv(f64::exp);
    up.mu_nu = &diff / &var_p * wn;
    up.mu_prior = -&up.mu_nu;
    up.logvar_nu = (&ratio - 1.0) * (0.5 * wn);
    up.logvar_prior = (1.0 - &ratio - &(&diff * &diff / &var_p)) * (0.5 * wn);

    let wi = weights.beta_iota * inv_b;
    up.mu_iota1 = &out.mu_iota1 * wi;
    up.logvar_iota1 = out.logvar_iota1.mapv(|l| 0.5 * wi * (l.exp() - 1.0));
    up.mu_iota2 = &out.mu_iota2 * wi;
    up.logvar_iota2 = out.logvar_iota2.mapv(|l| 0.5 * wi * (l.exp() - 1.0));

    if weights.alpha != 0.0 {
        let dc: Matrix = (ca - cb) * (2.0 * weights.alpha * inv_b);
        match mode {
            ContrastMode::Mean => {
                up.mu_iota1 += &dc;
                up.mu_iota2 -= &dc;
            }
            ContrastMode::Draw => {
                up.z_iota1 += &dc;
                up.z_iota2 -= &dc;
            }
        }
    }
    let grads = model.backward(&out, &cache, &up)?;
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::{finite_diff_check, gauss_kl_diag, RngStream};
    use ndarray::{array, Array1};

    #[test]
    fn recon_examples() {
        let x = array![[1.0, 2.0, 3.0], [0.0, -1.0, 4.0]];
        assert_eq!(recon_loss(x.view(), x.view()).unwrap(), 0.0);
        let shifted = &x + 1.0;
        assert_eq!(recon_loss(x.view(), shifted.view()).unwrap(), 3.0);
        let mut rng = RngStream::new(0);
        let a = Matrix::from_shape_simple_fn((5, 7), || rng.normal());
        let b = Matrix::from_shape_simple_fn((5, 7), || rng.normal());
        let mut naive = 0.0;
        for i in 0..5 {
            for j in 0..7 {
                naive += (a[[i, j]] - b[[i, j]]).powi(2);
            }
        }
        assert!((recon_loss(a.view(), b.view()).unwrap() - naive / 5.0).abs() < 1e-12);
    }

    #[test]
    fn kl_nu_zero_at_prior() {
        let mu = array![[0.3, -0.2]];
        let z = Matrix::zeros((1, 2));
        assert_eq!(
            kl_nu(mu.view(), z.view(), mu.view(), z.view()).unwrap(),
            0.0
        );
    }

    #[test]
    fn kl_nu_matches_closed_form_kernel() {
        let mut rng = RngStream::new(1);
        let mq = Matrix::from_shape_simple_fn((1, 4), || rng.normal());
        let lq = Matrix::from_shape_simple_fn((1, 4), || rng.uniform(-1.0, 1.0));
        let mp = Matrix::from_shape_simple_fn((1, 4), || rng.normal());
        let lp = Matrix::from_shape_simple_fn((1, 4), || rng.uniform(-1.0, 1.0));
        let oracle = gauss_kl_diag(
            mq.row(0),
            lq.row(0).mapv(f64::exp).view(),
            mp.row(0),
            lp.row(0).mapv(f64::exp).view(),
        )
        .unwrap();
        let got = kl_nu(mq.view(), lq.view(), mp.view(), lp.view()).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn kl_iota_examples() {
        let z = Matrix::zeros((1, 3));
        assert_eq!(
            kl_iota(z.view(), z.view(), z.view(), z.view()).unwrap(),
            0.0
        );
        let m = array![[1.0, 0.0, 0.0]];
        assert!((kl_iota(m.view(), z.view(), z.view(), z.view()).unwrap() - 0.5).abs() < 1e-15);

        let mut rng = RngStream::new(2);
        let mut draw = || Matrix::from_shape_simple_fn((1, 3), || rng.uniform(-1.0, 1.0));
        let (m1, l1, m2, l2) = (draw(), draw(), draw(), draw());
        let zeros = Array1::zeros(3);
        let ones = Array1::ones(3);
        let oracle = gauss_kl_diag(
            m1.row(0),
            l1.row(0).mapv(f64::exp).view(),
            zeros.view(),
            ones.view(),
        )
        .unwrap()
            + gauss_kl_diag(
                m2.row(0),
                l2.row(0).mapv(f64::exp).view(),
                zeros.view(),
                ones.view(),
            )
            .unwrap();
        let got = kl_iota(m1.view(), l1.view(), m2.view(), l2.view()).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn contrast_examples() {
        let a = array![[1.0, 2.0]];
        assert_eq!(contrast_loss(a.view(), a.view()).unwrap(), 0.0);
        let b = array![[1.0, 3.0]];
        assert_eq!(contrast_loss(a.view(), b.view()).unwrap(), 1.0);
    }

    #[test]
    fn schedule_examples() {
        let t = LossWeights::default();
        let w0 = schedule(0, 100, t, Schedule::default());
        assert_eq!((w0.beta_nu, w0.beta_iota, w0.alpha), (0.0, 0.0, 0.1));
        let w5 = schedule(5, 100, t, Schedule::default());
        assert!((w5.beta_nu - 0.75e-5).abs() < 1e-20);
        assert!((w5.beta_iota - 2.5e-4).abs() < 1e-18);
        assert_eq!(schedule(10, 100, t, Schedule::default()), t);
        assert_eq!(schedule(73, 100, t, Schedule::default()), t);
        assert_eq!(schedule(0, 100, t, Schedule::Constant), t);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights {
            beta_nu: 1.0,
            beta_iota: 1.0,
            alpha: 1.0,
        };
        assert_eq!(total_loss(1.0, 2.0, 3.0, 4.0, w).unwrap().total, 10.0);
        let zero = LossWeights {
            beta_nu: 0.0,
            beta_iota: 0.0,
            alpha: 0.0,
        };
        assert_eq!(total_loss(1.5, 2.0, 3.0, 4.0, zero).unwrap().total, 1.5);
        assert!(matches!(
            total_loss(f64::NAN, 0.0, 0.0, 0.0, w),
            Err(Error::NonFinite(_))
        ));
    }

    fn tiny(learn_prior_var: bool) -> ModelConfig {
        ModelConfig {
            x_dim: 20,
            d_nu: 2,
            d_iota: 3,
            u_dim: 3,
            hidden_dim: 8,
            learn_prior_var,
            ..ModelConfig::default()
        }
    }

    fn perturbed_model(cfg: ModelConfig, seed: u64) -> Model {
        let mut m = Model::new(cfg, seed).unwrap();
        let mut rng = RngStream::new(seed + 100);
        m.params.for_each_mut(|name, s| {
            if name.starts_with('f') {
                s.iter_mut().for_each(|v| *v = rng.uniform(-0.4, 0.4));
            } else {
                s.iter_mut().for_each(|v| *v += rng.uniform(-0.05, 0.05));
            }
        });
        m
    }

    fn check_gradients(cfg: ModelConfig, mode: ContrastMode, seed: u64) -> f64 {
        let model = perturbed_model(cfg.clone(), seed);
        let mut rng = RngStream::new(seed);
        let x = Matrix::from_shape_simple_fn((4, cfg.x_dim), || 0.3 * rng.normal());
        let xc = Matrix::from_shape_simple_fn((4, cfg.x_dim), || 0.3 * rng.normal());
        let u = array![
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 1.0]
        ];
        let noise = Noise::sample(4, &cfg, &mut rng);
        let w = LossWeights {
            beta_nu: 0.7,
            beta_iota: 0.3,
            alpha: 0.5,
        };
        let (_, grads) =
            loss_and_grad(&model, x.view(), xc.view(), u.view(), &noise, w, mode).unwrap();
        let flat = model.params.to_flat();
        let analytic = grads.to_flat();
        let mut probe = model.clone();
        finite_diff_check(
            |p| {
                probe.params.set_flat(p).unwrap();
                loss_and_grad(&probe, x.view(), xc.view(), u.view(), &noise, w, mode)
                    .map(|(l, _)| l.total)
                    .unwrap_or(f64::NAN)
            },
            &flat,
            &analytic,
            3e-5,
        )
        .unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let err = check_gradients(tiny(false), ContrastMode::Mean, seed);
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn draw_contrast_and_learned_variance_gradients() {
        let err = check_gradients(tiny(true), ContrastMode::Draw, 7);
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn zero_alpha_ignores_contrast_for_identical_heads() {
        let cfg = tiny(false);
        let model = perturbed_model(cfg.clone(), 3);
        let mut rng = RngStream::new(3);
        let x = Matrix::from_shape_simple_fn((4, 20), || rng.normal());
        let u = Matrix::zeros((4, 3));
        let noise = Noise::sample(4, &cfg, &mut rng);
        let w = LossWeights {
            alpha: 0.0,
            ..LossWeights::default()
        };
        let (a, ga) = loss_and_grad(
            &model,
            x.view(),
            x.view(),
            u.view(),
            &noise,
            w,
            ContrastMode::Mean,
        )
        .unwrap();
        let w1 = LossWeights { alpha: 1.0, ..w };
        let (b, gb) = loss_and_grad(
            &model,
            x.view(),
            x.view(),
            u.view(),
            &noise,
            w1,
            ContrastMode::Mean,
        )
        .unwrap();
        assert_eq!(a.contrast, 0.0);
        assert_eq!(a.total, b.total);
        assert_eq!(ga, gb);
    }
}
