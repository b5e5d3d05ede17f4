//! The variational model: encoder, posterior heads for both latent blocks,
//! affine condition maps `u -> (L_vv(u), L_vi(u), mu_nu(u))`, the structural
//! reparameterization of the responsive block, and the decoder.
//!
//! Gradients are written by hand. [`Model::forward_cached`] records every
//! activation needed by [`Model::backward`], which maps upstream gradients on
//! the forward outputs to gradients on every parameter.

use ndarray::{concatenate, s, Array1, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::numerics::{
    unit_lower_solve, unit_lower_solve_transposed, Matrix, Purpose, RngStream, Vector,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub x_dim: usize,
    pub d_nu: usize,
    pub d_iota: usize,
    pub u_dim: usize,
    pub hidden_dim: usize,
    pub leaky_slope: f64,
    /// Log-variance outputs are clamped to `[-logvar_clamp, logvar_clamp]`.
    pub logvar_clamp: f64,
    /// Learn a per-condition prior log-variance for the responsive noise
    /// instead of fixing it to one.
    pub learn_prior_var: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            x_dim: 500,
            d_nu: 4,
            d_iota: 7,
            u_dim: 11,
            hidden_dim: 256,
            leaky_slope: 0.01,
            logvar_clamp: 10.0,
            learn_prior_var: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_nu == 0 || self.d_iota == 0 {
            return Err(Error::InvalidConfig(
                "d_nu and d_iota must be at least 1".into(),
            ));
        }
        if self.hidden_dim == 0 || self.x_dim == 0 {
            return Err(Error::InvalidConfig(
                "hidden_dim and x_dim must be at least 1".into(),
            ));
        }
        if !(self.logvar_clamp > 0.0) || !(self.leaky_slope >= 0.0) {
            return Err(Error::InvalidConfig(
                "logvar_clamp must be positive, leaky_slope nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Number of strictly-lower entries of `L_vv`.
    pub fn n_tri(&self) -> usize {
        self.d_nu * self.d_nu.saturating_sub(1) / 2
    }
}

/// `y = x w + b` with `w` stored `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    #[serde(with = "crate::serde_util::matrix")]
    pub w: Matrix,
    #[serde(with = "crate::serde_util::vector")]
    pub b: Vector,
}

impl Affine {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Matrix::zeros((fan_in, fan_out)),
            b: Vector::zeros(fan_out),
        }
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, zero bias.
    pub fn uniform(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self {
            w: Matrix::from_shape_simple_fn((fan_in, fan_out), || rng.uniform(-bound, bound)),
            b: Vector::zeros(fan_out),
        }
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Matrix {
        x.dot(&self.w) + &self.b
    }

    fn accumulate_grad(&mut self, input: ArrayView2<f64>, d_out: ArrayView2<f64>) {
        self.w += &input.t().dot(&d_out);
        self.b += &d_out.sum_axis(Axis(0));
    }

    fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// All trainable tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub enc1: Affine,
    pub enc2: Affine,
    pub head_nu: Affine,
    pub head_iota: Affine,
    pub f_vv: Affine,
    pub f_vi: Affine,
    pub f_mu: Affine,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_logvar: Option<Affine>,
    pub dec1: Affine,
    pub dec2: Affine,
    pub dec3: Affine,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut RngStream) -> Self {
        let (x, h, u, dn, di) = (cfg.x_dim, cfg.hidden_dim, cfg.u_dim, cfg.d_nu, cfg.d_iota);
        Self {
            enc1: Affine::uniform(x, h, rng),
            enc2: Affine::uniform(h, h, rng),
            head_nu: Affine::uniform(h + u, 2 * dn, rng),
            head_iota: Affine::uniform(h, 2 * di, rng),
            f_vv: Affine::zeros(u, cfg.n_tri()),
            f_vi: Affine::zeros(u, dn * di),
            f_mu: Affine::zeros(u, dn),
            f_logvar: cfg.learn_prior_var.then(|| Affine::zeros(u, dn)),
            dec1: Affine::uniform(dn + di, h, rng),
            dec2: Affine::uniform(h, h, rng),
            dec3: Affine::uniform(h, x, rng),
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, v| v.fill(0.0));
        z
    }

    /// Named parameter groups in a fixed order.
    pub fn groups(&self) -> Vec<(&'static str, &Affine)> {
        let mut g = vec![
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("head_nu", &self.head_nu),
            ("head_iota", &self.head_iota),
            ("f_vv", &self.f_vv),
            ("f_vi", &self.f_vi),
            ("f_mu", &self.f_mu),
        ];
        if let Some(a) = &self.f_logvar {
            g.push(("f_logvar", a));
        }
        g.extend([
            ("dec1", &self.dec1),
            ("dec2", &self.dec2),
            ("dec3", &self.dec3),
        ]);
        g
    }

    pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut Affine)> {
        let mut g = vec![
            ("enc1", &mut self.enc1),
            ("enc2", &mut self.enc2),
            ("head_nu", &mut self.head_nu),
            ("head_iota", &mut self.head_iota),
            ("f_vv", &mut self.f_vv),
            ("f_vi", &mut self.f_vi),
            ("f_mu", &mut self.f_mu),
        ];
        if let Some(a) = &mut self.f_logvar {
            g.push(("f_logvar", a));
        }
        g.extend([
            ("dec1", &mut self.dec1),
            ("dec2", &mut self.dec2),
            ("dec3", &mut self.dec3),
        ]);
        g
    }

    /// Visits every tensor as a contiguous slice: `(group, slice)`.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&'static str, &mut [f64])) {
        for (name, a) in self.groups_mut() {
            f(name, a.w.as_slice_mut().expect("standard layout"));
            f(name, a.b.as_slice_mut().expect("standard layout"));
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(&'static str, &[f64])) {
        for (name, a) in self.groups() {
            f(name, a.w.as_slice().expect("standard layout"));
            f(name, a.b.as_slice().expect("standard layout"));
        }
    }

    pub fn num_params(&self) -> usize {
        self.groups().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each(|_, s| out.extend_from_slice(s));
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::DimensionMismatch {
                context: "ModelParams::set_flat",
                expected: n,
                found: flat.len(),
            });
        }
        let mut off = 0;
        self.for_each_mut(|_, s| {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        });
        Ok(())
    }

    /// `(group, offset, len)` ranges into the flat vector.
    pub fn group_ranges(&self) -> Vec<(&'static str, usize, usize)> {
        let mut off = 0;
        self.groups()
            .into_iter()
            .map(|(name, a)| {
                let r = (name, off, a.len());
                off += a.len();
                r
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.groups()
            .iter()
            .all(|(_, a)| a.w.iter().chain(a.b.iter()).all(|v| v.is_finite()))
    }
}

/// Standard-normal draws used by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub eps_nu: Matrix,
    pub eps_iota1: Matrix,
    pub eps_iota2: Matrix,
}

impl Noise {
    pub fn sample(batch: usize, cfg: &ModelConfig, rng: &mut RngStream) -> Self {
        let mut draw = |d: usize| Matrix::from_shape_simple_fn((batch, d), || rng.normal());
        Self {
            eps_nu: draw(cfg.d_nu),
            eps_iota1: draw(cfg.d_iota),
            eps_iota2: draw(cfg.d_iota),
        }
    }

    pub fn zeros(batch: usize, cfg: &ModelConfig) -> Self {
        Self {
            eps_nu: Matrix::zeros((batch, cfg.d_nu)),
            eps_iota1: Matrix::zeros((batch, cfg.d_iota)),
            eps_iota2: Matrix::zeros((batch, cfg.d_iota)),
        }
    }
}

/// Condition-map outputs for a batch of condition vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMaps {
    /// Strictly-lower entries of `L_vv(u)`, one row per item.
    pub vv: Matrix,
    /// `L_vi(u)` flattened row-major (`d_nu x d_iota`), one row per item.
    pub vi: Matrix,
    pub mu: Matrix,
    pub logvar: Matrix,
}

/// Everything one training forward pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub mu_nu: Matrix,
    pub logvar_nu: Matrix,
    pub mu_iota1: Matrix,
    pub logvar_iota1: Matrix,
    pub mu_iota2: Matrix,
    pub logvar_iota2: Matrix,
    pub z_tilde: Matrix,
    pub z_nu: Matrix,
    pub z_iota1: Matrix,
    pub z_iota2: Matrix,
    pub x_hat: Matrix,
    pub maps: ConditionMaps,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    x_both: Matrix,
    pre1: Matrix,
    act1: Matrix,
    pre2: Matrix,
    h_both: Matrix,
    nu_in: Matrix,
    raw_lv_nu: Matrix,
    raw_lv_iota: Matrix,
    raw_lv_prior: Matrix,
    u: Matrix,
    noise: Noise,
    dec_in: Matrix,
    dpre1: Matrix,
    dact1: Matrix,
    dpre2: Matrix,
    dact2: Matrix,
}

/// Upstream gradients on the forward outputs. Log-variance gradients are
/// taken with respect to the clamped values.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub x_hat: Matrix,
    pub mu_nu: Matrix,
    pub logvar_nu: Matrix,
    pub mu_iota1: Matrix,
    pub logvar_iota1: Matrix,
    pub mu_iota2: Matrix,
    pub logvar_iota2: Matrix,
    /// Direct gradient on the sampled `z_iota1` beyond its decoder path.
    pub z_iota1: Matrix,
    pub z_iota2: Matrix,
    pub mu_prior: Matrix,
    pub logvar_prior: Matrix,
}

impl OutputGrads {
    pub fn zeros(batch: usize, cfg: &ModelConfig) -> Self {
        let z = |d: usize| Matrix::zeros((batch, d));
        Self {
            x_hat: z(cfg.x_dim),
            mu_nu: z(cfg.d_nu),
            logvar_nu: z(cfg.d_nu),
            mu_iota1: z(cfg.d_iota),
            logvar_iota1: z(cfg.d_iota),
            mu_iota2: z(cfg.d_iota),
            logvar_iota2: z(cfg.d_iota),
            z_iota1: z(cfg.d_iota),
            z_iota2: z(cfg.d_iota),
            mu_prior: z(cfg.d_nu),
            logvar_prior: z(cfg.d_nu),
        }
    }
}

fn leaky(m: &Matrix, slope: f64) -> Matrix {
    m.mapv(|v| if v > 0.0 { v } else { slope * v })
}

fn leaky_backward(grad: &mut Matrix, pre: &Matrix, slope: f64) {
    ndarray::Zip::from(grad).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g *= slope;
        }
    });
}

fn clamp_backward(grad: &mut Matrix, raw: &Matrix, c: f64) {
    ndarray::Zip::from(grad).and(raw).for_each(|g, &r| {
        if !(-c..=c).contains(&r) {
            *g = 0.0;
        }
    });
}

/// Builds `L_vv` from its strictly-lower entries (row-major over `i > j`).
pub fn scatter_lower(entries: ArrayView1<f64>, d: usize) -> Matrix {
    let mut m = Matrix::zeros((d, d));
    let mut t = 0;
    for i in 1..d {
        for j in 0..i {
            m[[i, j]] = entries[t];
            t += 1;
        }
    }
    m
}

fn check_cols(m: ArrayView2<f64>, cols: usize, context: &'static str) -> Result<()> {
    if m.ncols() != cols {
        return Err(Error::DimensionMismatch {
            context,
            expected: cols,
            found: m.ncols(),
        });
    }
    Ok(())
}

fn check_rows(m: ArrayView2<f64>, rows: usize, context: &'static str) -> Result<()> {
    if m.nrows() != rows {
        return Err(Error::DimensionMismatch {
            context,
            expected: rows,
            found: m.nrows(),
        });
    }
    Ok(())
}

/// A model with its configuration and a trained flag guarding prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub trained: bool,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed).substream(Purpose::Init);
        let params = ModelParams::init(&config, &mut rng);
        Ok(Self {
            config,
            params,
            trained: false,
        })
    }

    /// Two affine layers with leaky rectifiers.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Matrix> {
        check_cols(x, self.config.x_dim, "encode input")?;
        crate::numerics::ensure_finite(x.iter(), "encoder input")?;
        let s = self.config.leaky_slope;
        let a1 = leaky(&self.params.enc1.apply(x), s);
        Ok(leaky(&self.params.enc2.apply(a1.view()), s))
    }

    /// Condition maps for a batch of condition vectors.
    pub fn condition_maps(&self, u: ArrayView2<f64>) -> Result<ConditionMaps> {
        check_cols(u, self.config.u_dim, "condition vector")?;
        let c = self.config.logvar_clamp;
        let p = &self.params;
        Ok(ConditionMaps {
            vv: p.f_vv.apply(u),
            vi: p.f_vi.apply(u),
            mu: p.f_mu.apply(u),
            logvar: match &p.f_logvar {
                Some(a) => a.apply(u).mapv(|v| v.clamp(-c, c)),
                None => Matrix::zeros((u.nrows(), self.config.d_nu)),
            },
        })
    }

    /// `(L_vv(u), L_vi(u), mu_nu(u))` for a single condition vector.
    pub fn condition_maps_single(&self, u: ArrayView1<f64>) -> Result<(Matrix, Matrix, Vector)> {
        let maps = self.condition_maps(u.insert_axis(Axis(0)))?;
        let (dn, di) = (self.config.d_nu, self.config.d_iota);
        let lvv = scatter_lower(maps.vv.row(0), dn);
        let lvi = maps
            .vi
            .row(0)
            .to_owned()
            .into_shape_with_order((dn, di))
            .expect("d_nu x d_iota");
        Ok((lvv, lvi, maps.mu.row(0).to_owned()))
    }

    /// Row-wise `z_nu = (I - L_vv)^{-1} (base + L_vi z_iota + mu_nu)`.
    pub fn structural_transform(
        &self,
        base: &Matrix,
        z_iota: &Matrix,
        maps: &ConditionMaps,
    ) -> Result<Matrix> {
        let (dn, di) = (self.config.d_nu, self.config.d_iota);
        let n = base.nrows();
        let mut z_nu = Matrix::zeros((n, dn));
        for r in 0..n {
            let lvv = scatter_lower(maps.vv.row(r), dn);
            let lvi = maps.vi.row(r);
            let mut rhs = &base.row(r) + &maps.mu.row(r);
            for i in 0..dn {
                let row = lvi.slice(s![i * di..(i + 1) * di]);
                rhs[i] += row.dot(&z_iota.row(r));
            }
            z_nu.row_mut(r)
                .assign(&unit_lower_solve(lvv.view(), rhs.view())?);
        }
        Ok(z_nu)
    }

    /// `z_nu` from the posterior base parameters and a noise draw.
    pub fn reparam_structural(
        &self,
        mu_nu: &Matrix,
        sigma_nu: &Matrix,
        eps: &Matrix,
        z_iota: &Matrix,
        u: ArrayView2<f64>,
    ) -> Result<Matrix> {
        let maps = self.condition_maps(u)?;
        let base = mu_nu + &(sigma_nu * eps);
        self.structural_transform(&base, z_iota, &maps)
    }

    /// One training forward pass with a fresh noise draw.
    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        x_ctrl: ArrayView2<f64>,
        u: ArrayView2<f64>,
        rng: &mut RngStream,
    ) -> Result<ForwardOutput> {
        let noise = Noise::sample(x.nrows(), &self.config, rng);
        Ok(self.forward_cached(x, x_ctrl, u, &noise)?.0)
    }

    /// Forward pass on explicit noise, retaining activations for backprop.
    pub fn forward_cached(
        &self,
        x: ArrayView2<f64>,
        x_ctrl: ArrayView2<f64>,
        u: ArrayView2<f64>,
        noise: &Noise,
    ) -> Result<(ForwardOutput, Cache)> {
        let cfg = &self.config;
        let p = &self.params;
        let (b, dn, di, s) = (x.nrows(), cfg.d_nu, cfg.d_iota, cfg.leaky_slope);
        let c = cfg.logvar_clamp;
        check_cols(x, cfg.x_dim, "x")?;
        check_cols(x_ctrl, cfg.x_dim, "x_ctrl")?;
        check_cols(u, cfg.u_dim, "u")?;
        check_rows(x_ctrl, b, "x_ctrl rows")?;
        check_rows(u, b, "u rows")?;
        check_rows(noise.eps_nu.view(), b, "noise rows")?;
        check_cols(noise.eps_nu.view(), dn, "eps_nu")?;
        check_cols(noise.eps_iota1.view(), di, "eps_iota1")?;
        check_cols(noise.eps_iota2.view(), di, "eps_iota2")?;

        // Perturbed rows first, paired controls second.
        let x_both = concatenate(Axis(0), &[x, x_ctrl]).expect("equal widths");
        let pre1 = p.enc1.apply(x_both.view());
        let act1 = leaky(&pre1, s);
        let pre2 = p.enc2.apply(act1.view());
        let h_both = leaky(&pre2, s);
        let h1 = h_both.slice(s![..b, ..]);

        let nu_in = concatenate(Axis(1), &[h1, u]).expect("equal rows");
        let o_nu = p.head_nu.apply(nu_in.view());
        let mu_nu = o_nu.slice(s![.., ..dn]).to_owned();
        let raw_lv_nu = o_nu.slice(s![.., dn..]).to_owned();
        let logvar_nu = raw_lv_nu.mapv(|v| v.clamp(-c, c));

        let o_iota = p.head_iota.apply(h_both.view());
        let raw_lv_iota = o_iota.slice(s![.., di..]).to_owned();
        let lv_iota = raw_lv_iota.mapv(|v| v.clamp(-c, c));
        let mu_iota1 = o_iota.slice(s![..b, ..di]).to_owned();
        let mu_iota2 = o_iota.slice(s![b.., ..di]).to_owned();
        let logvar_iota1 = lv_iota.slice(s![..b, ..]).to_owned();
        let logvar_iota2 = lv_iota.slice(s![b.., ..]).to_owned();

        let z_iota1 = &mu_iota1 + &(logvar_iota1.mapv(|v| (0.5 * v).exp()) * &noise.eps_iota1);
        let z_iota2 = &mu_iota2 + &(logvar_iota2.mapv(|v| (0.5 * v).exp()) * &noise.eps_iota2);
        let z_tilde = &mu_nu + &(logvar_nu.mapv(|v| (0.5 * v).exp()) * &noise.eps_nu);

        let raw_lv_prior = match &p.f_logvar {
            Some(a) => a.apply(u),
            None => Matrix::zeros((b, dn)),
        };
        let maps = ConditionMaps {
            vv: p.f_vv.apply(u),
            vi: p.f_vi.apply(u),
            mu: p.f_mu.apply(u),
            logvar: raw_lv_prior.mapv(|v| v.clamp(-c, c)),
        };
        let z_nu = self.structural_transform(&z_tilde, &z_iota1, &maps)?;

        let dec_in = concatenate(Axis(1), &[z_nu.view(), z_iota1.view()]).expect("equal rows");
        let dpre1 = p.dec1.apply(dec_in.view());
        let dact1 = leaky(&dpre1, s);
        let dpre2 = p.dec2.apply(dact1.view());
        let dact2 = leaky(&dpre2, s);
        let x_hat = p.dec3.apply(dact2.view());
        crate::numerics::ensure_finite(x_hat.iter(), "decoder output")?;

        let out = ForwardOutput {
            mu_nu,
            logvar_nu,
            mu_iota1,
            logvar_iota1,
            mu_iota2,
            logvar_iota2,
            z_tilde,
            z_nu,
            z_iota1,
            z_iota2,
            x_hat,
            maps,
        };
        let cache = Cache {
            x_both,
            pre1,
            act1,
            pre2,
            h_both,
            nu_in,
            raw_lv_nu,
            raw_lv_iota,
            raw_lv_prior,
            u: u.to_owned(),
            noise: noise.clone(),
            dec_in,
            dpre1,
            dact1,
            dpre2,
            dact2,
        };
        Ok((out, cache))
    }

    /// Parameter gradients given upstream gradients on the forward outputs.
    pub fn backward(
        &self,
        out: &ForwardOutput,
        cache: &Cache,
        up: &OutputGrads,
    ) -> Result<ModelParams> {
        let cfg = &self.config;
        let p = &self.params;
        let (b, dn, di, s, c) = (
            out.x_hat.nrows(),
            cfg.d_nu,
            cfg.d_iota,
            cfg.leaky_slope,
            cfg.logvar_clamp,
        );
        let mut g = p.zeros_like();

        // Decoder.
        g.dec3.accumulate_grad(cache.dact2.view(), up.x_hat.view());
        let mut d = up.x_hat.dot(&p.dec3.w.t());
        leaky_backward(&mut d, &cache.dpre2, s);
        g.dec2.accumulate_grad(cache.dact1.view(), d.view());
        let mut d = d.dot(&p.dec2.w.t());
        leaky_backward(&mut d, &cache.dpre1, s);
        g.dec1.accumulate_grad(cache.dec_in.view(), d.view());
        let d_dec_in = d.dot(&p.dec1.w.t());

        let d_z_nu = d_dec_in.slice(s![.., ..dn]).to_owned();
        let mut d_z_iota1 = d_dec_in.slice(s![.., dn..]).to_owned() + &up.z_iota1;

        // Structural solve: z_nu = (I - L)^{-1} rhs.
        let mut d_vv = Matrix::zeros((b, cfg.n_tri()));
        let mut d_vi = Matrix::zeros((b, dn * di));
        let mut d_mu_prior = up.mu_prior.clone();
        let mut d_z_tilde = Matrix::zeros((b, dn));
        for r in 0..b {
            let lvv = scatter_lower(out.maps.vv.row(r), dn);
            let gr = unit_lower_solve_transposed(lvv.view(), d_z_nu.row(r))?;
            let mut t = 0;
            for i in 1..dn {
                for j in 0..i {
                    d_vv[[r, t]] = gr[i] * out.z_nu[[r, j]];
                    t += 1;
                }
            }
            for i in 0..dn {
                for j in 0..di {
                    d_vi[[r, i * di + j]] = gr[i] * out.z_iota1[[r, j]];
                    d_z_iota1[[r, j]] += out.maps.vi[[r, i * di + j]] * gr[i];
                }
            }
            for i in 0..dn {
                d_mu_prior[[r, i]] += gr[i];
                d_z_tilde[[r, i]] = gr[i];
            }
        }

        // Reparameterizations.
        let half_sd = |lv: &Matrix| lv.mapv(|v| 0.5 * (0.5 * v).exp());
        let d_mu_nu = &up.mu_nu + &d_z_tilde;
        let mut d_lv_nu =
            &up.logvar_nu + &(&d_z_tilde * &cache.noise.eps_nu * half_sd(&out.logvar_nu));
        let d_mu_i1 = &up.mu_iota1 + &d_z_iota1;
        let d_lv_i1 =
            &up.logvar_iota1 + &(&d_z_iota1 * &cache.noise.eps_iota1 * half_sd(&out.logvar_iota1));
        let d_mu_i2 = &up.mu_iota2 + &up.z_iota2;
        let d_lv_i2 =
            &up.logvar_iota2 + &(&up.z_iota2 * &cache.noise.eps_iota2 * half_sd(&out.logvar_iota2));

        // Heads.
        clamp_backward(&mut d_lv_nu, &cache.raw_lv_nu, c);
        let mut d_o_nu = Matrix::zeros((b, 2 * dn));
        d_o_nu.slice_mut(s![.., ..dn]).assign(&d_mu_nu);
        d_o_nu.slice_mut(s![.., dn..]).assign(&d_lv_nu);
        g.head_nu.accumulate_grad(cache.nu_in.view(), d_o_nu.view());
        let d_nu_in = d_o_nu.dot(&p.head_nu.w.t());

        let mut d_lv_iota =
            concatenate(Axis(0), &[d_lv_i1.view(), d_lv_i2.view()]).expect("equal widths");
        clamp_backward(&mut d_lv_iota, &cache.raw_lv_iota, c);
        let mut d_o_iota = Matrix::zeros((2 * b, 2 * di));
        d_o_iota.slice_mut(s![..b, ..di]).assign(&d_mu_i1);
        d_o_iota.slice_mut(s![b.., ..di]).assign(&d_mu_i2);
        d_o_iota.slice_mut(s![.., di..]).assign(&d_lv_iota);
        g.head_iota
            .accumulate_grad(cache.h_both.view(), d_o_iota.view());
        let mut d_h = d_o_iota.dot(&p.head_iota.w.t());
        d_h.slice_mut(s![..b, ..])
            .scaled_add(1.0, &d_nu_in.slice(s![.., ..cfg.hidden_dim]));

        // Encoder, shared by both inputs.
        leaky_backward(&mut d_h, &cache.pre2, s);
        g.enc2.accumulate_grad(cache.act1.view(), d_h.view());
        let mut d = d_h.dot(&p.enc2.w.t());
        leaky_backward(&mut d, &cache.pre1, s);
        g.enc1.accumulate_grad(cache.x_both.view(), d.view());

        // Condition maps.
        let u = cache.u.view();
        g.f_vv.accumulate_grad(u, d_vv.view());
        g.f_vi.accumulate_grad(u, d_vi.view());
        g.f_mu.accumulate_grad(u, d_mu_prior.view());
        if let Some(gl) = &mut g.f_logvar {
            let mut d_lvp = up.logvar_prior.clone();
            clamp_backward(&mut d_lvp, &cache.raw_lv_prior, c);
            gl.accumulate_grad(u, d_lvp.view());
        }
        Ok(g)
    }

    /// Posterior-mean latents used for evaluation: `z_iota = mu_iota(x)` and
    /// `z_nu` the structural transform of the posterior base mean.
    pub fn latent_means(&self, x: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<(Matrix, Matrix)> {
        check_rows(u, x.nrows(), "u rows")?;
        let h = self.encode(x)?;
        let (dn, di) = (self.config.d_nu, self.config.d_iota);
        let nu_in = concatenate(Axis(1), &[h.view(), u]).expect("equal rows");
        let mu_nu = self
            .params
            .head_nu
            .apply(nu_in.view())
            .slice(s![.., ..dn])
            .to_owned();
        let mu_iota = self
            .params
            .head_iota
            .apply(h.view())
            .slice(s![.., ..di])
            .to_owned();
        let maps = self.condition_maps(u)?;
        let z_nu = self.structural_transform(&mu_nu, &mu_iota, &maps)?;
        Ok((z_nu, mu_iota))
    }

    /// Posterior means of the invariant block.
    pub fn iota_posterior(&self, x: ArrayView2<f64>) -> Result<(Matrix, Matrix)> {
        let h = self.encode(x)?;
        let di = self.config.d_iota;
        let c = self.config.logvar_clamp;
        let o = self.params.head_iota.apply(h.view());
        Ok((
            o.slice(s![.., ..di]).to_owned(),
            o.slice(s![.., di..]).mapv(|v| v.clamp(-c, c)),
        ))
    }

    pub fn decode(&self, z_nu: &Matrix, z_iota: &Matrix) -> Result<Matrix> {
        let s = self.config.leaky_slope;
        let p = &self.params;
        let z = concatenate(Axis(1), &[z_nu.view(), z_iota.view()]).expect("equal rows");
        let a1 = leaky(&p.dec1.apply(z.view()), s);
        let a2 = leaky(&p.dec2.apply(a1.view()), s);
        Ok(p.dec3.apply(a2.view()))
    }

    /// Samples latents for condition `u` given control cells: `z_iota` from
    /// the invariant posterior of a uniformly chosen control row, `z_nu`
    /// from the learned mechanism with prior noise `N(mu_nu(u), beta_nu(u))`
    /// pushed through the same structural map used in training.
    pub fn predict_latents(
        &self,
        x_ctrl: ArrayView2<f64>,
        u: ArrayView1<f64>,
        n_samples: usize,
        rng: &mut RngStream,
    ) -> Result<(Matrix, Matrix)> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        let (dn, di) = (self.config.d_nu, self.config.d_iota);
        if n_samples == 0 {
            return Ok((Matrix::zeros((0, dn)), Matrix::zeros((0, di))));
        }
        if x_ctrl.nrows() == 0 {
            return Err(Error::EmptyControlPool);
        }
        if u.len() != self.config.u_dim {
            return Err(Error::DimensionMismatch {
                context: "predict condition vector",
                expected: self.config.u_dim,
                found: u.len(),
            });
        }
        let (mu_c, lv_c) = self.iota_posterior(x_ctrl)?;
        let u_rows = u
            .insert_axis(Axis(0))
            .broadcast((n_samples, u.len()))
            .expect("row")
            .to_owned();
        let maps = self.condition_maps(u_rows.view())?;
        let mut z_iota = Matrix::zeros((n_samples, di));
        let mut base = Matrix::zeros((n_samples, dn));
        for r in 0..n_samples {
            let k = rng.below(x_ctrl.nrows());
            for j in 0..di {
                z_iota[[r, j]] = mu_c[[k, j]] + (0.5 * lv_c[[k, j]]).exp() * rng.normal();
            }
            for i in 0..dn {
                base[[r, i]] = maps.mu[[r, i]] + (0.5 * maps.logvar[[r, i]]).exp() * rng.normal();
            }
        }
        let z_nu = self.structural_transform(&base, &z_iota, &maps)?;
        Ok((z_nu, z_iota))
    }

    /// Decoded samples for condition `u` (one-hot or two-hot).
    pub fn predict(
        &self,
        x_ctrl: ArrayView2<f64>,
        u: ArrayView1<f64>,
        n_samples: usize,
        rng: &mut RngStream,
    ) -> Result<Matrix> {
        let (z_nu, z_iota) = self.predict_latents(x_ctrl, u, n_samples, rng)?;
        if n_samples == 0 {
            return Ok(Matrix::zeros((0, self.config.x_dim)));
        }
        let x = self.decode(&z_nu, &z_iota)?;
        crate::numerics::ensure_finite(x.iter(), "prediction")?;
        Ok(x)
    }

    /// Mean of `n_samples` predicted cells.
    pub fn predict_mean(
        &self,
        x_ctrl: ArrayView2<f64>,
        u: ArrayView1<f64>,
        n_samples: usize,
        rng: &mut RngStream,
    ) -> Result<Array1<f64>> {
        let x = self.predict(x_ctrl, u, n_samples.max(1), rng)?;
        Ok(x.mean_axis(Axis(0)).expect("nonempty"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            x_dim: 6,
            d_nu: 3,
            d_iota: 2,
            u_dim: 4,
            hidden_dim: 5,
            ..ModelConfig::default()
        }
    }

    fn randomize_maps(m: &mut Model, rng: &mut RngStream) {
        for a in [&mut m.params.f_vv, &mut m.params.f_vi, &mut m.params.f_mu] {
            a.w.mapv_inplace(|_| rng.uniform(-0.5, 0.5));
            a.b.mapv_inplace(|_| rng.uniform(-0.5, 0.5));
        }
    }

    #[test]
    fn zero_encoder_gives_zero_features() {
        let mut m = Model::new(tiny_config(), 0).unwrap();
        m.params.enc1.w.fill(0.0);
        m.params.enc2.w.fill(0.0);
        let x = Matrix::from_elem((3, 6), 1.7);
        assert!(m.encode(x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_matches_straight_line_oracle() {
        let m = Model::new(tiny_config(), 3).unwrap();
        let mut rng = RngStream::new(1);
        let x = Matrix::from_shape_simple_fn((4, 6), || rng.normal());
        let h = m.encode(x.view()).unwrap();
        let lr = |v: f64| if v > 0.0 { v } else { 0.01 * v };
        for r in 0..4 {
            let mut a = [0.0; 5];
            for (k, ak) in a.iter_mut().enumerate() {
                let mut acc = m.params.enc1.b[k];
                for i in 0..6 {
                    acc += x[[r, i]] * m.params.enc1.w[[i, k]];
                }
                *ak = lr(acc);
            }
            for k in 0..5 {
                let mut acc = m.params.enc2.b[k];
                for (i, ai) in a.iter().enumerate() {
                    acc += ai * m.params.enc2.w[[i, k]];
                }
                assert!((h[[r, k]] - lr(acc)).abs() < 1e-12);
            }
        }
        assert_eq!(h, m.encode(x.view()).unwrap());
    }

    #[test]
    fn condition_maps_are_affine_and_masked() {
        let mut m = Model::new(tiny_config(), 0).unwrap();
        randomize_maps(&mut m, &mut RngStream::new(2));
        let zero = Matrix::zeros((1, 4));
        let maps0 = m.condition_maps(zero.view()).unwrap();
        assert_eq!(maps0.vv.row(0), m.params.f_vv.b);
        assert_eq!(maps0.mu.row(0), m.params.f_mu.b);

        let ua = array![1.0, 0.0, 0.0, 0.0];
        let ub = array![0.0, 0.0, 1.0, 0.0];
        let uab = &ua + &ub;
        let (la, ia, ma) = m.condition_maps_single(ua.view()).unwrap();
        let (lb, ib, mb) = m.condition_maps_single(ub.view()).unwrap();
        let (lab, iab, mab) = m.condition_maps_single(uab.view()).unwrap();
        let (l0, i0, m0) = m.condition_maps_single(zero.row(0)).unwrap();
        let close = |a: &Matrix, b: &Matrix| (a - b).iter().all(|d| d.abs() < 1e-12);
        assert!(close(&(&lab - &l0), &(&(&la - &l0) + &(&lb - &l0))));
        assert!(close(&(&iab - &i0), &(&(&ia - &i0) + &(&ib - &i0))));
        assert!((&(&mab - &m0) - &(&(&ma - &m0) + &(&mb - &m0)))
            .iter()
            .all(|d| d.abs() < 1e-12));
        for i in 0..3 {
            for j in i..3 {
                assert_eq!(lab[[i, j]], 0.0);
            }
        }
    }

    #[test]
    fn reparam_without_maps_is_base() {
        let m = Model::new(tiny_config(), 0).unwrap();
        let mut rng = RngStream::new(9);
        let mu = Matrix::from_shape_simple_fn((3, 3), || rng.normal());
        let sd = Matrix::from_elem((3, 3), 0.5);
        let eps = Matrix::from_shape_simple_fn((3, 3), || rng.normal());
        let zi = Matrix::from_shape_simple_fn((3, 2), || rng.normal());
        let u = Matrix::eye(4).slice(s![..3, ..]).to_owned();
        let z = m.reparam_structural(&mu, &sd, &eps, &zi, u.view()).unwrap();
        assert!((&z - &(&mu + &(&sd * &eps)))
            .iter()
            .all(|d| d.abs() < 1e-15));
        let z0 = m
            .reparam_structural(&mu, &sd, &Matrix::zeros((3, 3)), &zi, u.view())
            .unwrap();
        assert_eq!(z0, mu);
    }

    #[test]
    fn reparam_matches_dense_inverse() {
        let mut m = Model::new(tiny_config(), 0).unwrap();
        let mut rng = RngStream::new(4);
        randomize_maps(&mut m, &mut rng);
        let u = array![[0.0, 1.0, 1.0, 0.0]];
        let mu = Matrix::from_shape_simple_fn((1, 3), || rng.normal());
        let sd = Matrix::from_elem((1, 3), 0.7);
        let eps = Matrix::from_shape_simple_fn((1, 3), || rng.normal());
        let zi = Matrix::from_shape_simple_fn((1, 2), || rng.normal());
        let z = m.reparam_structural(&mu, &sd, &eps, &zi, u.view()).unwrap();
        let (lvv, lvi, mun) = m.condition_maps_single(u.row(0)).unwrap();
        // Dense inverse by Gauss-Jordan.
        let a = Matrix::eye(3) - &lvv;
        let mut aug = concatenate(Axis(1), &[a.view(), Matrix::eye(3).view()]).unwrap();
        for col in 0..3 {
            let piv = aug[[col, col]];
            aug.row_mut(col).mapv_inplace(|v| v / piv);
            for r in 0..3 {
                if r != col {
                    let f = aug[[r, col]];
                    let pr = aug.row(col).to_owned();
                    aug.row_mut(r).scaled_add(-f, &pr);
                }
            }
        }
        let inv = aug.slice(s![.., 3..]).to_owned();
        let rhs = &(&mu.row(0) + &(&sd.row(0) * &eps.row(0))) + &lvi.dot(&zi.row(0)) + &mun;
        let expect = inv.dot(&rhs);
        assert!((&z.row(0) - &expect).iter().all(|d| d.abs() < 1e-10));
    }

    #[test]
    fn forward_structural_residual_and_determinism() {
        let mut m = Model::new(tiny_config(), 1).unwrap();
        let mut rng = RngStream::new(5);
        randomize_maps(&mut m, &mut rng);
        let x = Matrix::from_shape_simple_fn((4, 6), || rng.normal());
        let xc = Matrix::from_shape_simple_fn((4, 6), || rng.normal());
        let u = Matrix::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let a = m
            .forward(x.view(), xc.view(), u.view(), &mut RngStream::new(7))
            .unwrap();
        let b = m
            .forward(x.view(), xc.view(), u.view(), &mut RngStream::new(7))
            .unwrap();
        assert_eq!(a, b);
        for r in 0..4 {
            let lvv = scatter_lower(a.maps.vv.row(r), 3);
            let lvi = a
                .maps
                .vi
                .row(r)
                .to_owned()
                .into_shape_with_order((3, 2))
                .unwrap();
            let lhs = &a.z_nu.row(r) - &lvv.dot(&a.z_nu.row(r));
            let rhs = &a.z_tilde.row(r) + &lvi.dot(&a.z_iota1.row(r)) + &a.maps.mu.row(r);
            assert!((&lhs - &rhs).iter().all(|d| d.abs() < 1e-8));
        }
    }

    #[test]
    fn identical_inputs_share_invariant_latents() {
        let m = Model::new(tiny_config(), 2).unwrap();
        let mut rng = RngStream::new(6);
        let x = Matrix::from_shape_simple_fn((3, 6), || rng.normal());
        let u = Matrix::zeros((3, 4));
        let mut noise = Noise::sample(3, &m.config, &mut rng);
        noise.eps_iota2 = noise.eps_iota1.clone();
        let (out, _) = m
            .forward_cached(x.view(), x.view(), u.view(), &noise)
            .unwrap();
        assert_eq!(out.z_iota1, out.z_iota2);
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let m = Model::new(tiny_config(), 2).unwrap();
        let mut x = Matrix::zeros((2, 6));
        x[[1, 3]] = f64::INFINITY;
        assert!(matches!(m.encode(x.view()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn untrained_model_refuses_prediction() {
        let m = Model::new(tiny_config(), 0).unwrap();
        let xc = Matrix::zeros((2, 6));
        let u = array![1.0, 0.0, 0.0, 0.0];
        assert!(matches!(
            m.predict(xc.view(), u.view(), 3, &mut RngStream::new(0)),
            Err(Error::Untrained)
        ));
    }

    #[test]
    fn prediction_basics() {
        let mut m = Model::new(tiny_config(), 0).unwrap();
        m.trained = true;
        let mut rng = RngStream::new(1);
        let xc = Matrix::from_shape_simple_fn((5, 6), || rng.normal());
        let u = array![0.0, 1.0, 1.0, 0.0];
        assert_eq!(
            m.predict(xc.view(), u.view(), 0, &mut rng).unwrap().dim(),
            (0, 6)
        );
        let a = m
            .predict(xc.view(), u.view(), 8, &mut RngStream::new(3))
            .unwrap();
        let b = m
            .predict(xc.view(), u.view(), 8, &mut RngStream::new(3))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predicted_latent_mean_matches_closed_form() {
        let mut m = Model::new(tiny_config(), 0).unwrap();
        m.trained = true;
        let mut rng = RngStream::new(12);
        randomize_maps(&mut m, &mut rng);
        let xc = Matrix::from_shape_simple_fn((7, 6), || rng.normal());
        let u = array![1.0, 0.0, 0.0, 1.0];
        let n = 10_000;
        let (z_nu, _) = m.predict_latents(xc.view(), u.view(), n, &mut rng).unwrap();
        let (lvv, lvi, mu) = m.condition_maps_single(u.view()).unwrap();
        let (mu_c, _) = m.iota_posterior(xc.view()).unwrap();
        let ez_i = mu_c.mean_axis(Axis(0)).unwrap();
        // E[z_nu] = (I - L)^{-1} (2 mu + L_vi E[z_iota]).
        let rhs = &(2.0 * &mu) + &lvi.dot(&ez_i);
        let expect = unit_lower_solve(lvv.view(), rhs.view()).unwrap();
        let mean = z_nu.mean_axis(Axis(0)).unwrap();
        let sd = z_nu.std_axis(Axis(0), 1.0);
        for k in 0..3 {
            assert!((mean[k] - expect[k]).abs() < 3.0 * sd[k] / (n as f64).sqrt());
        }
    }

    #[test]
    fn flat_round_trip() {
        let m = Model::new(tiny_config(), 8).unwrap();
        let flat = m.params.to_flat();
        assert_eq!(flat.len(), m.params.num_params());
        let mut z = m.params.zeros_like();
        z.set_flat(&flat).unwrap();
        assert_eq!(z, m.params);
        let ranges = m.params.group_ranges();
        assert_eq!(ranges.last().map(|r| r.1 + r.2), Some(flat.len()));
    }

    #[test]
    fn init_zeroes_condition_maps() {
        let m = Model::new(tiny_config(), 4).unwrap();
        for a in [&m.params.f_vv, &m.params.f_vi, &m.params.f_mu] {
            assert!(a.w.iter().chain(a.b.iter()).all(|&v| v == 0.0));
        }
        assert!(m.params.enc1.b.iter().all(|&v| v == 0.0));
        let bound = 1.0 / 6f64.sqrt();
        assert!(m.params.enc1.w.iter().all(|v| v.abs() <= bound));
    }
}
