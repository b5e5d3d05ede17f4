//! Reference predictors: the additive linear model, PCA, and additive
//! prediction in PCA space.

use std::collections::BTreeMap;

use ndarray::{ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::PerturbDataset;
use crate::numerics::{column_means, Matrix, RngStream, Vector};
use crate::{Error, Result};

/// `prediction(targets) = ctrl_mean + sum of per-target deltas`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveModel {
    #[serde(with = "crate::serde_util::vector")]
    pub ctrl_mean: Vector,
    /// Target index to mean shift of its single-perturbation condition.
    #[serde(with = "delta_map")]
    pub deltas: BTreeMap<usize, Vector>,
}

/// Fits deltas from per-target single-perturbation pseudobulks.
pub fn additive_fit(
    singles: &BTreeMap<usize, Vector>,
    ctrl_mean: &Vector,
) -> Result<AdditiveModel> {
    let mut deltas = BTreeMap::new();
    for (&t, mean) in singles {
        if mean.len() != ctrl_mean.len() {
            return Err(Error::DimensionMismatch {
                context: "additive pseudobulk genes",
                expected: ctrl_mean.len(),
                found: mean.len(),
            });
        }
        deltas.insert(t, mean - ctrl_mean);
    }
    Ok(AdditiveModel {
        ctrl_mean: ctrl_mean.clone(),
        deltas,
    })
}

/// Fits from the control and single-target conditions of a dataset.
pub fn additive_fit_dataset(ds: &PerturbDataset) -> Result<AdditiveModel> {
    let ctrl = ds.control_mean()?;
    additive_fit(&single_pseudobulks(ds)?, &ctrl)
}

/// Mean expression of every single-target condition that has cells.
pub fn single_pseudobulks(ds: &PerturbDataset) -> Result<BTreeMap<usize, Vector>> {
    let mut out = BTreeMap::new();
    for c in ds.conditions_with(1) {
        let rows = ds.rows_of(c);
        if !rows.is_empty() {
            out.insert(ds.conditions[c].targets[0], ds.mean_of(&rows)?);
        }
    }
    Ok(out)
}

/// Prediction for any set of targets; the pair case is `ctrl + d_a + d_b`.
/// Deltas are summed in ascending target order so the result does not
/// depend on argument order.
pub fn additive_predict(model: &AdditiveModel, targets: &[usize]) -> Result<Vector> {
    let mut sorted = targets.to_vec();
    sorted.sort_unstable();
    let mut out = model.ctrl_mean.clone();
    for t in sorted {
        let d = model.deltas.get(&t).ok_or(Error::UnseenPerturbation(t))?;
        out += d;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    #[serde(with = "crate::serde_util::vector")]
    pub mean: Vector,
    /// `G x p` with orthonormal columns.
    #[serde(with = "crate::serde_util::matrix")]
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
}

const POWER_MAX_ITERS: usize = 5000;
const POWER_TOL: f64 = 1e-13;
/// Eigenvalues below this fraction of the leading one count as zero.
const NULL_EIGEN_TOL: f64 = 1e-12;

/// Top-`p` principal components by power iteration with deflation. Once
/// the remaining spectrum is numerically zero the basis is completed by
/// Gram-Schmidt so that `p` up to `min(n, G)` always succeeds.
pub fn pca_fit(x: ArrayView2<f64>, p: usize) -> Result<PcaModel> {
    let (n, g) = x.dim();
    if p > n.min(g) {
        return Err(Error::InvalidArgument(format!(
            "{p} components requested from a {n}x{g} matrix"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("PCA needs at least one row".into()));
    }
    crate::numerics::ensure_finite(x.iter(), "PCA input")?;
    let mean = x.mean_axis(Axis(0)).expect("n > 0");
    let xc = &x - &mean;
    let denom = (n.max(2) - 1) as f64;
    let mut cov = xc.t().dot(&xc) / denom;
    let total_variance = cov.diag().sum();

    let mut comps = Matrix::zeros((g, p));
    let mut explained = Vec::with_capacity(p);
    let mut rng = RngStream::new(0);
    let mut lead = 0.0f64;
    for k in 0..p {
        let mut v = Vector::from_shape_fn(g, |_| rng.normal());
        orthogonalize(&mut v, &comps, k);
        normalize(&mut v);
        let mut null = false;
        for _ in 0..POWER_MAX_ITERS {
            let mut w = cov.dot(&v);
            orthogonalize(&mut w, &comps, k);
            let norm = w.dot(&w).sqrt();
            if norm <= NULL_EIGEN_TOL * lead.max(f64::MIN_POSITIVE) || norm == 0.0 {
                null = true;
                break;
            }
            w /= norm;
            let diff = (&w - &v)
                .mapv(f64::abs)
                .sum()
                .min((&w + &v).mapv(f64::abs).sum());
            v = w;
            if diff < POWER_TOL * g as f64 {
                break;
            }
        }
        let lambda = if null {
            v = complete_basis(&comps, k, g);
            0.0
        } else {
            v.dot(&cov.dot(&v)).max(0.0)
        };
        if k == 0 {
            lead = lambda;
        }
        orient(&mut v);
        // Hotelling deflation.
        let outer = v
            .view()
            .insert_axis(Axis(1))
            .dot(&v.view().insert_axis(Axis(0)));
        cov.scaled_add(-lambda, &outer);
        comps.column_mut(k).assign(&v);
        explained.push(lambda);
    }
    Ok(PcaModel {
        mean,
        components: comps,
        explained_variance: explained,
        total_variance,
    })
}

fn orthogonalize(v: &mut Vector, comps: &Matrix, k: usize) {
    for _ in 0..2 {
        for j in 0..k {
            let c = comps.column(j);
            let d = c.dot(v);
            v.scaled_add(-d, &c);
        }
    }
}

fn normalize(v: &mut Vector) {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        *v /= n;
    }
}

/// First standard basis vector with a nonzero residual after projection.
fn complete_basis(comps: &Matrix, k: usize, g: usize) -> Vector {
    let mut best = Vector::zeros(g);
    let mut best_norm = 0.0;
    for i in 0..g {
        let mut e = Vector::zeros(g);
        e[i] = 1.0;
        orthogonalize(&mut e, comps, k);
        let nrm = e.dot(&e).sqrt();
        if nrm > 0.5 {
            return e / nrm;
        }
        if nrm > best_norm {
            best_norm = nrm;
            best = e;
        }
    }
    best / best_norm
}

/// Largest-magnitude loading positive, ties to the lowest index.
fn orient(v: &mut Vector) {
    let mut idx = 0;
    for i in 0..v.len() {
        if v[i].abs() > v[idx].abs() {
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        v.mapv_inplace(|a| -a);
    }
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }

    /// Row-wise scores `(x - mean) V`.
    pub fn transform(&self, x: ArrayView2<f64>) -> Matrix {
        (&x - &self.mean).dot(&self.components)
    }

    pub fn project(&self, v: ArrayView1<f64>) -> Vector {
        self.components.t().dot(&(&v - &self.mean))
    }

    pub fn back_project(&self, scores: ArrayView1<f64>) -> Vector {
        &self.mean + &self.components.dot(&scores)
    }

    /// Fraction of total variance per component.
    pub fn explained_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| {
                if self.total_variance > 0.0 {
                    v / self.total_variance
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Additive model fitted on PCA scores of the pseudobulks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaAdditiveModel {
    pub pca: PcaModel,
    pub additive: AdditiveModel,
}

pub fn pca_additive_fit(
    pca: PcaModel,
    singles: &BTreeMap<usize, Vector>,
    ctrl_mean: &Vector,
) -> Result<PcaAdditiveModel> {
    let proj: BTreeMap<usize, Vector> = singles
        .iter()
        .map(|(&t, m)| (t, pca.project(m.view())))
        .collect();
    let additive = additive_fit(&proj, &pca.project(ctrl_mean.view()))?;
    Ok(PcaAdditiveModel { pca, additive })
}

pub fn pca_additive_predict(model: &PcaAdditiveModel, targets: &[usize]) -> Result<Vector> {
    let scores = additive_predict(&model.additive, targets)?;
    Ok(model.pca.back_project(scores.view()))
}

/// PCA representation of cells, used for probing.
pub fn pca_representation(pca: &PcaModel, x: ArrayView2<f64>) -> Matrix {
    pca.transform(x)
}

/// Global mean of a matrix's rows.
pub fn global_mean(x: &Matrix) -> Vector {
    column_means(x)
}

mod delta_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::numerics::Vector;

    pub fn serialize<S: Serializer>(m: &BTreeMap<usize, Vector>, s: S) -> Result<S::Ok, S::Error> {
        let rows: BTreeMap<usize, Vec<f64>> = m.iter().map(|(k, v)| (*k, v.to_vec())).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<usize, Vector>, D::Error> {
        let rows = BTreeMap::<usize, Vec<f64>>::deserialize(d)?;
        Ok(rows
            .into_iter()
            .map(|(k, v)| (k, Vector::from(v)))
            .collect())
    }
}
