//! On-disk dataset format.
//!
//! A dataset directory holds `data.csv` (columns `x_0..x_{G-1},env`), a
//! `manifest.json` with the condition table and content checksums, and for
//! synthetic data `latents.csv` and `ground_truth.json`. The condition table
//! maps every `env` index to the perturbation targets it applies; the
//! condition vector `u` of a row is the sum of one-hot target indicators.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::{Matrix, Vector};
use crate::scm::LatentSample;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const DATA_FILE: &str = "data.csv";
pub const LATENTS_FILE: &str = "latents.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One perturbation condition: the set of targets switched on in `u`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub targets: Vec<usize>,
}

impl Condition {
    pub fn control() -> Self {
        Self {
            name: "ctrl".into(),
            targets: Vec::new(),
        }
    }

    pub fn is_control(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Dataset manifest written next to `data.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub u_dim: usize,
    pub conditions: Vec<Condition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gene_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    /// `file name -> sha256 hex` for every data file in the directory.
    pub checksums: BTreeMap<String, String>,
}

/// Expression matrix with condition labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbDataset {
    pub x: Matrix,
    /// Condition index per row, into `conditions`.
    pub env: Vec<usize>,
    pub conditions: Vec<Condition>,
    pub u_dim: usize,
    pub gene_names: Option<Vec<String>>,
    pub target_names: Option<Vec<String>>,
    pub z_true: Option<LatentSample>,
}

impl PerturbDataset {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.x.ncols()
    }

    /// Condition vector of condition `c`.
    pub fn u_of(&self, c: usize) -> Vector {
        let mut u = Vector::zeros(self.u_dim);
        for &t in &self.conditions[c].targets {
            u[t] += 1.0;
        }
        u
    }

    /// Condition vectors of all rows.
    pub fn u_matrix(&self) -> Matrix {
        let mut u = Matrix::zeros((self.n_rows(), self.u_dim));
        for (r, &c) in self.env.iter().enumerate() {
            for &t in &self.conditions[c].targets {
                u[[r, t]] += 1.0;
            }
        }
        u
    }

    pub fn control_mask(&self) -> Vec<bool> {
        self.env
            .iter()
            .map(|&c| self.conditions[c].is_control())
            .collect()
    }

    pub fn control_rows(&self) -> Vec<usize> {
        self.rows_where(|c| c.is_control())
    }

    pub fn rows_of(&self, condition: usize) -> Vec<usize> {
        (0..self.n_rows())
            .filter(|&r| self.env[r] == condition)
            .collect()
    }

    pub fn rows_where(&self, pred: impl Fn(&Condition) -> bool) -> Vec<usize> {
        (0..self.n_rows())
            .filter(|&r| pred(&self.conditions[self.env[r]]))
            .collect()
    }

    /// Indices of conditions with exactly `k` targets.
    pub fn conditions_with(&self, k: usize) -> Vec<usize> {
        (0..self.conditions.len())
            .filter(|&c| self.conditions[c].targets.len() == k)
            .collect()
    }

    /// Mean expression over the given rows.
    pub fn mean_of(&self, rows: &[usize]) -> Result<Vector> {
        if rows.is_empty() {
            return Err(Error::EmptyCondition("no rows selected".into()));
        }
        Ok(self
            .x
            .select(Axis(0), rows)
            .mean_axis(Axis(0))
            .expect("nonempty"))
    }

    pub fn control_mean(&self) -> Result<Vector> {
        let rows = self.control_rows();
        if rows.is_empty() {
            return Err(Error::MissingControl);
        }
        self.mean_of(&rows)
    }

    /// Expression rows of the control condition.
    pub fn control_x(&self) -> Matrix {
        self.x.select(Axis(0), &self.control_rows())
    }

    /// Restriction to a subset of rows; conditions and metadata are kept.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), rows),
            env: rows.iter().map(|&r| self.env[r]).collect(),
            conditions: self.conditions.clone(),
            u_dim: self.u_dim,
            gene_names: self.gene_names.clone(),
            target_names: self.target_names.clone(),
            z_true: self.z_true.as_ref().map(|z| LatentSample {
                z_iota: z.z_iota.select(Axis(0), rows),
                z_nu: z.z_nu.select(Axis(0), rows),
                n_iota: z.n_iota.select(Axis(0), rows),
                n_nu: z.n_nu.select(Axis(0), rows),
                env: rows.iter().map(|&r| z.env[r]).collect(),
            }),
        }
    }

    /// Checks the schema invariants: condition indices in range, each
    /// condition applying 0, 1 or 2 targets within `u_dim`, finite values.
    pub fn validate(&self) -> Result<()> {
        if self.env.len() != self.n_rows() {
            return Err(Error::Schema(format!(
                "{} condition labels for {} rows",
                self.env.len(),
                self.n_rows()
            )));
        }
        for (r, &c) in self.env.iter().enumerate() {
            let cond = self.conditions.get(c).ok_or_else(|| {
                Error::Schema(format!("row {r}: condition {c} not in the condition table"))
            })?;
            if cond.targets.len() > 2 {
                return Err(Error::Schema(format!(
                    "row {r}: u sums to {} (condition '{}'), expected 0, 1 or 2",
                    cond.targets.len(),
                    cond.name
                )));
            }
            if let Some(&t) = cond.targets.iter().find(|&&t| t >= self.u_dim) {
                return Err(Error::Schema(format!(
                    "row {r}: target {t} outside u_dim {}",
                    self.u_dim
                )));
            }
        }
        if let Some((i, v)) = self.x.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let g = self.n_genes().max(1);
            return Err(Error::NonFinite(format!(
                "data value {v} at row {}, column {}",
                i / g,
                i % g
            )));
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Shortest round-trip decimal form, so written files are exact and stable.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn data_csv(x: &Matrix, env: &[usize]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..x.ncols()).map(|j| format!("x_{j}")).collect();
    header.push("env".into());
    w.write_record(&header)?;
    for (r, row) in x.rows().into_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        rec.push(env[r].to_string());
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn latents_csv(z: &LatentSample) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let blocks = [
        ("z_iota", &z.z_iota),
        ("z_nu", &z.z_nu),
        ("n_iota", &z.n_iota),
        ("n_nu", &z.n_nu),
    ];
    let header: Vec<String> = blocks
        .iter()
        .flat_map(|(name, m)| (0..m.ncols()).map(move |j| format!("{name}_{j}")))
        .collect();
    w.write_record(&header)?;
    for r in 0..z.z_iota.nrows() {
        let rec: Vec<String> = blocks
            .iter()
            .flat_map(|(_, m)| m.row(r).to_vec())
            .map(fmt_f64)
            .collect();
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Extra files written alongside the dataset.
#[derive(Debug, Default)]
pub struct WriteExtras<'a> {
    pub ground_truth_json: Option<String>,
    pub seed: Option<u64>,
    pub config: Option<serde_json::Value>,
    pub latents: Option<&'a LatentSample>,
}

/// Writes a dataset directory and returns its manifest.
pub fn write_dataset(dir: &Path, ds: &PerturbDataset, extras: WriteExtras<'_>) -> Result<Manifest> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let mut checksums = BTreeMap::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        fs::write(dir.join(name), bytes)?;
        checksums.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    };
    put(DATA_FILE, &data_csv(&ds.x, &ds.env)?)?;
    if let Some(z) = extras.latents.or(ds.z_true.as_ref()) {
        put(LATENTS_FILE, &latents_csv(z)?)?;
    }
    if let Some(gt) = &extras.ground_truth_json {
        put(GROUND_TRUTH_FILE, gt.as_bytes())?;
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        u_dim: ds.u_dim,
        conditions: ds.conditions.clone(),
        gene_names: ds.gene_names.clone(),
        target_names: ds.target_names.clone(),
        seed: extras.seed,
        config: extras.config,
        checksums,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

fn read_checked(dir: &Path, name: &str, manifest: &Manifest) -> Result<Vec<u8>> {
    let bytes = fs::read(dir.join(name))?;
    if let Some(expected) = manifest.checksums.get(name) {
        let found = sha256_hex(&bytes);
        if &found != expected {
            return Err(Error::ChecksumMismatch {
                file: name.to_string(),
                expected: expected.clone(),
                found,
            });
        }
    }
    Ok(bytes)
}

fn parse_f64(s: &str, row: usize, col: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Schema(format!("row {row}: column {col} is not a number: '{s}'")))?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("row {row}, column {col}")));
    }
    Ok(v)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "schema version {} unsupported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    Ok(manifest)
}

/// Loads and validates a dataset directory, verifying checksums.
pub fn load_dataset(dir: &Path) -> Result<PerturbDataset> {
    let manifest = read_manifest(dir)?;
    let data = read_checked(dir, DATA_FILE, &manifest)?;
    let mut rdr = csv::Reader::from_reader(data.as_slice());
    let header = rdr.headers()?.clone();
    let n_cols = header.len();
    if n_cols == 0 || &header[n_cols - 1] != "env" {
        return Err(Error::Schema(
            "data.csv must end with an 'env' column".into(),
        ));
    }
    let g = n_cols - 1;
    for (j, h) in header.iter().take(g).enumerate() {
        if h != format!("x_{j}") {
            return Err(Error::Schema(format!(
                "data.csv column {j} is '{h}', expected 'x_{j}'"
            )));
        }
    }
    let mut flat = Vec::new();
    let mut env = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != n_cols {
            return Err(Error::Schema(format!(
                "row {r}: {} fields, expected {n_cols}",
                rec.len()
            )));
        }
        for j in 0..g {
            flat.push(parse_f64(&rec[j], r, &header[j])?);
        }
        let e: usize = rec[g]
            .trim()
            .parse()
            .map_err(|_| Error::Schema(format!("row {r}: env '{}' is not an index", &rec[g])))?;
        env.push(e);
    }
    let n = env.len();
    let x = Array2::from_shape_vec((n, g), flat).map_err(|e| Error::Schema(e.to_string()))?;

    let z_true = if manifest.checksums.contains_key(LATENTS_FILE) {
        Some(read_latents(
            &read_checked(dir, LATENTS_FILE, &manifest)?,
            &env,
        )?)
    } else {
        None
    };
    if manifest.checksums.contains_key(GROUND_TRUTH_FILE) {
        read_checked(dir, GROUND_TRUTH_FILE, &manifest)?;
    }
    let ds = PerturbDataset {
        x,
        env,
        conditions: manifest.conditions,
        u_dim: manifest.u_dim,
        gene_names: manifest.gene_names,
        target_names: manifest.target_names,
        z_true,
    };
    ds.validate()?;
    if let Some(names) = &ds.gene_names {
        if names.len() != g {
            return Err(Error::Schema(format!(
                "{} gene names for {g} columns",
                names.len()
            )));
        }
    }
    Ok(ds)
}

fn read_latents(bytes: &[u8], env: &[usize]) -> Result<LatentSample> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let header = rdr.headers()?.clone();
    let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
    let di = count("z_iota_");
    let dn = count("z_nu_");
    if header.len() != 2 * (di + dn) || count("n_iota_") != di || count("n_nu_") != dn {
        return Err(Error::Schema(
            "latents.csv header does not match z/noise blocks".into(),
        ));
    }
    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .enumerate()
            .map(|(j, s)| parse_f64(s, r, &header[j]))
            .collect::<Result<_>>()?;
        rows.push(vals);
    }
    if rows.len() != env.len() {
        return Err(Error::Schema(format!(
            "latents.csv has {} rows, data.csv has {}",
            rows.len(),
            env.len()
        )));
    }
    let n = rows.len();
    let block = |off: usize, w: usize| Array2::from_shape_fn((n, w), |(r, j)| rows[r][off + j]);
    Ok(LatentSample {
        z_iota: block(0, di),
        z_nu: block(di, dn),
        n_iota: block(di + dn, di),
        n_nu: block(2 * di + dn, dn),
        env: env.to_vec(),
    })
}
