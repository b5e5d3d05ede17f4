//! Learned causal graph over the responsive block and the
//! latent-program-to-perturbation assignment.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::eval::HitMap;
use crate::model::Model;
use crate::numerics::{Matrix, Vector};
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.25;

/// `L_vv(u)` for one condition vector.
pub fn environment_adjacency(model: &Model, u: &Vector) -> Result<Matrix> {
    Ok(model.condition_maps_single(u.view())?.0)
}

/// Mean of `|L_vv(u)|` over the given condition vectors.
pub fn extract_adjacency(model: &Model, envs: &[Vector]) -> Result<Matrix> {
    average(model, envs, f64::abs)
}

/// Mean of the signed `L_vv(u)` over the given condition vectors.
pub fn signed_adjacency(model: &Model, envs: &[Vector]) -> Result<Matrix> {
    average(model, envs, |v| v)
}

fn average(model: &Model, envs: &[Vector], f: fn(f64) -> f64) -> Result<Matrix> {
    let d = model.config.d_nu;
    let mut acc = Matrix::zeros((d, d));
    if envs.is_empty() {
        return Ok(acc);
    }
    for u in envs {
        acc += &environment_adjacency(model, u)?.mapv(f);
    }
    Ok(acc / envs.len() as f64)
}

/// Directed edge `parent -> child`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub parent: usize,
    pub child: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGraph {
    /// Strictly lower triangular; entry `[i, j]` weights `z_j -> z_i`.
    #[serde(with = "crate::serde_util::matrix")]
    pub adjacency: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_matrix")]
    pub signed: Option<Matrix>,
    pub threshold: f64,
    pub edges: Vec<Edge>,
    pub kept: usize,
    pub pruned: usize,
    /// Perturbation index assigned to each latent component.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program_assignment: Option<Vec<usize>>,
}

/// Keeps strictly-lower entries with weight at least `tau`.
pub fn threshold_graph(adjacency: &Matrix, tau: f64) -> Result<LatentGraph> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be nonnegative, got {tau}"
        )));
    }
    let (rows, cols) = adjacency.dim();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    let d = rows;
    let mut lower = Matrix::zeros((d, d));
    let mut edges = Vec::new();
    for i in 0..d {
        for j in 0..i {
            let w = adjacency[[i, j]];
            lower[[i, j]] = w;
            if w >= tau {
                edges.push(Edge {
                    parent: j,
                    child: i,
                    weight: w,
                });
            }
        }
    }
    let kept = edges.len();
    Ok(LatentGraph {
        adjacency: lower,
        signed: None,
        threshold: tau,
        edges,
        kept,
        pruned: d * d.saturating_sub(1) / 2 - kept,
        program_assignment: None,
    })
}

/// For each latent component, the perturbation with the largest response;
/// ties go to the lowest perturbation index.
pub fn assign_programs(hit_map: &HitMap) -> Vec<usize> {
    hit_map
        .values
        .rows()
        .into_iter()
        .map(|r| crate::eval::argmax(r))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Dot,
    Json,
}

impl FromStr for GraphFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dot" => Ok(Self::Dot),
            "json" => Ok(Self::Json),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub labels: Vec<String>,
    pub graph: LatentGraph,
}

/// Renders a graph with node labels as DOT or JSON.
pub fn export_graph(graph: &LatentGraph, labels: &[String], format: GraphFormat) -> Result<String> {
    let d = graph.adjacency.nrows();
    if labels.len() != d {
        return Err(Error::DimensionMismatch {
            context: "graph labels",
            expected: d,
            found: labels.len(),
        });
    }
    match format {
        GraphFormat::Json => {
            let doc = GraphDocument {
                labels: labels.to_vec(),
                graph: graph.clone(),
            };
            Ok(serde_json::to_string_pretty(&doc)? + "\n")
        }
        GraphFormat::Dot => {
            let mut out = String::from("digraph latent {\n");
            for (i, l) in labels.iter().enumerate() {
                let _ = writeln!(out, "  n{i} [label=\"{}\"];", escape(l));
            }
            for e in &graph.edges {
                let _ = writeln!(
                    out,
                    "  n{} -> n{} [weight={}, label=\"{:.3}\"];",
                    e.parent, e.child, e.weight, e.weight
                );
            }
            out.push_str("}\n");
            Ok(out)
        }
    }
}

pub fn import_graph_json(text: &str) -> Result<GraphDocument> {
    Ok(serde_json::from_str(text)?)
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

mod opt_matrix {
    use ndarray::Array2;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<Array2<f64>>, s: S) -> Result<S::Ok, S::Error> {
        match m {
            Some(m) => crate::serde_util::matrix::serialize(m, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Array2<f64>>, D::Error> {
        let rows = Option::<Vec<Vec<f64>>>::deserialize(d)?;
        rows.map(|rows| {
            let cols = rows.first().map_or(0, Vec::len);
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            Array2::from_shape_vec((rows.len(), cols), flat).map_err(serde::de::Error::custom)
        })
        .transpose()
    }
}
