//! Latent-space analysis: KNN-graph smoothness, PCA, latent walks and
//! attention aggregation.

mod attention;
mod export;
mod pca;
mod walk;

pub use attention::{aggregate_attention, AttentionSummary};
pub use export::{
    attention_mean_csv, latent_coords_csv, positional_attention_csv, smoothness_csv, EVAL_SCHEMA_VERSION,
};
pub use pca::{pca_project, Pca};
pub use walk::{latent_walk_profile, WalkStep};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default neighbourhood size for smoothness graphs.
pub const DEFAULT_K: usize = 10;

/// Undirected KNN graph; `(i, j)` is an edge iff either endpoint lists the
/// other among its `k` nearest points.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    pub n: usize,
    pub k: usize,
    /// Sorted, each pair stored once with `i < j`.
    pub edges: Vec<(usize, usize)>,
}

impl KnnGraph {
    pub fn adjacency(&self) -> Vec<Vec<bool>> {
        let mut a = vec![vec![false; self.n]; self.n];
        for &(i, j) in &self.edges {
            a[i][j] = true;
            a[j][i] = true;
        }
        a
    }

    /// Dense `D - A`.
    pub fn laplacian(&self) -> Vec<Vec<f64>> {
        let mut l = vec![vec![0.0; self.n]; self.n];
        for &(i, j) in &self.edges {
            l[i][j] -= 1.0;
            l[j][i] -= 1.0;
            l[i][i] += 1.0;
            l[j][j] += 1.0;
        }
        l
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn knn_graph(points: &[Vec<f64>], k: usize) -> Result<KnnGraph> {
    let n = points.len();
    if k == 0 || n <= k {
        return Err(Error::Config(format!("knn graph needs N > k >= 1, got N = {n}, k = {k}")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Data("knn points must be finite and share one dimension".into()));
    }
    let mut edges = std::collections::BTreeSet::new();
    for i in 0..n {
        let mut order: Vec<(f64, usize)> =
            (0..n).filter(|&j| j != i).map(|j| (sq_dist(&points[i], &points[j]), j)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &order[..k] {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    Ok(KnnGraph { n, k, edges: edges.into_iter().collect() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessResult {
    pub lambda: f64,
    pub signal: String,
    pub k: usize,
    pub n: usize,
}

/// `λ = yᵀLy / N`, evaluated edgewise as `Σ_(i,j) |y_i - y_j|² / N`. Vector
/// signals sum the quadratic form over components.
pub fn smoothness_index(graph: &KnnGraph, signal: &[Vec<f64>], name: &str) -> Result<SmoothnessResult> {
    if signal.len() != graph.n {
        return Err(Error::Shape {
            op: "smoothness_index",
            detail: format!("signal has {} entries for {} nodes", signal.len(), graph.n),
        });
    }
    let d = signal.first().map_or(0, Vec::len);
    if signal.iter().any(|y| y.len() != d || y.iter().any(|v| !v.is_finite())) {
        return Err(Error::Data("smoothness signal must be finite with one dimension".into()));
    }
    let total: f64 = graph.edges.iter().map(|&(i, j)| sq_dist(&signal[i], &signal[j])).sum();
    Ok(SmoothnessResult { lambda: total / graph.n as f64, signal: name.to_string(), k: graph.k, n: graph.n })
}

/// Wraps a scalar signal for [`smoothness_index`].
pub fn scalar_signal(y: &[f64]) -> Vec<Vec<f64>> {
    y.iter().map(|&v| vec![v]).collect()
}

/// One-hot encodings scaled by `1/sqrt(L)`, so the smoothness index of this
/// signal is the per-position one-hot λ averaged across positions.
pub fn one_hot_signal(sequences: &[&str], symbols: &[char]) -> Result<Vec<Vec<f64>>> {
    let len = sequences.first().map_or(0, |s| s.chars().count());
    if len == 0 {
        return Err(Error::Data("one-hot signal needs nonempty sequences".into()));
    }
    let scale = 1.0 / (len as f64).sqrt();
    sequences
        .iter()
        .map(|s| {
            let chars: Vec<char> = s.chars().collect();
            if chars.len() != len {
                return Err(Error::Data("one-hot signal needs sequences of equal length".into()));
            }
            let mut v = vec![0.0; len * symbols.len()];
            for (p, c) in chars.iter().enumerate() {
                let a = symbols
                    .iter()
                    .position(|x| x == c)
                    .ok_or_else(|| Error::Data(format!("symbol `{c}` is not in the one-hot alphabet")))?;
                v[p * symbols.len() + a] = scale;
            }
            Ok(v)
        })
        .collect()
}

#[cfg(test)]
mod tests;
