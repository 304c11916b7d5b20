use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Relso;
use crate::seqdata::EncodedSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub length: usize,
    pub n_sequences: usize,
    pub threshold_pct: f64,
    /// `[L][L]` attention averaged over sequences, layers and heads.
    pub mean: Vec<Vec<f64>>,
    /// `mean` with the lowest `threshold_pct` percent of entries zeroed.
    pub thresholded: Vec<Vec<f64>>,
    /// Pooling weights averaged per position.
    pub positional: Vec<f64>,
}

impl AttentionSummary {
    /// Positions ordered by decreasing pooling weight, ties to the lower index.
    pub fn top_positions(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.length).collect();
        idx.sort_by(|&a, &b| self.positional[b].total_cmp(&self.positional[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }
}

/// Zeroes the `floor(pct / 100 * n)` smallest entries, ties broken by position.
fn threshold(map: &[Vec<f64>], pct: f64) -> Vec<Vec<f64>> {
    let l = map.len();
    let mut flat: Vec<(f64, usize)> = map.iter().flatten().copied().enumerate().map(|(i, v)| (v, i)).collect();
    flat.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let cut = ((pct / 100.0) * flat.len() as f64).floor() as usize;
    let mut out = map.to_vec();
    for &(_, i) in &flat[..cut.min(flat.len())] {
        out[i / l][i % l] = 0.0;
    }
    out
}

pub fn aggregate_attention(model: &Relso, sequences: &[&EncodedSequence], threshold_pct: f64) -> Result<AttentionSummary> {
    let Some(first) = sequences.first() else {
        return Err(Error::Data("attention aggregation needs at least one sequence".into()));
    };
    if !(0.0..=100.0).contains(&threshold_pct) {
        return Err(Error::Config(format!("threshold_pct must lie in [0, 100], got {threshold_pct}")));
    }
    let l = first.length;
    if sequences.iter().any(|s| s.length != l) {
        return Err(Error::Data("attention aggregation needs sequences of equal length".into()));
    }
    let c = &model.config;
    let (t, heads) = (c.max_len, c.n_layers * c.n_heads);
    let mut mean = vec![vec![0.0; l]; l];
    let mut positional = vec![0.0; l];
    for chunk in sequences.chunks(64) {
        for out in model.encode(chunk)? {
            let a = out.attention.data();
            for h in 0..heads {
                for i in 0..l {
                    for j in 0..l {
                        mean[i][j] += a[(h * t + i) * t + j];
                    }
                }
            }
            for (p, w) in positional.iter_mut().zip(&out.pooling) {
                *p += w;
            }
        }
    }
    let n = sequences.len() as f64;
    mean.iter_mut().flatten().for_each(|v| *v /= n * heads as f64);
    positional.iter_mut().for_each(|v| *v /= n);
    let thresholded = threshold(&mean, threshold_pct);
    Ok(AttentionSummary { length: l, n_sequences: sequences.len(), threshold_pct, mean, thresholded, positional })
}
