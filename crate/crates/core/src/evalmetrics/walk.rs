use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizers::LatentModel;
use crate::seqdata::hamming;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkStep {
    pub z: Vec<f64>,
    pub sequence: String,
    /// `|h(z) - h(z_end)|`
    pub fit_gap: f64,
    /// Hamming distance to the decoding of `z_end`.
    pub seq_gap: usize,
    /// Hamming distance to the previous step's decoding.
    pub seq_change: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy nearest-neighbour walk from `z_start` toward `z_end` through the
/// encoded points in `pool`. Each step moves to whichever of the current
/// point's `k` nearest pool neighbours lies closest to `z_end`, and only if
/// that is strictly closer than the current point. The walk ends at `z_end`
/// after at most `max_steps` points in total, or earlier once no neighbour
/// makes progress. Identical endpoints give the constant two-point path.
pub fn latent_walk_profile(
    model: &dyn LatentModel,
    pool: &[Vec<f64>],
    z_start: &[f64],
    z_end: &[f64],
    max_steps: usize,
    k: usize,
    length: usize,
) -> Result<Vec<WalkStep>> {
    let d = model.d_latent();
    if max_steps < 2 {
        return Err(Error::Config("latent walk needs max_steps >= 2".into()));
    }
    if k == 0 {
        return Err(Error::Config("latent walk needs k >= 1".into()));
    }
    if z_start.len() != d || z_end.len() != d || pool.iter().any(|p| p.len() != d) {
        return Err(Error::Shape { op: "latent_walk_profile", detail: format!("expected latent dimension {d}") });
    }
    let mut path = vec![z_start.to_vec()];
    let mut cur = z_start.to_vec();
    while path.len() < max_steps - 1 {
        let mut near: Vec<(f64, usize)> =
            pool.iter().enumerate().map(|(i, p)| (dist2(p, &cur), i)).filter(|&(dd, _)| dd > 0.0).collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        near.truncate(k);
        let best = near
            .iter()
            .map(|&(_, i)| (dist2(&pool[i], z_end), i))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        match best {
            Some((de, i)) if de < dist2(&cur, z_end) && de > 0.0 => {
                cur = pool[i].clone();
                path.push(cur.clone());
            }
            _ => break,
        }
    }
    path.push(z_end.to_vec());
    let n_steps = path.len();

    let ys = model.predict(&path)?;
    let seqs = model.decode(&path, length)?;
    let (y_end, s_end) = (ys[n_steps - 1], &seqs[n_steps - 1]);
    let mut steps = Vec::with_capacity(n_steps);
    for (i, z) in path.into_iter().enumerate() {
        let prev = &seqs[i.saturating_sub(1)];
        steps.push(WalkStep {
            z,
            sequence: seqs[i].clone(),
            fit_gap: (ys[i] - y_end).abs(),
            seq_gap: hamming(&seqs[i], s_end)?,
            seq_change: hamming(&seqs[i], prev)?,
        });
    }
    Ok(steps)
}
