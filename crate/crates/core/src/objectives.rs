//! Loss terms and their weighted combination.

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{BnStats, Mode, ModelConfig, Relso};
use crate::rng::Rng;
use crate::seqdata::EncodedSequence;

/// Scalar value of every loss term for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub fitness: f64,
    pub neg_sampling: f64,
    pub interp: f64,
    pub latent_norm: f64,
    pub spectral: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 7] = ["recon", "fitness", "neg_sampling", "interp", "latent_norm", "spectral", "total"];

    pub fn values(&self) -> [f64; 7] {
        [self.recon, self.fitness, self.neg_sampling, self.interp, self.latent_norm, self.spectral, self.total]
    }
}

/// Fills `total` from the other fields, zeroing terms whose flag is off.
pub fn total_loss(mut parts: LossBreakdown, cfg: &ModelConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    if !cfg.use_fitness_head {
        parts.fitness = 0.0;
        parts.neg_sampling = 0.0;
        parts.spectral = 0.0;
    }
    if !cfg.use_neg_sampling {
        parts.neg_sampling = 0.0;
    }
    if !cfg.use_interp {
        parts.interp = 0.0;
    }
    let terms = [parts.recon, parts.fitness, parts.neg_sampling, parts.interp, parts.latent_norm, parts.spectral];
    if terms.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::NonFinite { op: "loss terms" });
    }
    parts.total = cfg.gamma * parts.recon
        + cfg.alpha * (parts.fitness + cfg.eta * parts.neg_sampling)
        + cfg.interp_weight * parts.interp
        + cfg.latent_norm_weight * parts.latent_norm
        + cfg.spectral_weight * parts.spectral;
    Ok(parts)
}

/// Mean token cross-entropy over unmasked positions. `logits: [B, T, V]`,
/// `targets` and `mask` flattened to `B * T`.
pub fn recon_loss(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    g.cross_entropy(logits, targets, &weights)
}

/// Mean squared error of predictions `[N]` against `y`.
pub fn fitness_loss(g: &mut Graph, pred: Var, y: &[f64]) -> Result<Var> {
    let t = g.constant(Tensor::vector(y));
    g.squared_error(pred, t)
}

/// Artificial high-norm latent points labelled with a low fitness value.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeSampleBatch {
    pub points: Vec<Vec<f64>>,
    pub target: f64,
    /// Largest norm in the batch the samples were drawn against.
    pub r_max: f64,
}

/// Draws `m` points with uniformly random direction and norm uniform in
/// `[scale * r_max, 2 * scale * r_max]`.
pub fn make_negative_samples(z: &[Vec<f64>], m: usize, scale: f64, target: f64, rng: &mut Rng) -> Result<NegativeSampleBatch> {
    if m == 0 {
        return Err(Error::Config("negative sample count must be positive".into()));
    }
    if !(scale > 1.0) {
        return Err(Error::Config("negative sample scale must exceed 1".into()));
    }
    let d = z.first().map(Vec::len).ok_or_else(|| Error::Data("empty latent batch".into()))?;
    let r_max = z.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
    if !(r_max > 0.0 && r_max.is_finite()) {
        return Err(Error::NonFinite { op: "negative sampling radius" });
    }
    let points = (0..m)
        .map(|_| {
            let dir = loop {
                let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-12 {
                    break v.into_iter().map(|x| x / n).collect::<Vec<_>>();
                }
            };
            let r = rng.random_range(scale * r_max..=2.0 * scale * r_max);
            dir.into_iter().map(|x| x * r).collect()
        })
        .collect();
    Ok(NegativeSampleBatch { points, target, r_max })
}

/// `mean((y - pred_real)^2) + mean((y_neg - pred_neg)^2)`.
pub fn neg_sampling_loss(g: &mut Graph, pred_real: Var, y_real: &[f64], pred_neg: Var, y_neg: f64) -> Result<Var> {
    let real = fitness_loss(g, pred_real, y_real)?;
    let neg = negative_term(g, pred_neg, y_neg)?;
    g.add(real, neg)
}

fn negative_term(g: &mut Graph, pred_neg: Var, y_neg: f64) -> Result<Var> {
    let n = g.shape(pred_neg).iter().product::<usize>();
    let t = g.constant(Tensor::full(&[n], y_neg));
    g.squared_error(pred_neg, t)
}

/// Stacks the given rows of a `[N, ..]` variable.
fn gather_rows(g: &mut Graph, x: Var, rows: &[usize]) -> Result<Var> {
    let parts = rows.iter().map(|&r| g.slice(x, 0, r, 1)).collect::<Result<Vec<_>>>()?;
    g.concat(&parts, 0)
}

/// Anchor/neighbour pairs for the interpolation penalty: a seeded subset of
/// `ceil(fraction * n)` anchors, each paired with its nearest other point
/// (ties to the lower index).
pub fn interp_pairs(z: &[Vec<f64>], fraction: f64, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    let n = z.len();
    if n < 2 {
        return Err(Error::Data("interpolation penalty needs at least 2 points".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config("interp fraction must be in (0, 1]".into()));
    }
    let count = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut anchors = sample(rng, n, count).into_vec();
    anchors.sort_unstable();
    Ok(anchors
        .into_iter()
        .map(|i| {
            let mut best = (f64::INFINITY, usize::MAX);
            for (j, p) in z.iter().enumerate() {
                if j != i {
                    let d: f64 = p.iter().zip(&z[i]).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 {
                        best = (d, j);
                    }
                }
            }
            (i, best.1)
        })
        .collect())
}

/// Per-pair L1 distances between rows of two `[P, T, V]` probability tensors.
fn l1_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let s = g.shape(a).to_vec();
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    let d = g.reshape(d, &[s[0], s[1..].iter().product()])?;
    g.sum_last(d)
}

/// Mean over pairs of `max(0, (d(x1, xm) + d(x2, xm)) / 2 - d(x1, x2))`, where
/// `x*` are decoder probability tensors `[P, T, V]`.
pub fn interp_hinge(g: &mut Graph, p1: Var, p2: Var, pm: Var) -> Result<Var> {
    let d1 = l1_rows(g, p1, pm)?;
    let d2 = l1_rows(g, p2, pm)?;
    let d12 = l1_rows(g, p1, p2)?;
    let avg = g.add(d1, d2)?;
    let avg = g.scale(avg, 0.5)?;
    let gap = g.sub(avg, d12)?;
    let h = g.relu(gap)?;
    g.mean(h)
}

/// Interpolation penalty for latent batch `z: [B, d]`, decoding the batch itself.
pub fn interp_penalty(
    g: &mut Graph,
    model: &Relso,
    z: Var,
    fraction: f64,
    rng: &mut Rng,
    mode: Mode,
    stats: &mut Vec<BnStats>,
) -> Result<Var> {
    let rows: Vec<Vec<f64>> = g.value(z).data().chunks(model.config.d_latent).map(<[f64]>::to_vec).collect();
    let pairs = interp_pairs(&rows, fraction, rng)?;
    let logits = model.decode_graph(g, z, mode, stats)?;
    let (p1, p2, pm) = interp_probs(g, model, z, logits, &pairs, mode)?;
    interp_hinge(g, p1, p2, pm)
}

/// Decodes midpoints (their batch statistics are not tracked) and returns
/// probability tensors `(x1, x2, xm)`.
fn interp_probs(
    g: &mut Graph,
    model: &Relso,
    z: Var,
    logits: Var,
    pairs: &[(usize, usize)],
    mode: Mode,
) -> Result<(Var, Var, Var)> {
    let (a, b): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let za = gather_rows(g, z, &a)?;
    let zb = gather_rows(g, z, &b)?;
    let zm = g.add(za, zb)?;
    let zm = g.scale(zm, 0.5)?;
    let lm = model.decode_graph(g, zm, mode, &mut Vec::new())?;
    let probs = g.softmax(logits, None)?;
    let p1 = gather_rows(g, probs, &a)?;
    let p2 = gather_rows(g, probs, &b)?;
    let pm = g.softmax(lm, None)?;
    Ok((p1, p2, pm))
}

/// Mean squared latent norm.
pub fn latent_norm_penalty(g: &mut Graph, z: Var) -> Result<Var> {
    let b = g.shape(z)[0] as f64;
    let sq = g.mul(z, z)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / b)
}

/// Per-step RNG handles, one per stochastic loss feature.
pub struct LossRngs<'a> {
    pub negatives: &'a mut Rng,
    pub interp: &'a mut Rng,
}

/// Output of one training-mode forward pass.
pub struct StepLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// `[B, T, V]` logits of the batch itself.
    pub logits: Var,
    pub bn_stats: Vec<BnStats>,
    pub negatives: Option<NegativeSampleBatch>,
}

/// Builds every active loss term for one batch on `g` and combines them.
/// `y_neg` is the negative-sample target (minimum training fitness).
pub fn step_losses(
    g: &mut Graph,
    model: &Relso,
    batch: &[&EncodedSequence],
    fitness: &[f64],
    y_neg: f64,
    mode: Mode,
    rngs: LossRngs<'_>,
) -> Result<StepLoss> {
    step_losses_with(g, model, batch, fitness, y_neg, mode, rngs, None)
}

/// As [`step_losses`], but reuses `negatives` instead of drawing new ones.
/// Negative samples are treated as data: no gradient flows through `r_max`.
#[allow(clippy::too_many_arguments)]
pub fn step_losses_with(
    g: &mut Graph,
    model: &Relso,
    batch: &[&EncodedSequence],
    fitness: &[f64],
    y_neg: f64,
    mode: Mode,
    rngs: LossRngs<'_>,
    negatives: Option<&NegativeSampleBatch>,
) -> Result<StepLoss> {
    let cfg = &model.config;
    cfg.validate()?;
    if fitness.len() != batch.len() {
        return Err(Error::shape("step_losses", format!("{} sequences, {} fitness values", batch.len(), fitness.len())));
    }
    let mut stats = Vec::new();
    let enc = model.encode_graph(g, batch)?;
    let z = enc.z;
    let logits = model.decode_graph(g, z, mode, &mut stats)?;
    let targets: Vec<usize> = batch.iter().flat_map(|s| s.tokens.iter().copied()).collect();
    let mask: Vec<bool> = batch.iter().flat_map(|s| s.mask()).collect();

    let mut parts = LossBreakdown::default();
    let mut drawn = None;
    let mut weighted: Vec<(Var, f64)> = Vec::new();

    let recon = recon_loss(g, logits, &targets, &mask)?;
    parts.recon = g.value(recon).item();
    weighted.push((recon, cfg.gamma));

    if cfg.use_fitness_head {
        let pred = model.fitness_graph(g, z)?;
        let fit = fitness_loss(g, pred, fitness)?;
        parts.fitness = g.value(fit).item();
        weighted.push((fit, cfg.alpha));
        if cfg.use_neg_sampling {
            let negs = match negatives {
                Some(n) => n.clone(),
                None => {
                    let zv: Vec<Vec<f64>> = g.value(z).data().chunks(cfg.d_latent).map(<[f64]>::to_vec).collect();
                    make_negative_samples(&zv, cfg.neg_samples, cfg.neg_scale, y_neg, rngs.negatives)?
                }
            };
            let zn = g.constant(Tensor::from_rows(&negs.points)?);
            let pn = model.fitness_graph(g, zn)?;
            let neg = negative_term(g, pn, negs.target)?;
            parts.neg_sampling = g.value(neg).item();
            weighted.push((neg, cfg.alpha * cfg.eta));
            drawn = Some(negs);
        }
        if cfg.spectral_weight > 0.0 {
            let s = model.spectral_penalty_graph(g)?;
            let s = g.sum(s)?;
            parts.spectral = g.value(s).item();
            weighted.push((s, cfg.spectral_weight));
        }
    }
    if cfg.use_interp && batch.len() >= 2 {
        let rows: Vec<Vec<f64>> = g.value(z).data().chunks(cfg.d_latent).map(<[f64]>::to_vec).collect();
        let pairs = interp_pairs(&rows, cfg.interp_fraction, rngs.interp)?;
        let (p1, p2, pm) = interp_probs(g, model, z, logits, &pairs, mode)?;
        let ip = interp_hinge(g, p1, p2, pm)?;
        parts.interp = g.value(ip).item();
        weighted.push((ip, cfg.interp_weight));
    }
    if cfg.latent_norm_weight > 0.0 {
        let ln = latent_norm_penalty(g, z)?;
        parts.latent_norm = g.value(ln).item();
        weighted.push((ln, cfg.latent_norm_weight));
    }

    let mut total: Option<Var> = None;
    for (v, w) in weighted {
        if w == 0.0 {
            continue;
        }
        let term = g.scale(v, w)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.scale(recon, 0.0)?,
    };
    let breakdown = total_loss(parts, cfg)?;
    Ok(StepLoss { total, breakdown, logits, bn_stats: stats, negatives: drawn })
}
