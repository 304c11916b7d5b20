//! Joint training loop and validation metrics.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{clip_global_norm, Graph, DEFAULT_LR};
use crate::error::{Error, Result};
use crate::model::{argmax_row, Checkpoint, Mode, ModelConfig, Preset, Relso};
use crate::objectives::{step_losses, LossBreakdown, LossRngs};
use crate::rng;
use crate::seqdata::{FitnessDataset, Record, Split};

pub const METRIC_LOG_SCHEMA_VERSION: u32 = 1;
pub const CLIP_NORM: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Validation interval in steps; 0 validates only after the last step.
    pub eval_every: usize,
    /// Checkpoint interval in steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Applied to the model config before training when set.
    pub preset: Option<Preset>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 32, lr: 1e-3, seed: 0, eval_every: 0, checkpoint_every: 0, preset: None }
    }
}

impl TrainConfig {
    /// 300k steps, batch 64, learning rate 2e-5.
    pub fn paper() -> Self {
        Self { steps: 300_000, batch_size: 64, lr: DEFAULT_LR, ..Self::default() }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("train.steps must be at least 1".into()));
        }
        if self.batch_size == 0 || (model.use_interp && self.batch_size < 2) {
            return Err(Error::Config("train.batch_size must be at least 2 when the interpolation penalty is on".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        Ok(())
    }
}

/// Held-out task performance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TaskMetrics {
    /// Token-level reconstruction accuracy over non-PAD positions.
    pub accuracy: f64,
    pub perplexity: f64,
    pub mse: f64,
    pub spearman: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub val: Option<TaskMetrics>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Rank correlation with average ranks for ties; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Data(format!("spearman needs two equal-length inputs of length >= 2, got {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "spearman" });
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Eval-mode metrics on `records`. Never mutates the model.
pub fn validate(model: &Relso, records: &[&Record]) -> Result<TaskMetrics> {
    if records.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let c = &model.config;
    let (t, v) = (c.max_len, c.vocab_size);
    let (mut nll, mut correct, mut count) = (0.0, 0usize, 0usize);
    let mut preds = Vec::with_capacity(records.len());
    for chunk in records.chunks(128) {
        let seqs: Vec<_> = chunk.iter().map(|r| &r.encoded).collect();
        let z = model.encode_z(&seqs)?;
        let logits = model.decode(&z)?;
        for (b, s) in seqs.iter().enumerate() {
            for p in 0..s.length {
                let row = &logits.data()[(b * t + p) * v..(b * t + p + 1) * v];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                nll += lse - row[s.tokens[p]];
                correct += usize::from(argmax_row(row) == s.tokens[p]);
                count += 1;
            }
        }
        preds.extend(model.predict_fitness(&z)?);
    }
    let y: Vec<f64> = records.iter().map(|r| r.fitness).collect();
    let mse = preds.iter().zip(&y).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / y.len() as f64;
    let spearman = if y.len() >= 2 { spearman(&preds, &y)? } else { 0.0 };
    Ok(TaskMetrics { accuracy: correct as f64 / count as f64, perplexity: (nll / count as f64).exp(), mse, spearman })
}

pub fn train(dataset: &FitnessDataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, model_cfg, cfg, |_| Ok(()))
}

/// Trains from scratch; `on_checkpoint` receives every intermediate checkpoint.
pub fn train_with(
    dataset: &FitnessDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut mc = model_cfg.clone();
    if let Some(p) = cfg.preset {
        p.apply(&mut mc);
    }
    mc.validate()?;
    cfg.validate(&mc)?;
    if mc.max_len != dataset.max_len {
        return Err(Error::Config(format!("model.max_len {} does not match the dataset's {}", mc.max_len, dataset.max_len)));
    }
    let train_set = dataset.split(Split::Train);
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let val_set = dataset.split(Split::Val);
    let val_set = if val_set.is_empty() { train_set.clone() } else { val_set };
    let y_neg = dataset.min_fitness(Split::Train).expect("nonempty split");

    let mut model = Relso::new(mc, cfg.seed)?;
    let mut batching = rng::stream(cfg.seed, rng::BATCHING);
    let mut negatives = rng::stream(cfg.seed, rng::NEGATIVES);
    let mut interp = rng::stream(cfg.seed, rng::INTERP);
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| batching.random_range(0..train_set.len())).collect();
        let seqs: Vec<_> = idx.iter().map(|&i| &train_set[i].encoded).collect();
        let y: Vec<f64> = idx.iter().map(|&i| train_set[i].fitness).collect();
        if model.config.use_fitness_head && model.config.spectral_weight > 0.0 {
            model.update_spectral_vectors()?;
        }
        let mut g = Graph::new();
        let rngs = LossRngs { negatives: &mut negatives, interp: &mut interp };
        let out = step_losses(&mut g, &model, &seqs, &y, y_neg, Mode::Train, rngs).map_err(|e| numeric_at(e, step))?;
        if !out.breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let mut grads = g.backward(out.total).map_err(|e| numeric_at(e, step))?.into_named();
        let grad_norm = clip_global_norm(&mut grads, CLIP_NORM);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        model.params.adam_step(&grads, cfg.lr)?;
        model.apply_bn_stats(&out.bn_stats)?;

        let val = (step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0))
            .then(|| validate(&model, &val_set))
            .transpose()?;
        log.push(LogRow { step, loss: out.breakdown, grad_norm, val });
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
            on_checkpoint(&Checkpoint { model: model.clone(), seed: cfg.seed, step: step as u64 })?;
        }
    }
    Ok(TrainOutcome { checkpoint: Checkpoint { model, seed: cfg.seed, step: cfg.steps as u64 }, log })
}

fn numeric_at(e: Error, step: usize) -> Error {
    if matches!(e, Error::NonFinite { .. }) {
        Error::NonFiniteLoss { step }
    } else {
        e
    }
}

const VAL_FIELDS: [&str; 4] = ["val_accuracy", "val_perplexity", "val_mse", "val_spearman"];

/// Metric log as CSV text, preceded by a `# schema_version` line.
pub fn metric_log_csv(log: &[LogRow]) -> Result<String> {
    let mut out = format!("# schema_version: {METRIC_LOG_SCHEMA_VERSION}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header = vec!["step"];
        header.extend(LossBreakdown::FIELDS);
        header.push("grad_norm");
        header.extend(VAL_FIELDS);
        w.write_record(&header)?;
        for r in log {
            let mut rec = vec![r.step.to_string()];
            rec.extend(r.loss.values().iter().map(f64::to_string));
            rec.push(r.grad_norm.to_string());
            match r.val {
                Some(m) => rec.extend([m.accuracy, m.perplexity, m.mse, m.spearman].iter().map(f64::to_string)),
                None => rec.extend(std::iter::repeat_n(String::new(), 4)),
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(String::from_utf8(out).expect("csv output is utf-8"))
}

pub fn write_metric_log(path: impl AsRef<Path>, log: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    let text = metric_log_csv(log)?;
    std::fs::File::create(path).and_then(|mut f| f.write_all(text.as_bytes())).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
