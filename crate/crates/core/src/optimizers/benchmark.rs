use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{
    directed_evolution, gradient_ascent, hill_climb, mcmc_latent, mcmc_sequence, Budget, GradientAscentConfig,
    LatentModel, SequenceModel, Trajectory,
};
use crate::error::{Error, Result};
use crate::model::Relso;
use crate::rng;
use crate::seqdata::{hamming, quantile, FitnessDataset, Record, Split};

pub const BENCHMARK_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ga")]
    Ga,
    #[serde(rename = "hc")]
    Hc,
    #[serde(rename = "shc")]
    Shc,
    #[serde(rename = "mcmc-latent")]
    McmcLatent,
    #[serde(rename = "mcmc-seq")]
    McmcSeq,
    #[serde(rename = "de")]
    De,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Ga, Method::Hc, Method::Shc, Method::McmcLatent, Method::McmcSeq, Method::De];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ga => "ga",
            Method::Hc => "hc",
            Method::Shc => "shc",
            Method::McmcLatent => "mcmc-latent",
            Method::McmcSeq => "mcmc-seq",
            Method::De => "de",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }

    /// Comma-separated list, e.g. `ga,hc,de`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(Self::parse).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub n_seeds: usize,
    pub budget: usize,
    /// Percentile of dataset fitness used as the threshold when `threshold` is unset.
    pub threshold_pct: f64,
    pub threshold: Option<f64>,
    pub seed: u64,
    pub ga: GradientAscentConfig,
    pub n_candidates: usize,
    /// Latent perturbation scale, in units of the RMS per-dimension standard
    /// deviation of the encoded training split.
    pub latent_step: f64,
    pub kt: f64,
    pub de_order: Option<Vec<usize>>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_seeds: 30,
            budget: 60,
            threshold_pct: 95.0,
            threshold: None,
            seed: 0,
            ga: GradientAscentConfig::default(),
            n_candidates: 5,
            latent_step: 0.25,
            kt: 0.1,
            de_order: None,
        }
    }
}

/// Final sequence of one trajectory, rescored at the sequence level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinalRecord {
    pub method: String,
    pub seed_id: usize,
    pub sequence: String,
    pub predicted: f64,
    pub ground_truth: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhiSummary {
    pub method: String,
    pub size: usize,
    pub max: Option<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Fraction of members absent from the training split.
    pub novelty: Option<f64>,
    /// Mean pairwise Hamming distance between members over sequence length.
    pub diversity: Option<f64>,
    pub gt_max: Option<f64>,
    pub gt_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub threshold: f64,
    pub seeds: Vec<String>,
    pub trajectories: Vec<Trajectory>,
    pub finals: Vec<FinalRecord>,
    pub summaries: Vec<PhiSummary>,
}

/// `n` held-out (non-training) sequences sampled from the bottom fitness quartile.
pub fn held_out_seeds<'a>(dataset: &'a FitnessDataset, n: usize, seed: u64) -> Result<Vec<&'a Record>> {
    let held: Vec<&Record> = dataset.records().iter().filter(|r| r.split != Split::Train).collect();
    if held.is_empty() {
        return Err(Error::Data("no held-out sequences".into()));
    }
    let cut = quantile(&held.iter().map(|r| r.fitness).collect::<Vec<_>>(), 0.25);
    let pool: Vec<&Record> = held.into_iter().filter(|r| r.fitness <= cut).collect();
    if pool.len() < n {
        return Err(Error::Data(format!("{} bottom-quartile held-out sequences, {n} seeds requested", pool.len())));
    }
    let mut r = rng::stream(seed, "benchmark-seeds");
    Ok(sample(&mut r, pool.len(), n).into_iter().map(|i| pool[i]).collect())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

/// RMS per-dimension standard deviation of latent points.
fn latent_spread(z: &[Vec<f64>]) -> f64 {
    let d = z[0].len();
    let var: f64 = (0..d).map(|j| mean_std(&z.iter().map(|p| p[j]).collect::<Vec<_>>()).1.powi(2)).sum::<f64>() / d as f64;
    var.sqrt()
}

/// Decodes only to the residues observed in the dataset.
struct Restricted<'a> {
    model: &'a Relso,
    symbols: &'a [char],
}

impl LatentModel for Restricted<'_> {
    fn d_latent(&self) -> usize {
        self.model.d_latent()
    }
    fn predict(&self, z: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.model.predict(z)
    }
    fn value_and_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.model.value_and_grad(z)
    }
    fn decode(&self, z: &[Vec<f64>], length: usize) -> Result<Vec<String>> {
        self.model.decode_sequences_over(z, length, self.symbols)
    }
    fn encode(&self, sequences: &[String]) -> Result<Vec<Vec<f64>>> {
        LatentModel::encode(self.model, sequences)
    }
}

/// Runs every method from the same seed sequences, each trajectory with its
/// own budget and RNG substream, then collects the Φ set of final sequences
/// whose sequence-level prediction reaches the threshold.
pub fn run_benchmark(
    dataset: &FitnessDataset,
    model: &Relso,
    methods: &[Method],
    cfg: &BenchmarkConfig,
    ground_truth: Option<&dyn SequenceModel>,
) -> Result<BenchmarkReport> {
    if methods.is_empty() || cfg.n_seeds == 0 || cfg.budget == 0 {
        return Err(Error::Config("benchmark needs methods, n_seeds >= 1 and budget >= 1".into()));
    }
    let threshold = match cfg.threshold {
        Some(t) => t,
        None => quantile(&dataset.records().iter().map(|r| r.fitness).collect::<Vec<_>>(), cfg.threshold_pct / 100.0),
    };
    let seeds = held_out_seeds(dataset, cfg.n_seeds, cfg.seed)?;
    let symbols = dataset.observed_symbols();
    let train: Vec<&Record> = dataset.split(Split::Train);
    let train_z = model.encode_z(&train.iter().map(|r| &r.encoded).collect::<Vec<_>>())?;
    let step_scale = cfg.latent_step * latent_spread(&train_z);
    let seed_strings: Vec<String> = seeds.iter().map(|r| r.raw.clone()).collect();
    let seed_z = LatentModel::encode(model, &seed_strings)?;
    let latent = Restricted { model, symbols: &symbols };

    let mut trajectories = Vec::new();
    for &method in methods {
        for (sid, seed) in seeds.iter().enumerate() {
            let budget = Budget::new(cfg.budget);
            let len = seed.encoded.length;
            let mut r = rng::substream(cfg.seed, &format!("{}/{}", rng::PROPOSALS, method.name()), sid as u64);
            let z0 = &seed_z[sid];
            let t = match method {
                Method::Ga => gradient_ascent(z0, &latent, &cfg.ga, budget, len, sid)?,
                Method::Hc => hill_climb(z0, &latent, cfg.n_candidates, step_scale, budget, false, len, &mut r, sid)?,
                Method::Shc => hill_climb(z0, &latent, cfg.n_candidates, step_scale, budget, true, len, &mut r, sid)?,
                Method::McmcLatent => mcmc_latent(z0, &latent, step_scale, cfg.kt, budget, len, &mut r, sid)?,
                Method::McmcSeq => mcmc_sequence(&seed.raw, model, &symbols, cfg.kt, budget, &mut r, sid)?,
                Method::De => directed_evolution(&seed.raw, model, &symbols, cfg.de_order.as_deref(), budget, sid)?,
            };
            assert!(t.budget.spent() <= t.budget.total());
            trajectories.push(t);
        }
    }

    let final_seqs: Vec<String> = trajectories.iter().map(|t| t.last().sequence.clone()).collect();
    let predicted = SequenceModel::predict_sequences(model, &final_seqs)?;
    let truth = ground_truth.map(|g| g.predict_sequences(&final_seqs)).transpose()?;
    let finals: Vec<FinalRecord> = trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| FinalRecord {
            method: t.method.clone(),
            seed_id: t.seed_id,
            sequence: final_seqs[i].clone(),
            predicted: predicted[i],
            ground_truth: truth.as_ref().map(|g| g[i]),
        })
        .collect();

    let train_set: std::collections::HashSet<&str> = train.iter().map(|r| r.raw.as_str()).collect();
    let summaries = methods
        .iter()
        .map(|m| {
            let phi: Vec<&FinalRecord> =
                finals.iter().filter(|f| f.method == m.name() && f.predicted >= threshold).collect();
            summarize(m.name(), &phi, &train_set)
        })
        .collect();
    Ok(BenchmarkReport { threshold, seeds: seed_strings, trajectories, finals, summaries })
}

fn summarize(method: &str, phi: &[&FinalRecord], train: &std::collections::HashSet<&str>) -> PhiSummary {
    let mut s = PhiSummary {
        method: method.to_string(),
        size: phi.len(),
        max: None,
        mean: None,
        std: None,
        novelty: None,
        diversity: None,
        gt_max: None,
        gt_mean: None,
    };
    if phi.is_empty() {
        return s;
    }
    let y: Vec<f64> = phi.iter().map(|f| f.predicted).collect();
    let (m, sd) = mean_std(&y);
    s.max = Some(y.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    s.mean = Some(m);
    s.std = Some(sd);
    s.novelty = Some(phi.iter().filter(|f| !train.contains(f.sequence.as_str())).count() as f64 / phi.len() as f64);
    if phi.len() >= 2 {
        let (mut total, mut pairs) = (0.0, 0usize);
        for i in 0..phi.len() {
            for j in i + 1..phi.len() {
                let a = &phi[i].sequence;
                let b = &phi[j].sequence;
                let len = a.chars().count().max(1) as f64;
                total += hamming(a, b).map_or(1.0, |d| d as f64 / len);
                pairs += 1;
            }
        }
        s.diversity = Some(total / pairs as f64);
    } else {
        s.diversity = Some(0.0);
    }
    if let Some(gt) = phi.iter().map(|f| f.ground_truth).collect::<Option<Vec<f64>>>() {
        s.gt_max = Some(gt.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        s.gt_mean = Some(mean_std(&gt).0);
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn finish(out: Vec<u8>) -> String {
    String::from_utf8(out).expect("csv output is utf-8")
}

/// `method,seed_id,step,predicted_fitness,sequence[,ground_truth]`, one row per trajectory step.
pub fn benchmark_csv(report: &BenchmarkReport, ground_truth: Option<&dyn SequenceModel>) -> Result<String> {
    let mut out = format!("# schema_version: {BENCHMARK_SCHEMA_VERSION}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header = vec!["method", "seed_id", "step", "predicted_fitness", "sequence"];
        if ground_truth.is_some() {
            header.push("ground_truth");
        }
        w.write_record(&header)?;
        for t in &report.trajectories {
            let truth = ground_truth
                .map(|g| g.predict_sequences(&t.steps.iter().map(|s| s.sequence.clone()).collect::<Vec<_>>()))
                .transpose()?;
            for (i, s) in t.steps.iter().enumerate() {
                let mut rec = vec![t.method.clone(), t.seed_id.to_string(), i.to_string(), s.predicted.to_string(), s.sequence.clone()];
                if let Some(g) = &truth {
                    rec.push(g[i].to_string());
                }
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(finish(out))
}

/// One row per method: Φ size, predicted max/mean/std, novelty, diversity and,
/// when available, ground-truth max/mean of Φ members.
pub fn phi_summary_csv(report: &BenchmarkReport) -> Result<String> {
    let mut out = format!("# schema_version: {BENCHMARK_SCHEMA_VERSION}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["method", "phi_size", "max", "mean", "std", "novelty", "diversity", "gt_max", "gt_mean", "threshold"])?;
        for s in &report.summaries {
            w.write_record([
                s.method.clone(),
                s.size.to_string(),
                opt(s.max),
                opt(s.mean),
                opt(s.std),
                opt(s.novelty),
                opt(s.diversity),
                opt(s.gt_max),
                opt(s.gt_mean),
                report.threshold.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(finish(out))
}
