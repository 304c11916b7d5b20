use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use relso::evalmetrics::{
    aggregate_attention, attention_mean_csv, knn_graph, latent_coords_csv, one_hot_signal, pca_project,
    positional_attention_csv, scalar_signal, smoothness_csv, smoothness_index, SmoothnessResult, EVAL_SCHEMA_VERSION,
};
use relso::model::{Checkpoint, Relso};
use relso::optimizers::{benchmark_csv, phi_summary_csv, run_benchmark, Method, SequenceModel};
use relso::seqdata::{
    enumerate_single_mutants, gen_toy_landscape, EncodedSequence, FitnessDataset, LoadOptions, Record, Split,
    ToyLandscape, AMINO_ACIDS, PAD_CHAR,
};
use relso::trainer::{metric_log_csv, train_with, validate};
use relso::Error;
use serde::Serialize;

use crate::config::{lock_text, RunConfig};

/// Output files staged in memory and written only once the whole command succeeded.
#[derive(Default)]
pub struct Artifacts {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Artifacts {
    fn add(&mut self, name: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    pub fn names(&self) -> Vec<&Path> {
        self.files.iter().map(|(p, _)| p.as_path()).collect()
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        for (name, bytes) in &self.files {
            let path = out.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

struct Data {
    dataset: FitnessDataset,
    truth: Option<ToyLandscape>,
}

fn load_data(cfg: &RunConfig) -> Result<Data> {
    let src = cfg.data.source.trim();
    if src.is_empty() {
        return Err(Error::Config("data.source is empty; use `toy` or a CSV path".into()).into());
    }
    if src == "toy" {
        let (dataset, truth) = gen_toy_landscape(&cfg.toy)?;
        return Ok(Data { dataset, truth: Some(truth) });
    }
    let path = Path::new(src);
    if !path.is_file() {
        return Err(Error::Config(format!("dataset {} does not exist", path.display())).into());
    }
    let opts = LoadOptions { max_len: cfg.data.max_len, split_seed: cfg.seed };
    Ok(Data { dataset: FitnessDataset::load_csv(path, &opts)?, truth: None })
}

fn load_model(path: &Path, dataset: Option<&FitnessDataset>) -> Result<Relso> {
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())).into());
    }
    let model = Checkpoint::load(path)?.model;
    if let Some(d) = dataset {
        if d.max_len != model.config.max_len {
            return Err(Error::Config(format!(
                "checkpoint {} expects length {} but the dataset pads to {}",
                path.display(),
                model.config.max_len,
                d.max_len
            ))
            .into());
        }
    }
    Ok(model)
}

fn required_checkpoint(p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    p.clone().ok_or_else(|| Error::Config(format!("{key} is required")).into())
}

fn csv_with_schema(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut out = format!("# schema_version: {EVAL_SCHEMA_VERSION}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
    }
    Ok(String::from_utf8(out)?)
}

pub fn train(cfg: &mut RunConfig) -> Result<Artifacts> {
    let data = load_data(cfg)?;
    cfg.model.max_len = data.dataset.max_len;
    if let Some(p) = cfg.train.preset {
        p.apply(&mut cfg.model);
    }
    let mut art = Artifacts::default();
    let every = cfg.train.checkpoint_every;
    let out = train_with(&data.dataset, &cfg.model, &cfg.train, |ck| {
        if every > 0 {
            art.add(format!("checkpoints/step_{:08}.bin", ck.step), ck.to_bytes()?);
        }
        Ok(())
    })?;
    art.add("checkpoint.bin", out.checkpoint.to_bytes()?);
    art.add("metrics.csv", metric_log_csv(&out.log)?);
    art.add("config.lock", lock_text(cfg)?);
    Ok(art)
}

pub fn optimize(cfg: &mut RunConfig) -> Result<Artifacts> {
    let data = load_data(cfg)?;
    let ck = required_checkpoint(&cfg.optimize.checkpoint, "optimize.checkpoint")?;
    let model = load_model(&ck, Some(&data.dataset))?;
    let methods = Method::parse_list(&cfg.optimize.methods)?;
    let truth = data.truth.as_ref().map(|t| t as &dyn SequenceModel);
    let report = run_benchmark(&data.dataset, &model, &methods, &cfg.bench, truth)?;
    let mut jsonl = String::new();
    for t in &report.trajectories {
        jsonl.push_str(&serde_json::to_string(t)?);
        jsonl.push('\n');
    }
    let mut art = Artifacts::default();
    art.add("benchmark.csv", benchmark_csv(&report, truth)?);
    art.add("phi_summary.csv", phi_summary_csv(&report)?);
    art.add("trajectories.jsonl", jsonl);
    art.add("config.lock", lock_text(cfg)?);
    Ok(art)
}

/// Records padded to a common width with the PAD symbol, so every
/// representation sees sequences of one length.
fn padded(records: &[Record], width: usize) -> Vec<String> {
    records.iter().map(|r| format!("{:-<width$}", r.raw)).collect()
}

fn sequence_symbols(dataset: &FitnessDataset) -> Vec<char> {
    let mut s = dataset.observed_symbols();
    s.push(PAD_CHAR);
    s
}

fn latent_smoothness(model: &Relso, dataset: &FitnessDataset, k: usize) -> Result<(Vec<Vec<f64>>, [SmoothnessResult; 2])> {
    let records = dataset.records();
    let z = model.encode_z(&records.iter().map(|r| &r.encoded).collect::<Vec<_>>())?;
    let graph = knn_graph(&z, k)?;
    let fitness: Vec<f64> = records.iter().map(|r| r.fitness).collect();
    let seqs = padded(records, dataset.max_len);
    let onehot = one_hot_signal(&seqs.iter().map(String::as_str).collect::<Vec<_>>(), &sequence_symbols(dataset))?;
    let lf = smoothness_index(&graph, &scalar_signal(&fitness), "fitness")?;
    let ls = smoothness_index(&graph, &onehot, "sequence")?;
    Ok((z, [lf, ls]))
}

#[derive(Serialize)]
struct EvalReport {
    schema_version: u32,
    checkpoint: String,
    n_records: usize,
    test: relso::trainer::TaskMetrics,
    smoothness: Vec<SmoothnessResult>,
    pca_explained_ratio: Vec<f64>,
}

fn parse_labelled(entry: &str) -> (String, PathBuf) {
    match entry.split_once('=') {
        Some((l, p)) => (l.to_string(), PathBuf::from(p)),
        None => {
            let p = PathBuf::from(entry);
            let label = p.file_stem().map_or_else(|| entry.to_string(), |s| s.to_string_lossy().into_owned());
            (label, p)
        }
    }
}

fn single_checkpoint(cfg: &RunConfig) -> Result<PathBuf> {
    match cfg.eval.checkpoints.as_slice() {
        [one] => Ok(parse_labelled(one).1),
        _ => Err(Error::Config("exactly one checkpoint is required".into()).into()),
    }
}

pub fn eval(cfg: &mut RunConfig) -> Result<Artifacts> {
    let data = load_data(cfg)?;
    let ck = single_checkpoint(cfg)?;
    let model = load_model(&ck, Some(&data.dataset))?;
    let mut test = data.dataset.split(Split::Test);
    if test.is_empty() {
        test = data.dataset.records().iter().collect();
    }
    let metrics = validate(&model, &test)?;
    let (z, lambdas) = latent_smoothness(&model, &data.dataset, cfg.eval.k)?;
    let pca = pca_project(&z, 2)?;
    let ids: Vec<String> = (0..z.len()).map(|i| i.to_string()).collect();
    let fitness: Vec<f64> = data.dataset.records().iter().map(|r| r.fitness).collect();
    let report = EvalReport {
        schema_version: EVAL_SCHEMA_VERSION,
        checkpoint: ck.display().to_string(),
        n_records: z.len(),
        test: metrics,
        smoothness: lambdas.to_vec(),
        pca_explained_ratio: pca.explained_ratio.clone(),
    };
    let mut art = Artifacts::default();
    art.add("eval_report.json", serde_json::to_string_pretty(&report)? + "\n");
    art.add("latent_coords.csv", latent_coords_csv(&ids, &pca, &fitness)?);
    art.add("config.lock", lock_text(cfg)?);
    Ok(art)
}

pub fn smoothness(cfg: &mut RunConfig) -> Result<Artifacts> {
    let data = load_data(cfg)?;
    if cfg.eval.checkpoints.is_empty() {
        return Err(Error::Config("at least one checkpoint is required".into()).into());
    }
    let mut rows = Vec::new();
    for entry in &cfg.eval.checkpoints {
        let (label, path) = parse_labelled(entry);
        let model = load_model(&path, Some(&data.dataset))?;
        let (_, lambdas) = latent_smoothness(&model, &data.dataset, cfg.eval.k)?;
        rows.extend(lambdas.into_iter().map(|l| (label.clone(), l)));
    }
    let records = data.dataset.records();
    let seqs = padded(records, data.dataset.max_len);
    let onehot = one_hot_signal(&seqs.iter().map(String::as_str).collect::<Vec<_>>(), &sequence_symbols(&data.dataset))?;
    let graph = knn_graph(&onehot, cfg.eval.k)?;
    let fitness: Vec<f64> = records.iter().map(|r| r.fitness).collect();
    rows.push(("onehot".into(), smoothness_index(&graph, &scalar_signal(&fitness), "fitness")?));
    rows.push(("onehot".into(), smoothness_index(&graph, &onehot, "sequence")?));
    let mut art = Artifacts::default();
    art.add("smoothness.csv", smoothness_csv(&rows)?);
    art.add("config.lock", lock_text(cfg)?);
    Ok(art)
}

pub fn attention(cfg: &mut RunConfig) -> Result<Artifacts> {
    let data = load_data(cfg)?;
    let ck = single_checkpoint(cfg)?;
    let model = load_model(&ck, Some(&data.dataset))?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for r in data.dataset.records() {
        *counts.entry(r.encoded.length).or_default() += 1;
    }
    let modal = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(l, _)| *l).unwrap_or(0);
    let seqs: Vec<&EncodedSequence> =
        data.dataset.records().iter().filter(|r| r.encoded.length == modal).map(|r| &r.encoded).collect();
    let summary = aggregate_attention(&model, &seqs, cfg.eval.threshold_pct)?;
    let mut art = Artifacts::default();
    art.add("attention_mean.csv", attention_mean_csv(&summary)?);
    art.add("positional_attention.csv", positional_attention_csv(&summary)?);
    art.add("config.lock", lock_text(cfg)?);
    Ok(art)
}

pub fn enumerate(cfg: &mut RunConfig) -> Result<Artifacts> {
    let seed = cfg.enumerate.sequence.trim().to_string();
    if seed.is_empty() {
        return Err(Error::Config("enumerate.sequence is required".into()).into());
    }
    let symbols: Vec<char> =
        if cfg.enumerate.symbols.is_empty() { AMINO_ACIDS.to_vec() } else { cfg.enumerate.symbols.chars().collect() };
    let model = cfg.enumerate.checkpoint.as_deref().map(|p| load_model(p, None)).transpose()?;
    let mutants = enumerate_single_mutants(&seed, &symbols)?;
    let predicted = model.as_ref().map(|m| SequenceModel::predict_sequences(m, &mutants)).transpose()?;
    let seed_chars: Vec<char> = seed.chars().collect();
    let mut header = vec!["sequence", "position", "from", "to"];
    if predicted.is_some() {
        header.push("predicted_fitness");
    }
    let rows = mutants.iter().enumerate().map(|(i, m)| {
        let (pos, to) = m.chars().enumerate().find(|(p, c)| *c != seed_chars[*p]).expect("single mutant");
        let mut row = vec![m.clone(), pos.to_string(), seed_chars[pos].to_string(), to.to_string()];
        if let Some(p) = &predicted {
            row.push(p[i].to_string());
        }
        row
    });
    let mut art = Artifacts::default();
    art.add("mutants.csv", csv_with_schema(&header, rows.collect::<Vec<_>>())?);
    art.add("config.lock", lock_text(cfg)?);
    Ok(art)
}

#[derive(Serialize)]
struct LandscapeSummary<'a> {
    spec: &'a relso::seqdata::ToyLandscapeSpec,
    symbols: String,
    separable: bool,
    optimum: Option<(String, f64)>,
}

pub fn toygen(cfg: &mut RunConfig) -> Result<Artifacts> {
    let (dataset, land) = gen_toy_landscape(&cfg.toy)?;
    let summary = LandscapeSummary {
        spec: &cfg.toy,
        symbols: land.symbols.iter().collect(),
        separable: land.is_separable(),
        optimum: land.optimum(),
    };
    let mut art = Artifacts::default();
    art.add("dataset.csv", dataset.to_csv()?);
    art.add("landscape.json", serde_json::to_string_pretty(&summary)? + "\n");
    art.add("config.lock", lock_text(cfg)?);
    Ok(art)
}
