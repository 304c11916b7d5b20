use std::path::{Path, PathBuf};

use relso::model::ModelConfig;
use relso::optimizers::BenchmarkConfig;
use relso::seqdata::ToyLandscapeSpec;
use relso::trainer::TrainConfig;
use relso::Error;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const SEED_ENV: &str = "RELSO_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `toy` or a path to a `sequence,fitness[,split]` CSV.
    pub source: String,
    pub max_len: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: "toy".into(), max_len: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub checkpoint: Option<PathBuf>,
    pub methods: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Checkpoints to analyse; `label=path` entries set the row label.
    pub checkpoints: Vec<String>,
    /// KNN neighbourhood size for smoothness graphs.
    pub k: usize,
    pub threshold_pct: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { checkpoints: Vec::new(), k: relso::evalmetrics::DEFAULT_K, threshold_pct: 90.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnumerateConfig {
    pub sequence: String,
    /// Mutation alphabet; empty means the 20 canonical amino acids.
    pub symbols: String,
    pub checkpoint: Option<PathBuf>,
}

/// Fully resolved settings of one run; written verbatim to `config.lock`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub data: DataConfig,
    pub toy: ToyLandscapeSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub optimize: OptimizeConfig,
    pub bench: BenchmarkConfig,
    pub eval: EvalConfig,
    pub enumerate: EnumerateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 0,
            data: DataConfig::default(),
            toy: ToyLandscapeSpec::default(),
            model: ModelConfig::desk(),
            train: TrainConfig { lr: 3e-3, ..TrainConfig::default() },
            optimize: OptimizeConfig { checkpoint: None, methods: "ga,hc,shc,mcmc-latent,mcmc-seq,de".into() },
            bench: BenchmarkConfig::default(),
            eval: EvalConfig::default(),
            enumerate: EnumerateConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses a flag value as a TOML value, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<(), Error> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| config_err(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolves a run: built-in defaults, then the config file, then `overrides`
/// (flags win). The seed falls back to `RELSO_SEED` when neither sets it.
pub fn resolve(command: &str, file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, Error> {
    let mut user = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            text.parse::<Table>().map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for (k, v) in overrides {
        set_dotted(&mut user, k, parse_value(v))?;
    }
    let seed_given = user.contains_key("seed");
    let mut table = Table::try_from(RunConfig::default()).map_err(|e| config_err(e.to_string()))?;
    merge(&mut table, user);
    if !seed_given {
        if let Ok(s) = std::env::var(SEED_ENV) {
            let seed: u64 = s.trim().parse().map_err(|_| config_err(format!("{SEED_ENV}={s:?} is not a seed")))?;
            table.insert("seed".into(), Value::Integer(seed as i64));
        }
    }
    let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
    cfg.command = command.to_string();
    cfg.train.seed = cfg.seed;
    cfg.bench.seed = cfg.seed;
    Ok(cfg)
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn lock_text(cfg: &RunConfig) -> Result<String, Error> {
    let body = toml::to_string(cfg).map_err(|e| config_err(e.to_string()))?;
    Ok(format!("# Resolved run configuration. Rerun with `--config config.lock`.\n{body}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_nest() {
        let o = vec![("model.d_latent".to_string(), "4".to_string()), ("seed".to_string(), "9".to_string())];
        let c = resolve("train", None, &o).unwrap();
        assert_eq!((c.model.d_latent, c.seed, c.train.seed, c.bench.seed), (4, 9, 9, 9));
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let o = vec![("optimize.checkpoint".to_string(), "m.bin".to_string()), ("train.steps".to_string(), "5".to_string())];
        let c = resolve("optimize", None, &o).unwrap();
        let d = RunConfig::default();
        assert_eq!(c.optimize.methods, d.optimize.methods);
        assert_eq!((c.train.lr, c.train.steps), (d.train.lr, 5));
    }

    #[test]
    fn string_fallback_and_bad_keys() {
        let c = resolve("train", None, &[("data.source".into(), "some/file.csv".into())]).unwrap();
        assert_eq!(c.data.source, "some/file.csv");
        assert!(resolve("train", None, &[("model.nope".into(), "1".into())]).is_err());
        assert!(resolve("train", None, &[("model..x".into(), "1".into())]).is_err());
    }

    #[test]
    fn lock_round_trips() {
        let o = vec![("train.preset".to_string(), "relso-neg".to_string()), ("bench.threshold".to_string(), "0.25".to_string())];
        let c = resolve("optimize", None, &o).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("config.lock");
        std::fs::write(&p, lock_text(&c).unwrap()).unwrap();
        assert_eq!(resolve("optimize", Some(&p), &[]).unwrap(), c);
    }
}
