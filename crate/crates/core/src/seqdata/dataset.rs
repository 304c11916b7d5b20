use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::alphabet::{Alphabet, EncodedSequence};
use crate::error::{Error, Result};
use crate::rng;

/// Upper bound of the low-fitness seed pool on GFP-style log-fluorescence data.
pub const GFP_SEED_MAX_FITNESS: f64 = 1.3;
/// 95th percentile of GFP log fluorescence; the high-fitness cutoff.
pub const GFP_PHI_THRESHOLD: f64 = 3.76;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub encoded: EncodedSequence,
    pub fitness: f64,
    pub raw: String,
    pub split: Split,
}

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Paired (sequence, fitness) records with a fixed split assignment.
#[derive(Clone, Debug)]
pub struct FitnessDataset {
    pub name: String,
    pub alphabet: Alphabet,
    pub max_len: usize,
    records: Vec<Record>,
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Pad length; defaults to the longest sequence in the file.
    pub max_len: Option<usize>,
    /// Seed for the 80/10/10 split when the file has no split column.
    pub split_seed: u64,
}

impl FitnessDataset {
    /// Builds a dataset from raw rows, assigning splits by seeded shuffle where
    /// `split` is `None`. Rows are 1-based in error messages.
    pub fn from_rows(
        name: impl Into<String>,
        rows: Vec<(String, f64, Option<Split>)>,
        max_len: Option<usize>,
        split_seed: u64,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        let alphabet = Alphabet::protein();
        let longest = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0);
        let max_len = max_len.unwrap_or(longest);
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, (raw, fitness, _)) in rows.iter().enumerate() {
            if !fitness.is_finite() {
                return Err(Error::Data(format!("non-finite fitness at row {}", i + 1)));
            }
            if let Some(&first) = seen.get(raw.as_str()) {
                return Err(Error::DuplicateSequence { sequence: raw.clone(), first, second: i + 1 });
            }
            seen.insert(raw, i + 1);
        }
        let splits = if rows.iter().all(|r| r.2.is_some()) {
            rows.iter().map(|r| r.2.unwrap()).collect()
        } else if rows.iter().all(|r| r.2.is_none()) {
            assign_splits(rows.len(), split_seed)
        } else {
            return Err(Error::Data("split column is set on some rows but not others".into()));
        };
        let records = rows
            .into_iter()
            .zip(splits)
            .enumerate()
            .map(|(i, ((raw, fitness, _), split))| {
                let encoded = alphabet.encode(&raw, max_len, i + 1)?;
                Ok(Record { encoded, fitness, raw, split })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { name: name.into(), alphabet, max_len, records })
    }

    /// Reads `sequence,fitness[,split]` CSV.
    pub fn load_csv(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
        Self::parse_csv(&name, &text, opts)
    }

    pub fn parse_csv(name: &str, text: &str, opts: &LoadOptions) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        let col = |n: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(n));
        let (Some(seq_col), Some(fit_col)) = (col("sequence"), col("fitness")) else {
            return Err(Error::Data("CSV header must contain `sequence` and `fitness`".into()));
        };
        let split_col = col("split");
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let row = i + 1;
            let seq = rec.get(seq_col).unwrap_or("").to_string();
            let fit_str = rec.get(fit_col).unwrap_or("");
            let fitness: f64 =
                fit_str.parse().map_err(|_| Error::Data(format!("non-numeric fitness {fit_str:?} at row {row}")))?;
            let split = match split_col.and_then(|c| rec.get(c)) {
                Some(s) if !s.is_empty() => {
                    Some(Split::parse(s).ok_or_else(|| Error::Data(format!("unknown split {s:?} at row {row}")))?)
                }
                _ => None,
            };
            rows.push((seq, fitness, split));
        }
        Self::from_rows(name, rows, opts.max_len, opts.split_seed)
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    /// Minimum fitness over one split.
    pub fn min_fitness(&self, split: Split) -> Option<f64> {
        self.split(split).iter().map(|r| r.fitness).reduce(f64::min)
    }

    /// Residue symbols that actually occur in the data, in alphabet order.
    pub fn observed_symbols(&self) -> Vec<char> {
        let mut present = [false; 20];
        for r in &self.records {
            for &t in &r.encoded.tokens[..r.encoded.length] {
                present[t - 1] = true;
            }
        }
        super::AMINO_ACIDS.iter().zip(present).filter(|(_, p)| *p).map(|(c, _)| *c).collect()
    }

    /// `sequence,fitness,split` after a schema comment line.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(format!("# schema_version: {DATASET_SCHEMA_VERSION}\n").into_bytes());
        w.write_record(["sequence", "fitness", "split"])?;
        for r in &self.records {
            w.write_record([r.raw.as_str(), &r.fitness.to_string(), r.split.as_str()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// 80/10/10 split as a pure function of `(n, seed)`.
fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::SPLIT));
    let n_train = (n * 8).div_ceil(10);
    let n_val = (n - n_train) / 2;
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

/// Value at quantile `q` in `[0, 1]` with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqdata::PAD;

    #[test]
    fn single_row_encoding() {
        let ds = FitnessDataset::parse_csv(
            "t",
            "sequence,fitness\nACDE,1.5\n",
            &LoadOptions { max_len: Some(6), split_seed: 0 },
        )
        .unwrap();
        let r = &ds.records()[0];
        let a = &ds.alphabet;
        assert_eq!(r.encoded.tokens[..4], [a.index('A').unwrap(), a.index('C').unwrap(), a.index('D').unwrap(), a.index('E').unwrap()]);
        assert_eq!(r.encoded.tokens[4..], [PAD, PAD]);
        assert_eq!(r.fitness, 1.5);
    }

    #[test]
    fn duplicate_rows_named() {
        let err = FitnessDataset::parse_csv("t", "sequence,fitness\nAC,1\nDE,2\nAC,3\n", &LoadOptions::default())
            .unwrap_err();
        match err {
            Error::DuplicateSequence { first, second, .. } => assert_eq!((first, second), (1, 3)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn ingestion_errors() {
        let o = LoadOptions::default();
        assert!(matches!(
            FitnessDataset::parse_csv("t", "sequence,fitness\nAC,1\nAZ,2\n", &o),
            Err(Error::UnknownSymbol { row: 2, symbol: 'Z' })
        ));
        assert!(FitnessDataset::parse_csv("t", "sequence,fitness\nAC,abc\n", &o).is_err());
        assert!(FitnessDataset::parse_csv("t", "sequence,fitness\n", &o).is_err());
        assert!(FitnessDataset::parse_csv("t", "", &o).is_err());
    }

    #[test]
    fn explicit_split_column() {
        let ds = FitnessDataset::parse_csv(
            "t",
            "sequence,fitness,split\nAC,1,train\nDE,2,test\nFG,0,val\n",
            &LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(ds.split(Split::Train).len(), 1);
        assert_eq!(ds.split(Split::Test)[0].raw, "DE");
    }

    #[test]
    fn split_is_pure_and_proportional() {
        let rows = |n: usize| -> Vec<(String, f64, Option<Split>)> {
            (0..n).map(|i| (format!("A{}", "C".repeat(i + 1)), i as f64, None)).collect()
        };
        let a = FitnessDataset::from_rows("t", rows(100), None, 5).unwrap();
        let b = FitnessDataset::from_rows("t", rows(100), None, 5).unwrap();
        let c = FitnessDataset::from_rows("t", rows(100), None, 6).unwrap();
        let splits = |d: &FitnessDataset| d.records().iter().map(|r| r.split).collect::<Vec<_>>();
        assert_eq!(splits(&a), splits(&b));
        assert_ne!(splits(&a), splits(&c));
        assert_eq!(a.split(Split::Train).len(), 80);
        assert_eq!(a.split(Split::Val).len(), 10);
        assert_eq!(a.split(Split::Test).len(), 10);
    }

    #[test]
    fn gfp_thresholds() {
        assert_eq!(GFP_SEED_MAX_FITNESS, 1.3);
        assert_eq!(GFP_PHI_THRESHOLD, 3.76);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile(&[1.0, 2.0], 1.0), 2.0);
    }
}
