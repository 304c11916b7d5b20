//! Synthetic fitness landscapes with additive site effects plus pairwise
//! epistasis, used where real screening data is unavailable.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::alphabet::AMINO_ACIDS;
use super::dataset::FitnessDataset;
use crate::error::{Error, Result};
use crate::rng;

/// Largest sequence space enumerated exhaustively.
pub const MAX_EXHAUSTIVE: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyLandscapeSpec {
    pub length: usize,
    /// Uses the first `alphabet_size` canonical amino acids.
    pub alphabet_size: usize,
    pub epistatic_pairs: usize,
    /// Standard deviation of pairwise terms relative to unit site effects.
    pub epistasis_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Number of distinct sequences to sample; 0 enumerates the whole space.
    pub samples: usize,
}

impl Default for ToyLandscapeSpec {
    fn default() -> Self {
        Self {
            length: 8,
            alphabet_size: 4,
            epistatic_pairs: 3,
            epistasis_scale: 1.0,
            noise_std: 0.0,
            seed: 0,
            samples: 512,
        }
    }
}

impl ToyLandscapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::Config("toy.length must be at least 2".into()));
        }
        if !(2..=20).contains(&self.alphabet_size) {
            return Err(Error::Config("toy.alphabet_size must be in 2..=20".into()));
        }
        let max_pairs = self.length * (self.length - 1) / 2;
        if self.epistatic_pairs > max_pairs {
            return Err(Error::Config(format!("toy.epistatic_pairs exceeds the {max_pairs} distinct position pairs")));
        }
        if self.noise_std < 0.0 || self.epistasis_scale < 0.0 {
            return Err(Error::Config("toy noise and epistasis scales must be nonnegative".into()));
        }
        let space = self.space_size();
        if self.samples == 0 && space.is_none_or(|s| s > MAX_EXHAUSTIVE) {
            return Err(Error::Config(format!(
                "exhaustive toy landscape of {}^{} sequences exceeds {MAX_EXHAUSTIVE}",
                self.alphabet_size, self.length
            )));
        }
        if self.samples > 0 && space.is_some_and(|s| self.samples > s) {
            return Err(Error::Config("toy.samples exceeds the size of the sequence space".into()));
        }
        Ok(())
    }

    fn space_size(&self) -> Option<usize> {
        self.alphabet_size.checked_pow(self.length as u32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpistaticPair {
    pub first: usize,
    pub second: usize,
    /// `alphabet_size x alphabet_size` interaction table, row-major.
    pub table: Vec<f64>,
}

/// Noiseless ground-truth fitness function.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyLandscape {
    pub spec: ToyLandscapeSpec,
    pub symbols: Vec<char>,
    /// `length x alphabet_size`, row-major.
    site_weights: Vec<f64>,
    pub pairs: Vec<EpistaticPair>,
}

impl ToyLandscape {
    pub fn new(spec: &ToyLandscapeSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(spec.seed, rng::TOY);
        let q = spec.alphabet_size;
        let site_weights: Vec<f64> = (0..spec.length * q).map(|_| StandardNormal.sample(&mut rng)).collect();
        let all_pairs: Vec<(usize, usize)> =
            (0..spec.length).flat_map(|i| (i + 1..spec.length).map(move |j| (i, j))).collect();
        let mut chosen: Vec<usize> = sample(&mut rng, all_pairs.len(), spec.epistatic_pairs).into_vec();
        chosen.sort_unstable();
        let eps = Normal::new(0.0, spec.epistasis_scale.max(f64::MIN_POSITIVE)).expect("valid scale");
        let pairs = chosen
            .into_iter()
            .map(|k| {
                let (first, second) = all_pairs[k];
                let table = (0..q * q).map(|_| if spec.epistasis_scale > 0.0 { eps.sample(&mut rng) } else { 0.0 }).collect();
                EpistaticPair { first, second, table }
            })
            .collect();
        Ok(Self { spec: spec.clone(), symbols: AMINO_ACIDS[..q].to_vec(), site_weights, pairs })
    }

    pub fn length(&self) -> usize {
        self.spec.length
    }

    fn symbol_index(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    /// Fitness over symbol indices (`0..alphabet_size`).
    pub fn fitness_indices(&self, idx: &[usize]) -> f64 {
        let q = self.spec.alphabet_size;
        let additive: f64 = idx.iter().enumerate().map(|(p, &s)| self.site_weights[p * q + s]).sum();
        let epistatic: f64 = self.pairs.iter().map(|e| e.table[idx[e.first] * q + idx[e.second]]).sum();
        additive + epistatic
    }

    pub fn fitness(&self, seq: &str) -> Result<f64> {
        let idx = seq
            .chars()
            .map(|c| self.symbol_index(c).ok_or_else(|| Error::Data(format!("symbol {c:?} outside toy alphabet"))))
            .collect::<Result<Vec<_>>>()?;
        if idx.len() != self.spec.length {
            return Err(Error::Data(format!("toy sequence length {} != {}", idx.len(), self.spec.length)));
        }
        Ok(self.fitness_indices(&idx))
    }

    pub fn site_weight(&self, position: usize, symbol: usize) -> f64 {
        self.site_weights[position * self.spec.alphabet_size + symbol]
    }

    pub fn is_separable(&self) -> bool {
        self.pairs.iter().all(|p| p.table.iter().all(|&v| v == 0.0))
    }

    fn to_string(&self, idx: &[usize]) -> String {
        idx.iter().map(|&i| self.symbols[i]).collect()
    }

    /// Exact noiseless optimum: brute force over positions touched by
    /// epistatic pairs, positionwise argmax elsewhere. Ties go to the lowest
    /// symbol index. `None` if the coupled block is too large to enumerate.
    pub fn optimum(&self) -> Option<(String, f64)> {
        let q = self.spec.alphabet_size;
        let mut coupled: Vec<usize> = self.pairs.iter().flat_map(|p| [p.first, p.second]).collect();
        coupled.sort_unstable();
        coupled.dedup();
        let combos = q.checked_pow(coupled.len() as u32).filter(|&c| c <= MAX_EXHAUSTIVE)?;
        let mut best = vec![0usize; self.spec.length];
        for (p, b) in best.iter_mut().enumerate() {
            if !coupled.contains(&p) {
                *b = (0..q).fold(0, |a, s| if self.site_weight(p, s) > self.site_weight(p, a) { s } else { a });
            }
        }
        let mut best_score = f64::NEG_INFINITY;
        let mut best_assign = best.clone();
        let mut cur = best.clone();
        for code in 0..combos {
            let mut c = code;
            // Most significant digit is the first coupled position so that
            // enumeration order is lexicographic in symbol index.
            for &p in coupled.iter().rev() {
                cur[p] = c % q;
                c /= q;
            }
            let f = self.fitness_indices(&cur);
            if f > best_score {
                best_score = f;
                best_assign.clone_from(&cur);
            }
        }
        Some((self.to_string(&best_assign), best_score))
    }

    /// Every sequence in the space, in lexicographic symbol-index order.
    pub fn enumerate(&self) -> Result<Vec<String>> {
        let q = self.spec.alphabet_size;
        let n = self
            .spec
            .space_size()
            .filter(|&s| s <= MAX_EXHAUSTIVE)
            .ok_or_else(|| Error::Config("sequence space too large to enumerate".into()))?;
        let l = self.spec.length;
        Ok((0..n)
            .map(|code| {
                let mut c = code;
                let mut idx = vec![0; l];
                for p in (0..l).rev() {
                    idx[p] = c % q;
                    c /= q;
                }
                self.to_string(&idx)
            })
            .collect())
    }
}

/// Generates the landscape and a dataset of observed (noisy) fitness values.
pub fn gen_toy_landscape(spec: &ToyLandscapeSpec) -> Result<(FitnessDataset, ToyLandscape)> {
    let landscape = ToyLandscape::new(spec)?;
    let q = spec.alphabet_size;
    let seqs: Vec<String> = if spec.samples == 0 {
        landscape.enumerate()?
    } else {
        let mut rng = rng::stream(spec.seed, "toy-samples");
        let mut seen = HashSet::with_capacity(spec.samples);
        let mut out = Vec::with_capacity(spec.samples);
        while out.len() < spec.samples {
            let idx: Vec<usize> = (0..spec.length).map(|_| rng.random_range(0..q)).collect();
            let s = landscape.to_string(&idx);
            if seen.insert(s.clone()) {
                out.push(s);
            }
        }
        out
    };
    let mut noise_rng = rng::stream(spec.seed, "toy-noise");
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid noise");
    let rows = seqs
        .into_iter()
        .map(|s| {
            let mut f = landscape.fitness(&s)?;
            if spec.noise_std > 0.0 {
                f += noise.sample(&mut noise_rng);
            }
            Ok((s, f, None))
        })
        .collect::<Result<Vec<_>>>()?;
    let name = format!("toy-L{}-q{}-s{}", spec.length, q, spec.seed);
    let ds = FitnessDataset::from_rows(name, rows, Some(spec.length), spec.seed)?;
    Ok((ds, landscape))
}
