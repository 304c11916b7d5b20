//! Alphabet, tokenization, datasets, toy landscapes and sequence-space utilities.

mod alphabet;
mod dataset;
mod mutants;
mod toy;

pub use alphabet::{Alphabet, EncodedSequence, AMINO_ACIDS, PAD, PAD_CHAR, UNK_CHAR};
pub use dataset::{
    quantile, FitnessDataset, LoadOptions, Record, Split, DATASET_SCHEMA_VERSION, GFP_PHI_THRESHOLD, GFP_SEED_MAX_FITNESS,
};
pub use mutants::{enumerate_single_mutants, hamming, hamming_slices};
pub use toy::{gen_toy_landscape, EpistaticPair, ToyLandscape, ToyLandscapeSpec, MAX_EXHAUSTIVE};
