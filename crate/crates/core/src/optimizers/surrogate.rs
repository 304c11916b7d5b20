use crate::error::Result;
use crate::model::Relso;
use crate::seqdata::{Alphabet, ToyLandscape};

/// A differentiable latent fitness surface with a decoder back to sequences.
pub trait LatentModel {
    fn d_latent(&self) -> usize;
    fn predict(&self, z: &[Vec<f64>]) -> Result<Vec<f64>>;
    fn value_and_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)>;
    /// Decodes to residue strings of the given length.
    fn decode(&self, z: &[Vec<f64>], length: usize) -> Result<Vec<String>>;
    fn encode(&self, sequences: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Scores sequences directly.
pub trait SequenceModel {
    fn predict_sequences(&self, sequences: &[String]) -> Result<Vec<f64>>;
}

impl Relso {
    fn encode_strings(&self, sequences: &[String]) -> Result<Vec<crate::seqdata::EncodedSequence>> {
        let a = Alphabet::protein();
        sequences.iter().enumerate().map(|(i, s)| a.encode(s, self.config.max_len, i + 1)).collect()
    }
}

impl LatentModel for Relso {
    fn d_latent(&self) -> usize {
        self.config.d_latent
    }

    fn predict(&self, z: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.predict_fitness(z)
    }

    fn value_and_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.fitness_and_grad(z)
    }

    fn decode(&self, z: &[Vec<f64>], length: usize) -> Result<Vec<String>> {
        self.decode_sequences(z, length)
    }

    fn encode(&self, sequences: &[String]) -> Result<Vec<Vec<f64>>> {
        let enc = self.encode_strings(sequences)?;
        self.encode_z(&enc.iter().collect::<Vec<_>>())
    }
}

impl SequenceModel for Relso {
    fn predict_sequences(&self, sequences: &[String]) -> Result<Vec<f64>> {
        let enc = self.encode_strings(sequences)?;
        Relso::predict_sequences(self, &enc.iter().collect::<Vec<_>>())
    }
}

impl SequenceModel for ToyLandscape {
    fn predict_sequences(&self, sequences: &[String]) -> Result<Vec<f64>> {
        sequences.iter().map(|s| self.fitness(s)).collect()
    }
}
