use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqdata::Alphabet;

/// Architecture and loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_embed: usize,
    /// Feed-forward width inside each transformer block.
    pub d_hidden: usize,
    pub d_latent: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub decoder_channels: usize,
    pub decoder_kernel: usize,
    pub fitness_hidden: usize,

    pub use_fitness_head: bool,
    pub use_neg_sampling: bool,
    pub use_interp: bool,

    /// Reconstruction weight.
    pub gamma: f64,
    /// Fitness-task weight.
    pub alpha: f64,
    /// Negative-sampling weight inside the fitness task.
    pub eta: f64,
    pub interp_weight: f64,
    pub latent_norm_weight: f64,
    pub spectral_weight: f64,

    /// Negative samples per training step.
    pub neg_samples: usize,
    /// Minimum negative-sample norm as a multiple of the largest batch norm.
    pub neg_scale: f64,
    /// Fraction of each batch used for interpolation pairs.
    pub interp_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small CPU-trainable architecture.
    pub fn desk() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_embed: 32,
            d_hidden: 64,
            d_latent: 8,
            max_len: 16,
            vocab_size: Alphabet::protein().len(),
            decoder_channels: 32,
            decoder_kernel: 3,
            fitness_hidden: 32,
            use_fitness_head: true,
            use_neg_sampling: true,
            use_interp: true,
            gamma: 1.0,
            alpha: 1.0,
            eta: 1.0,
            interp_weight: 1.0,
            latent_norm_weight: 1e-3,
            spectral_weight: 1e-3,
            neg_samples: 32,
            neg_scale: 1.2,
            interp_fraction: 0.5,
        }
    }

    /// Full-size architecture: 10 layers, 4 heads, 300-wide embeddings,
    /// 400-wide feed-forward, 30-dimensional latent.
    pub fn paper() -> Self {
        Self { n_layers: 10, n_heads: 4, d_embed: 300, d_hidden: 400, d_latent: 30, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_heads == 0 || self.d_embed % self.n_heads != 0 {
            return bad("d_embed must be divisible by n_heads");
        }
        if self.d_latent == 0 || self.max_len == 0 || self.n_layers == 0 || self.d_hidden == 0 {
            return bad("model dimensions must be positive");
        }
        if self.decoder_channels == 0 || self.fitness_hidden == 0 {
            return bad("decoder_channels and fitness_hidden must be positive");
        }
        if self.decoder_kernel % 2 == 0 {
            return bad("decoder_kernel must be odd");
        }
        if self.vocab_size != Alphabet::protein().len() {
            return bad("vocab_size must match the protein alphabet (22)");
        }
        let weights = [
            self.gamma,
            self.alpha,
            self.eta,
            self.interp_weight,
            self.latent_norm_weight,
            self.spectral_weight,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("loss weights must be finite and nonnegative");
        }
        if self.use_neg_sampling && (self.neg_samples == 0 || self.neg_scale <= 1.0) {
            return bad("negative sampling needs neg_samples >= 1 and neg_scale > 1");
        }
        if self.use_interp && !(self.interp_fraction > 0.0 && self.interp_fraction <= 1.0) {
            return bad("interp_fraction must be in (0, 1]");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_embed / self.n_heads
    }
}

/// Ablation presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "ae")]
    Ae,
    #[serde(rename = "jtae")]
    JtAe,
    #[serde(rename = "relso-neg")]
    RelsoNeg,
    #[serde(rename = "relso-interp")]
    RelsoInterp,
    #[serde(rename = "relso")]
    Relso,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Ae, Preset::JtAe, Preset::RelsoNeg, Preset::RelsoInterp, Preset::Relso];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ae" => Ok(Preset::Ae),
            "jtae" | "jt-ae" => Ok(Preset::JtAe),
            "relso-neg" => Ok(Preset::RelsoNeg),
            "relso-interp" => Ok(Preset::RelsoInterp),
            "relso" => Ok(Preset::Relso),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Ae => "ae",
            Preset::JtAe => "jtae",
            Preset::RelsoNeg => "relso-neg",
            Preset::RelsoInterp => "relso-interp",
            Preset::Relso => "relso",
        }
    }

    /// Sets ablation flags. The plain autoencoder also zeroes `alpha`; only
    /// the regularized presets keep the spectral and latent-norm penalties.
    pub fn apply(self, cfg: &mut ModelConfig) {
        let (head, neg, interp) = match self {
            Preset::Ae => (false, false, false),
            Preset::JtAe => (true, false, false),
            Preset::RelsoNeg => (true, true, false),
            Preset::RelsoInterp => (true, false, true),
            Preset::Relso => (true, true, true),
        };
        cfg.use_fitness_head = head;
        cfg.use_neg_sampling = neg;
        cfg.use_interp = interp;
        if !head {
            cfg.alpha = 0.0;
        }
        if matches!(self, Preset::Ae | Preset::JtAe) {
            cfg.spectral_weight = 0.0;
            cfg.latent_norm_weight = 0.0;
        }
    }

    pub fn config(self) -> ModelConfig {
        let mut c = ModelConfig::desk();
        self.apply(&mut c);
        c
    }
}
