use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::Fnv64;

/// Architecture / training-objective variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Encoder-decoder model trained with the adversary-aware objective.
    Full,
    /// Mean pooling in place of both transformer stacks; adversary-aware loss.
    NoLocalGlobal,
    /// Full architecture trained on clean cross-entropy only.
    NoAdversaryAware,
    /// Mean pooling and clean cross-entropy only.
    BaselineMeanpool,
}

impl Variant {
    pub const ABLATIONS: [Variant; 3] = [Variant::Full, Variant::NoLocalGlobal, Variant::NoAdversaryAware];

    pub fn uses_local_global(self) -> bool {
        matches!(self, Variant::Full | Variant::NoAdversaryAware)
    }

    pub fn adversary_aware(self) -> bool {
        matches!(self, Variant::Full | Variant::NoLocalGlobal)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLocalGlobal => "no_local_global",
            Variant::NoAdversaryAware => "no_adversary_aware",
            Variant::BaselineMeanpool => "baseline_meanpool",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_local_global" => Ok(Variant::NoLocalGlobal),
            "no_adversary_aware" => Ok(Variant::NoAdversaryAware),
            "baseline_meanpool" => Ok(Variant::BaselineMeanpool),
            other => Err(Error::config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Token slots per post (`d`).
    pub tokens_per_post: usize,
    /// Maximum posts per sequence (`T`).
    pub window: usize,
    pub emb_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub variant: Variant,
}

impl ModelConfig {
    /// Full-size defaults: d=30, T=20, 128-dim embeddings, 2 heads, 1+1 layers.
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            tokens_per_post: 30,
            window: 20,
            emb_dim: 128,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_mult: 4,
            dropout: 0.0,
            variant: Variant::Full,
        }
    }

    /// Desk-scale configuration used by the synthetic experiments.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            emb_dim: 32,
            ..Self::new(vocab_size)
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("tokens_per_post", self.tokens_per_post),
            ("window", self.window),
            ("emb_dim", self.emb_dim),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be >= 1")));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must cover <pad> and <unk>"));
        }
        if !self.emb_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "emb_dim {} is not divisible by heads {}",
                self.emb_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.emb_dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.emb_dim * self.ffn_mult
    }

    /// Hash of every field that determines parameter shapes.
    pub fn shape_hash(&self) -> u64 {
        [
            self.vocab_size,
            self.tokens_per_post,
            self.window,
            self.emb_dim,
            self.heads,
            self.enc_layers,
            self.dec_layers,
            self.ffn_mult,
        ]
        .iter()
        .fold(Fnv64::new().str("robad-model"), |h, &v| h.u64(v as u64))
        .finish()
    }
}
