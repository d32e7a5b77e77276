//! Flat TOML run configuration. Every key is optional; missing keys take the
//! library defaults.

use std::path::{Path, PathBuf};

use robad_core::train::{CvConfig, TrainConfig};
use robad_core::{AttackKind, AttackSpec, ModelConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,

    pub tokens_per_post: Option<usize>,
    pub window: Option<usize>,
    pub emb_dim: Option<usize>,
    pub heads: Option<usize>,
    pub enc_layers: Option<usize>,
    pub dec_layers: Option<usize>,
    pub ffn_mult: Option<usize>,
    pub dropout: Option<f64>,
    pub variant: Option<String>,

    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub w_contrastive: Option<f64>,
    pub temperature: Option<f64>,
    pub train_attack: Option<String>,
    pub train_attack_seed: Option<u64>,
    pub ngram_order: Option<usize>,
    pub target_len: Option<usize>,
    pub regenerate_attacks: Option<bool>,
    pub seed: Option<u64>,
    pub patience: Option<usize>,

    pub folds: Option<usize>,
    pub val_fraction: Option<f64>,
    pub min_post_tokens: Option<usize>,
    pub min_posts: Option<usize>,
    pub min_freq: Option<usize>,
    pub eval_attacks: Option<Vec<String>>,
    pub eval_attack_seed: Option<u64>,
    pub jobs: Option<usize>,
}

fn attack_kind(name: &str) -> Result<AttackKind, CliError> {
    name.parse()
        .map_err(|_| CliError::config(format!("unknown attack `{name}`")))
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e: toml::de::Error| CliError::config(e.message().to_string()))
    }

    /// Keys set in `other` replace those in `self`.
    pub fn merge(mut self, other: RunConfigFile) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(
            data,
            out,
            tokens_per_post,
            window,
            emb_dim,
            heads,
            enc_layers,
            dec_layers,
            ffn_mult,
            dropout,
            variant,
            learning_rate,
            batch_size,
            epochs,
            w_contrastive,
            temperature,
            train_attack,
            train_attack_seed,
            ngram_order,
            target_len,
            regenerate_attacks,
            seed,
            patience,
            folds,
            val_fraction,
            min_post_tokens,
            min_posts,
            min_freq,
            eval_attacks,
            eval_attack_seed,
            jobs
        );
        self
    }

    /// Builds and validates the cross-validation config. The vocabulary size
    /// is a placeholder until each fold builds its vocabulary.
    pub fn resolve(&self) -> Result<CvConfig, CliError> {
        let mut m = ModelConfig::new(2);
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(m.tokens_per_post, self.tokens_per_post);
        set!(m.window, self.window);
        set!(m.emb_dim, self.emb_dim);
        set!(m.heads, self.heads);
        set!(m.enc_layers, self.enc_layers);
        set!(m.dec_layers, self.dec_layers);
        set!(m.ffn_mult, self.ffn_mult);
        set!(m.dropout, self.dropout);
        if let Some(v) = &self.variant {
            m.variant = v.parse::<Variant>().map_err(CliError::from)?;
        }

        let mut t = TrainConfig::new(m);
        set!(t.lr, self.learning_rate);
        set!(t.batch_size, self.batch_size);
        set!(t.epochs, self.epochs);
        set!(t.w_contrastive, self.w_contrastive);
        set!(t.temperature, self.temperature);
        if let Some(a) = &self.train_attack {
            t.train_attack.kind = attack_kind(a)?;
        }
        set!(t.train_attack.seed, self.train_attack_seed);
        set!(t.train_attack.ngram_order, self.ngram_order);
        set!(t.train_attack.target_len, self.target_len);
        set!(t.regenerate_attacks, self.regenerate_attacks);
        set!(t.seed, self.seed);
        set!(t.patience, self.patience);

        let mut cv = CvConfig::new(t);
        set!(cv.folds, self.folds);
        set!(cv.val_fraction, self.val_fraction);
        set!(cv.min_post_tokens, self.min_post_tokens);
        set!(cv.min_posts, self.min_posts);
        set!(cv.min_freq, self.min_freq);
        set!(cv.jobs, self.jobs);
        let names = self
            .eval_attacks
            .clone()
            .unwrap_or_else(|| AttackKind::EVAL.iter().map(|k| k.as_str().to_string()).collect());
        let seed = self.eval_attack_seed.unwrap_or(0);
        cv.eval_attacks = names
            .iter()
            .map(|n| {
                let mut spec = AttackSpec::new(attack_kind(n)?, seed);
                spec.ngram_order = cv.train.train_attack.ngram_order;
                spec.target_len = cv.train.train_attack.target_len;
                Ok(spec)
            })
            .collect::<Result<_, CliError>>()?;
        cv.validate().map_err(CliError::from)?;
        Ok(cv)
    }

    /// Every key filled in from a resolved config, for run records.
    pub fn from_resolved(cv: &CvConfig, data: Option<PathBuf>, out: Option<PathBuf>) -> Self {
        let t = &cv.train;
        let m = &t.model;
        RunConfigFile {
            data,
            out,
            tokens_per_post: Some(m.tokens_per_post),
            window: Some(m.window),
            emb_dim: Some(m.emb_dim),
            heads: Some(m.heads),
            enc_layers: Some(m.enc_layers),
            dec_layers: Some(m.dec_layers),
            ffn_mult: Some(m.ffn_mult),
            dropout: Some(m.dropout),
            variant: Some(m.variant.to_string()),
            learning_rate: Some(t.lr),
            batch_size: Some(t.batch_size),
            epochs: Some(t.epochs),
            w_contrastive: Some(t.w_contrastive),
            temperature: Some(t.temperature),
            train_attack: Some(t.train_attack.kind.to_string()),
            train_attack_seed: Some(t.train_attack.seed),
            ngram_order: Some(t.train_attack.ngram_order),
            target_len: Some(t.train_attack.target_len),
            regenerate_attacks: Some(t.regenerate_attacks),
            seed: Some(t.seed),
            patience: Some(t.patience),
            folds: Some(cv.folds),
            val_fraction: Some(cv.val_fraction),
            min_post_tokens: Some(cv.min_post_tokens),
            min_posts: Some(cv.min_posts),
            min_freq: Some(cv.min_freq),
            eval_attacks: Some(cv.eval_attacks.iter().map(|a| a.kind.to_string()).collect()),
            eval_attack_seed: Some(cv.eval_attacks.first().map_or(0, |a| a.seed)),
            jobs: Some(cv.jobs),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
