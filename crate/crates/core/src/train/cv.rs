use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, robustness_eval, FoldMetrics, MetricsReport};
use super::trainer::{train, TrainConfig, TrainOutput};
use crate::attacks::AttackSpec;
use crate::data::{
    encode_users, filter_users, fold_hash, kfold_split, stratified_holdout, Fold, PreprocessSettings, RawUser,
    TokenizedUser, Vocab,
};
use crate::error::{Error, Result};
use crate::model::{Model, Variant};

/// Cross-validation settings around a [`TrainConfig`]. The model's
/// `vocab_size` is replaced per fold by the size of that fold's vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub train: TrainConfig,
    pub folds: usize,
    /// Share of each fold's training users held out for model selection.
    pub val_fraction: f64,
    pub min_post_tokens: usize,
    pub min_posts: usize,
    pub min_freq: usize,
    pub eval_attacks: Vec<AttackSpec>,
    /// Folds trained concurrently.
    pub jobs: usize,
}

impl CvConfig {
    pub fn new(train: TrainConfig) -> Self {
        let d = PreprocessSettings::default();
        CvConfig {
            train,
            folds: 5,
            val_fraction: 0.1,
            min_post_tokens: d.min_post_tokens,
            min_posts: d.min_posts,
            min_freq: d.min_freq,
            eval_attacks: Vec::new(),
            jobs: 1,
        }
    }

    pub fn preprocess_settings(&self) -> PreprocessSettings {
        PreprocessSettings {
            tokens_per_post: self.train.model.tokens_per_post,
            window: self.train.model.window,
            min_post_tokens: self.min_post_tokens,
            min_posts: self.min_posts,
            min_freq: self.min_freq,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.folds < 2 {
            return Err(Error::config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs must be at least 1"));
        }
        Ok(())
    }
}

/// Everything one fold produces.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub fold: usize,
    pub model: Model,
    pub vocab: Vocab,
    pub training: TrainOutput,
    pub metrics: FoldMetrics,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub report: MetricsReport,
    pub folds: Vec<FoldRun>,
    pub fold_hash: u64,
}

/// Filters the corpus and assigns folds; shared by every run on the corpus.
pub fn prepare_folds(cfg: &CvConfig, raw: &[RawUser]) -> Result<(Vec<TokenizedUser>, Vec<Fold>)> {
    cfg.validate()?;
    let users = filter_users(raw, &cfg.preprocess_settings());
    if users.is_empty() {
        return Err(Error::contract("no user survived filtering"));
    }
    let labels: Vec<u8> = users.iter().map(|u| u.label).collect();
    let folds = kfold_split(&labels, cfg.folds, cfg.train.seed)?;
    Ok((users, folds))
}

/// Trains on `fold.train` (minus a validation hold-out) and evaluates on
/// `fold.test`. The vocabulary sees training-fold text only.
pub fn run_fold(cfg: &CvConfig, users: &[TokenizedUser], fold: &Fold, index: usize) -> Result<FoldRun> {
    let seed = cfg.train.seed.wrapping_add(index as u64);
    let labels: Vec<u8> = users.iter().map(|u| u.label).collect();
    let pick = |idx: &[usize]| idx.iter().map(|&i| users[i].clone()).collect::<Vec<_>>();
    let train_raw = pick(&fold.train);
    let vocab = Vocab::build(&train_raw, cfg.min_freq);
    let d = cfg.train.model.tokens_per_post;
    let (fit_idx, val_idx) = stratified_holdout(&fold.train, &labels, cfg.val_fraction, seed);
    let fit = encode_users(&pick(&fit_idx), &vocab, d);
    let val = encode_users(&pick(&val_idx), &vocab, d);
    let test = encode_users(&pick(&fold.test), &vocab, d);

    let mut tc = cfg.train.clone();
    tc.seed = seed;
    tc.model.vocab_size = vocab.len();
    let training = train(&tc, &fit, &val)?;
    let model = Model::from_params(tc.model.clone(), training.params.clone())?;
    let scores = evaluate(&model, &test)?;
    let source = encode_users(&train_raw, &vocab, d);
    let after = robustness_eval(&model, &test, &source, &cfg.eval_attacks)?;
    Ok(FoldRun {
        fold: index,
        model,
        vocab,
        training,
        metrics: FoldMetrics::new(index, scores, after),
    })
}

fn run_folds(cfg: &CvConfig, users: &[TokenizedUser], folds: &[Fold]) -> Result<Vec<FoldRun>> {
    let run = |(i, f): (usize, &Fold)| run_fold(cfg, users, f, i);
    if cfg.jobs == 1 {
        return folds.iter().enumerate().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| folds.par_iter().enumerate().map(run).collect())
}

pub fn cross_validate(cfg: &CvConfig, raw: &[RawUser]) -> Result<CvResult> {
    let (users, folds) = prepare_folds(cfg, raw)?;
    let runs = run_folds(cfg, &users, &folds)?;
    let report = MetricsReport::from_folds(runs.iter().map(|r| r.metrics.clone()).collect())?;
    Ok(CvResult {
        report,
        folds: runs,
        fold_hash: fold_hash(&folds),
    })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub fold_hash: u64,
    pub result: CvResult,
}

/// Cross-validates the full model and both ablations on identical folds and
/// seeds.
pub fn ablate(cfg: &CvConfig, raw: &[RawUser]) -> Result<Vec<AblationRow>> {
    Variant::ABLATIONS
        .iter()
        .map(|&variant| {
            let mut c = cfg.clone();
            c.train.model.variant = variant;
            let result = cross_validate(&c, raw)?;
            Ok(AblationRow {
                variant,
                fold_hash: result.fold_hash,
                result,
            })
        })
        .collect()
}

/// CSV: `variant,f1` plus one post-attack F1 column per attack.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let attacks: Vec<String> = rows
        .first()
        .map(|r| r.result.report.f1_after_attack.keys().cloned().collect())
        .unwrap_or_default();
    let mut s = String::from("variant,f1");
    for a in &attacks {
        s.push_str(&format!(",f1_after_{a}"));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{:.6}", r.variant, r.result.report.f1));
        for a in &attacks {
            s.push_str(&format!(",{:.6}", r.result.report.f1_after_attack[a]));
        }
        s.push('\n');
    }
    s
}

/// One hyperparameter override.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    EncLayers(usize),
    DecLayers(usize),
    WContrastive(f64),
    LearningRate(f64),
    BatchSize(usize),
    Temperature(f64),
}

impl Knob {
    pub const KEYS: [&'static str; 6] = [
        "enc_layers",
        "dec_layers",
        "w_contrastive",
        "learning_rate",
        "batch_size",
        "temperature",
    ];

    pub fn parse(key: &str, value: f64) -> Result<Knob> {
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::config(format!("{key} must be a positive integer, got {value}")))
            }
        };
        Ok(match key {
            "enc_layers" => Knob::EncLayers(count()?),
            "dec_layers" => Knob::DecLayers(count()?),
            "w_contrastive" => Knob::WContrastive(value),
            "learning_rate" => Knob::LearningRate(value),
            "batch_size" => Knob::BatchSize(count()?),
            "temperature" => Knob::Temperature(value),
            other => return Err(Error::config(format!("unknown sweep key `{other}`"))),
        })
    }

    pub fn apply(self, c: &mut TrainConfig) {
        match self {
            Knob::EncLayers(n) => c.model.enc_layers = n,
            Knob::DecLayers(n) => c.model.dec_layers = n,
            Knob::WContrastive(w) => c.w_contrastive = w,
            Knob::LearningRate(lr) => c.lr = lr,
            Knob::BatchSize(b) => c.batch_size = b,
            Knob::Temperature(t) => c.temperature = t,
        }
    }
}

impl fmt::Display for Knob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Knob::EncLayers(n) => write!(f, "enc_layers={n}"),
            Knob::DecLayers(n) => write!(f, "dec_layers={n}"),
            Knob::WContrastive(w) => write!(f, "w_contrastive={w}"),
            Knob::LearningRate(lr) => write!(f, "learning_rate={lr}"),
            Knob::BatchSize(b) => write!(f, "batch_size={b}"),
            Knob::Temperature(t) => write!(f, "temperature={t}"),
        }
    }
}

/// Grid points, each a set of overrides applied to the base config.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGrid {
    pub points: Vec<Vec<Knob>>,
}

impl ParamGrid {
    /// Cartesian product of the axes, first axis varying slowest.
    pub fn cartesian(axes: &[Vec<Knob>]) -> ParamGrid {
        if axes.is_empty() || axes.iter().any(Vec::is_empty) {
            return ParamGrid::default();
        }
        let mut points: Vec<Vec<Knob>> = vec![Vec::new()];
        for axis in axes {
            points = points
                .iter()
                .flat_map(|p| {
                    axis.iter().map(move |&k| {
                        let mut q = p.clone();
                        q.push(k);
                        q
                    })
                })
                .collect();
        }
        ParamGrid { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub setting: String,
    pub f1: f64,
    pub report: MetricsReport,
}

pub fn sweep(base: &CvConfig, grid: &ParamGrid, raw: &[RawUser]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    grid.points
        .iter()
        .map(|point| {
            let mut c = base.clone();
            for k in point {
                k.apply(&mut c.train);
            }
            let result = cross_validate(&c, raw)?;
            let setting = point.iter().map(Knob::to_string).collect::<Vec<_>>().join(" ");
            Ok(SweepRow {
                setting,
                f1: result.report.f1,
                report: result.report,
            })
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("setting,f1\n");
    for r in rows {
        s.push_str(&format!("{},{:.6}\n", r.setting, r.f1));
    }
    s
}
