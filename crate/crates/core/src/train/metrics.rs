use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackSpec, Attacker};
use crate::data::{labels, UserSequence};
use crate::error::{Error, Result};
use crate::model::Model;

/// Positive-class (bad actor) precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Scores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Scores {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Scores { precision, recall, f1 }
    }

    pub fn from_predictions(pred: &[u8], truth: &[u8]) -> Scores {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (1, 1) => tp += 1,
                (1, _) => fp += 1,
                (_, 1) => fn_ += 1,
                _ => {}
            }
        }
        Scores::from_counts(tp, fp, fn_)
    }
}

/// Validation statistics used for model selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    pub f1: f64,
    pub ce: f64,
}

/// `100·(f1 − f1_after)/f1`, or 0 when `f1` is 0.
pub fn relative_drop(f1: f64, f1_after: f64) -> f64 {
    if f1 > 0.0 {
        100.0 * (f1 - f1_after) / f1
    } else {
        0.0
    }
}

pub fn evaluate(model: &Model, users: &[UserSequence]) -> Result<Scores> {
    if users.is_empty() {
        return Err(Error::contract("evaluate: no users"));
    }
    Ok(Scores::from_predictions(&model.predict(users)?, &labels(users)))
}

/// F1 after each attack. `source` is the corpus attack material is drawn
/// from (the fold's training users).
pub fn robustness_eval(
    model: &Model,
    users: &[UserSequence],
    source: &[UserSequence],
    attacks: &[AttackSpec],
) -> Result<BTreeMap<String, f64>> {
    let cfg = &model.config;
    let truth = labels(users);
    let mut out = BTreeMap::new();
    for spec in attacks {
        let attacked = Attacker::new(*spec, source)?.attack_all(users, cfg.window, cfg.tokens_per_post)?;
        let f1 = Scores::from_predictions(&model.predict(&attacked)?, &truth).f1;
        out.insert(spec.kind.to_string(), f1);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f1_after_attack: BTreeMap<String, f64>,
    pub relative_drop_pct: BTreeMap<String, f64>,
}

impl FoldMetrics {
    pub fn new(fold: usize, scores: Scores, f1_after_attack: BTreeMap<String, f64>) -> Self {
        let relative_drop_pct = f1_after_attack
            .iter()
            .map(|(k, &after)| (k.clone(), relative_drop(scores.f1, after)))
            .collect();
        FoldMetrics {
            fold,
            precision: scores.precision,
            recall: scores.recall,
            f1: scores.f1,
            f1_after_attack,
            relative_drop_pct,
        }
    }
}

/// Fold means plus the per-fold rows. The top-level relative drop is taken
/// between the mean F1 and the mean post-attack F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f1_after_attack: BTreeMap<String, f64>,
    pub relative_drop_pct: BTreeMap<String, f64>,
    pub per_fold: Vec<FoldMetrics>,
}

impl MetricsReport {
    pub fn from_folds(per_fold: Vec<FoldMetrics>) -> Result<Self> {
        if per_fold.is_empty() {
            return Err(Error::contract("metrics report needs at least one fold"));
        }
        let n = per_fold.len() as f64;
        let mean = |f: &dyn Fn(&FoldMetrics) -> f64| per_fold.iter().map(f).sum::<f64>() / n;
        let f1 = mean(&|m| m.f1);
        let mut f1_after_attack = BTreeMap::new();
        for key in per_fold[0].f1_after_attack.keys() {
            let v = mean(&|m| m.f1_after_attack.get(key).copied().unwrap_or(f64::NAN));
            f1_after_attack.insert(key.clone(), v);
        }
        let relative_drop_pct = f1_after_attack
            .iter()
            .map(|(k, &after)| (k.clone(), relative_drop(f1, after)))
            .collect();
        Ok(MetricsReport {
            precision: mean(&|m| m.precision),
            recall: mean(&|m| m.recall),
            f1,
            f1_after_attack,
            relative_drop_pct,
            per_fold,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("metrics: {e}")))
    }

    /// One row per fold plus a `mean` row.
    pub fn to_csv(&self) -> String {
        let attacks: Vec<&String> = self.f1_after_attack.keys().collect();
        let mut s = String::from("fold,precision,recall,f1");
        for a in &attacks {
            let _ = write!(s, ",f1_after_{a},relative_drop_pct_{a}");
        }
        s.push('\n');
        let mut row =
            |label: String, p: f64, r: f64, f1: f64, after: &BTreeMap<String, f64>, drop: &BTreeMap<String, f64>| {
                let _ = write!(s, "{label},{p:.6},{r:.6},{f1:.6}");
                for a in &attacks {
                    let _ = write!(s, ",{:.6},{:.3}", after[*a], drop[*a]);
                }
                s.push('\n');
            };
        for m in &self.per_fold {
            row(
                m.fold.to_string(),
                m.precision,
                m.recall,
                m.f1,
                &m.f1_after_attack,
                &m.relative_drop_pct,
            );
        }
        row(
            "mean".into(),
            self.precision,
            self.recall,
            self.f1,
            &self.f1_after_attack,
            &self.relative_drop_pct,
        );
        s
    }
}
