use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{Scores, ValidationScore};
use crate::attacks::{AttackKind, AttackSpec, Attacker};
use crate::data::{labels, UserSequence};
use crate::error::{Error, Result};
use crate::hash::{derive_seed, Fnv64};
use crate::losses::{cross_entropy, cross_entropy_var, info_nce_var, total_loss_var, LossBundle};
use crate::model::{bind, init_params, Forward, Model, ModelConfig, ModelParams};
use crate::tensor::{Adam, Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    /// Upper bound on epochs; early stopping may end sooner.
    pub epochs: usize,
    pub w_contrastive: f64,
    pub temperature: f64,
    pub train_attack: AttackSpec,
    pub regenerate_attacks: bool,
    pub seed: u64,
    /// Epochs without a validation-F1 improvement before stopping.
    pub patience: usize,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            lr: 1e-3,
            batch_size: 32,
            epochs: 30,
            w_contrastive: 0.1,
            temperature: 1.0,
            train_attack: AttackSpec::new(AttackKind::CopyAppend, 0),
            regenerate_attacks: true,
            seed: 0,
            patience: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.model.variant.adversary_aware() && self.batch_size < 2 {
            return Err(Error::config(
                "batch_size must be at least 2 for adversary-aware training",
            ));
        }
        if !(0.0..=1.0).contains(&self.w_contrastive) {
            return Err(Error::config(format!(
                "w_contrastive must be in [0, 1], got {}",
                self.w_contrastive
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(())
    }

    /// Fingerprint of every field, for run records.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        Fnv64::new().str(&json).finish()
    }
}

/// One optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBundle,
}

impl StepLog {
    pub const HEADER: &'static str = "epoch\tstep\tl_ce\tl_ce_attack\tl_clf\tl_infonce\tl_total";

    /// Tab-separated row matching [`StepLog::HEADER`]; absent terms print `-`.
    pub fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.9}"));
        let l = &self.loss;
        format!(
            "{}\t{}\t{:.9}\t{}\t{:.9}\t{}\t{:.9}",
            self.epoch,
            self.step,
            l.l_ce,
            opt(l.l_ce_attack),
            l.l_clf,
            opt(l.l_infonce),
            l.l_total
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_total: f64,
    pub val: Option<ValidationScore>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub log: Vec<StepLog>,
    pub epochs: Vec<EpochSummary>,
    /// Epoch whose parameters were returned (0 = initial parameters).
    pub best_epoch: usize,
}

impl TrainOutput {
    pub fn log_text(&self) -> String {
        let mut s = String::from(StepLog::HEADER);
        s.push('\n');
        for l in &self.log {
            s.push_str(&l.to_line());
            s.push('\n');
        }
        s
    }
}

/// Orders users into batches. A trailing batch of one is folded into the
/// previous batch when the contrastive term needs at least two pairs.
fn batches(order: &[usize], size: usize, min_last: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min_last) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("nonempty") = &order[start..];
    }
    out
}

fn step_loss(
    g: &mut Graph,
    cfg: &TrainConfig,
    p: &crate::model::Params<Var>,
    originals: &[&UserSequence],
    attacked: Option<&[&UserSequence]>,
    dropout_seed: u64,
) -> Result<(Var, LossBundle)> {
    let y: Vec<u8> = originals.iter().map(|u| u.label).collect();
    let n = originals.len();
    let mut users: Vec<&UserSequence> = originals.to_vec();
    if let Some(a) = attacked {
        users.extend_from_slice(a);
    }
    let out = Forward::new(g, p, &cfg.model)
        .training(dropout_seed)
        .forward_users(&users)?;
    let Some(_) = attacked else {
        let ce = cross_entropy_var(g, out.probs, &y)?;
        let v = g.scalar(ce);
        let bundle = LossBundle {
            l_ce: v,
            l_ce_attack: None,
            l_clf: v,
            l_infonce: None,
            l_total: v,
            w: cfg.w_contrastive,
        };
        return Ok((ce, bundle));
    };
    let e = cfg.model.emb_dim;
    let probs_o = g.slice(out.probs, 0, n, 0, 2)?;
    let probs_a = g.slice(out.probs, n, n, 0, 2)?;
    let z_o = g.slice(out.z, 0, n, 0, e)?;
    let z_a = g.slice(out.z, n, n, 0, e)?;
    let ce = cross_entropy_var(g, probs_o, &y)?;
    let ce_a = cross_entropy_var(g, probs_a, &y)?;
    let clf = g.add(ce, ce_a)?;
    let nce = info_nce_var(g, z_o, z_a, cfg.temperature)?;
    let total = total_loss_var(g, clf, nce, cfg.w_contrastive)?;
    let bundle = LossBundle {
        l_ce: g.scalar(ce),
        l_ce_attack: Some(g.scalar(ce_a)),
        l_clf: g.scalar(clf),
        l_infonce: Some(g.scalar(nce)),
        l_total: g.scalar(total),
        w: cfg.w_contrastive,
    };
    Ok((total, bundle))
}

pub fn validation_score(model: &Model, users: &[UserSequence]) -> Result<ValidationScore> {
    let probs = model.predict_probs(users)?;
    let pred: Vec<u8> = probs.iter().copied().map(crate::model::predicted_label).collect();
    let y = labels(users);
    Ok(ValidationScore {
        f1: Scores::from_predictions(&pred, &y).f1,
        ce: cross_entropy(&probs, &y)?,
    })
}

/// Adam training with per-epoch validation. Returns the parameters of the
/// epoch with the best validation F1 (ties go to the lower validation
/// cross-entropy); without validation users, the last epoch's.
pub fn train(cfg: &TrainConfig, train_users: &[UserSequence], val_users: &[UserSequence]) -> Result<TrainOutput> {
    cfg.validate()?;
    let y = labels(train_users);
    if !(y.contains(&0) && y.contains(&1)) {
        return Err(Error::contract("training set must contain both labels"));
    }
    let mut params = init_params(&cfg.model, cfg.seed)?;
    let mut out = TrainOutput {
        params: params.clone(),
        log: Vec::new(),
        epochs: Vec::new(),
        best_epoch: 0,
    };
    if cfg.epochs == 0 {
        return Ok(out);
    }

    let adversarial = cfg.model.variant.adversary_aware();
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let zeros: Vec<Vec<f64>> = params.named().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut best: Option<ValidationScore> = None;
    let mut since_improvement = 0;
    let mut attacked: Vec<UserSequence> = Vec::new();
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        if adversarial && (epoch == 1 || cfg.regenerate_attacks) {
            let offset = if cfg.regenerate_attacks { (epoch - 1) as u64 } else { 0 };
            let spec = cfg
                .train_attack
                .with_seed(cfg.train_attack.seed.wrapping_add(cfg.seed).wrapping_add(offset));
            attacked = Attacker::new(spec, train_users)?.attack_all(
                train_users,
                cfg.model.window,
                cfg.model.tokens_per_post,
            )?;
        }
        let mut order: Vec<usize> = (0..train_users.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let epoch_batches = batches(&order, cfg.batch_size, if adversarial { 2 } else { 1 });
        for batch in &epoch_batches {
            step += 1;
            let originals: Vec<&UserSequence> = batch.iter().map(|&i| &train_users[i]).collect();
            let views: Vec<&UserSequence> = if adversarial {
                batch.iter().map(|&i| &attacked[i]).collect()
            } else {
                Vec::new()
            };
            let mut g = Graph::new();
            let p = bind(&mut g, &params, true);
            let dropout_seed = Fnv64::new().u64(cfg.seed).u64(step as u64).finish();
            let (loss, bundle) = step_loss(
                &mut g,
                cfg,
                &p,
                &originals,
                adversarial.then_some(&views[..]),
                dropout_seed,
            )?;
            if !bundle.l_total.is_finite() {
                return Err(Error::contract(format!(
                    "non-finite loss at epoch {epoch}, step {step}"
                )));
            }
            g.backward(loss)?;
            let grads: Vec<&[f64]> = p
                .named()
                .iter()
                .zip(&zeros)
                .map(|((_, &v), z)| g.grad(v).unwrap_or(z))
                .collect();
            opt.step(&mut params.values_mut(), &grads)?;
            epoch_total += bundle.l_total;
            out.log.push(StepLog {
                epoch,
                step,
                loss: bundle,
            });
        }

        let mean_total = epoch_total / epoch_batches.len() as f64;
        if val_users.is_empty() {
            out.epochs.push(EpochSummary {
                epoch,
                mean_total,
                val: None,
            });
            out.params = params.clone();
            out.best_epoch = epoch;
            continue;
        }
        let model = Model::from_params(cfg.model.clone(), params.clone())?;
        let score = validation_score(&model, val_users)?;
        out.epochs.push(EpochSummary {
            epoch,
            mean_total,
            val: Some(score),
        });
        let improved_f1 = best.is_none_or(|b| score.f1 > b.f1);
        let tie_break = best.is_some_and(|b| score.f1 == b.f1 && score.ce < b.ce);
        if improved_f1 || tie_break {
            best = Some(score);
            out.params = model.params;
            out.best_epoch = epoch;
        }
        if improved_f1 {
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= cfg.patience {
                break;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batching_folds_singleton_tail() {
        let order: Vec<usize> = (0..5).collect();
        let b = batches(&order, 2, 2);
        assert_eq!(b, vec![&[0, 1][..], &[2, 3, 4][..]]);
        let b = batches(&order, 2, 1);
        assert_eq!(b.len(), 3);
        assert_eq!(batches(&order[..1], 4, 2), vec![&[0][..]]);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(ModelConfig::tiny(10));
        assert!(c.validate().is_ok());
        c.w_contrastive = 1.5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.w_contrastive = 0.1;
        c.batch_size = 1;
        assert!(c.validate().is_err());
        c.model.variant = crate::model::Variant::NoAdversaryAware;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn log_line_marks_absent_terms() {
        let l = StepLog {
            epoch: 1,
            step: 2,
            loss: LossBundle {
                l_ce: 0.5,
                l_ce_attack: None,
                l_clf: 0.5,
                l_infonce: None,
                l_total: 0.5,
                w: 0.1,
            },
        };
        assert_eq!(l.to_line(), "1\t2\t0.500000000\t-\t0.500000000\t-\t0.500000000");
    }
}
