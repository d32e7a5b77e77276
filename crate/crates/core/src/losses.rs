//! Training objectives.
//!
//! Each loss exists twice: a graph form (`*_var`) used during training and a
//! plain form that evaluates the same graph on constants and returns the
//! scalar.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Probability clamp applied before taking logs.
pub const PROB_EPS: f64 = 1e-12;

/// Mean binary cross-entropy on the bad-actor probability (column 1 of
/// `probs`, shape `[N × 2]`).
pub fn cross_entropy_var(g: &mut Graph, probs: Var, labels: &[u8]) -> Result<Var> {
    let (n, c) = g.value(probs).dims2("cross_entropy")?;
    if n == 0 || labels.is_empty() {
        return Err(Error::contract("cross_entropy: empty batch"));
    }
    if c != 2 || labels.len() != n {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: vec![n, c],
            rhs: vec![labels.len(), 2],
        });
    }
    let idx: Vec<usize> = (0..n).map(|i| 2 * i + 1).collect();
    let p = g.gather_elems(probs, &idx)?;
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let q = g.affine(p, -1.0, 1.0)?;
    let lp = g.ln(p)?;
    let lq = g.ln(q)?;
    let y = Tensor::vector(labels.iter().map(|&l| f64::from(l)).collect())?;
    let not_y = Tensor::vector(labels.iter().map(|&l| 1.0 - f64::from(l)).collect())?;
    let y = g.constant(y);
    let not_y = g.constant(not_y);
    let a = g.mul(y, lp)?;
    let b = g.mul(not_y, lq)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    g.scale(m, -1.0)
}

/// InfoNCE over `N` (original, attacked) projection pairs, anchored on the
/// original view. For anchor `u` the denominator holds its positive plus both
/// views of every other user.
pub fn info_nce_var(g: &mut Graph, z_orig: Var, z_attack: Var, temperature: f64) -> Result<Var> {
    let (n, e) = g.value(z_orig).dims2("info_nce")?;
    let other = g.value(z_attack).dims2("info_nce")?;
    if other != (n, e) {
        return Err(Error::Shape {
            op: "info_nce",
            lhs: vec![n, e],
            rhs: vec![other.0, other.1],
        });
    }
    if n < 2 {
        return Err(Error::contract(format!("info_nce: need at least 2 pairs, got {n}")));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let all = g.concat_rows(&[z_orig, z_attack])?;
    let all = g.normalize_rows(all)?;
    let anchors = g.slice(all, 0, n, 0, e)?;
    let sims = g.matmul_nt(anchors, all)?;
    let sims = g.scale(sims, 1.0 / temperature)?;
    let keep: Vec<bool> = (0..n * 2 * n).map(|k| k % (2 * n) != k / (2 * n)).collect();
    let probs = g.masked_softmax(sims, &keep)?;
    let idx: Vec<usize> = (0..n).map(|u| u * 2 * n + n + u).collect();
    let pos = g.gather_elems(probs, &idx)?;
    let logp = g.ln(pos)?;
    let m = g.mean(logp)?;
    g.scale(m, -1.0)
}

fn check_weight(w: f64) -> Result<()> {
    if (0.0..=1.0).contains(&w) {
        Ok(())
    } else {
        Err(Error::config(format!("w_contrastive must be in [0, 1], got {w}")))
    }
}

/// `w·infonce + (1−w)·clf`.
pub fn total_loss_var(g: &mut Graph, l_clf: Var, l_infonce: Var, w: f64) -> Result<Var> {
    check_weight(w)?;
    let a = g.scale(l_infonce, w)?;
    let b = g.scale(l_clf, 1.0 - w)?;
    g.add(a, b)
}

/// Cross-entropy of `(benign, bad)` probability pairs.
pub fn cross_entropy(probs: &[[f64; 2]], labels: &[u8]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::contract("cross_entropy: empty batch"));
    }
    let mut g = Graph::new();
    let t = Tensor::new(vec![probs.len(), 2], probs.iter().flatten().copied().collect())?;
    let p = g.constant(t);
    let l = cross_entropy_var(&mut g, p, labels)?;
    Ok(g.scalar(l))
}

/// InfoNCE on plain row vectors.
pub fn info_nce(z_orig: &[Vec<f64>], z_attack: &[Vec<f64>], temperature: f64) -> Result<f64> {
    if z_orig.len() < 2 {
        return Err(Error::contract(format!(
            "info_nce: need at least 2 pairs, got {}",
            z_orig.len()
        )));
    }
    let rows = |z: &[Vec<f64>]| Tensor::from_rows(&z.iter().map(Vec::as_slice).collect::<Vec<_>>());
    let mut g = Graph::new();
    let a = g.constant(rows(z_orig)?);
    let b = g.constant(rows(z_attack)?);
    let l = info_nce_var(&mut g, a, b, temperature)?;
    Ok(g.scalar(l))
}

pub fn total_loss(l_clf: f64, l_infonce: f64, w: f64) -> Result<f64> {
    check_weight(w)?;
    Ok(w * l_infonce + (1.0 - w) * l_clf)
}

/// Loss components of one training step. The attacked-view terms are absent
/// when training without the adversary-aware branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_ce: f64,
    pub l_ce_attack: Option<f64>,
    pub l_clf: f64,
    pub l_infonce: Option<f64>,
    pub l_total: f64,
    pub w: f64,
}

impl LossBundle {
    /// Largest violation of `l_clf = l_ce + l_ce_attack` and
    /// `l_total = w·l_infonce + (1−w)·l_clf`.
    pub fn identity_error(&self) -> f64 {
        let clf = self.l_ce + self.l_ce_attack.unwrap_or(0.0);
        let total = match self.l_infonce {
            Some(nce) => self.w * nce + (1.0 - self.w) * self.l_clf,
            None => self.l_clf,
        };
        (clf - self.l_clf).abs().max((total - self.l_total).abs())
    }
}
