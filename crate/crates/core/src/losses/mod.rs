//! Set matching between decoded elements and ground truth, and the training
//! objective: Manhattan point regression, sigmoid focal classification and
//! the Laplace negative log-likelihood, summed over decoder layers.

mod hungarian;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffArray, Tape};
use crate::error::{Error, Result};
use crate::scenegen::{MapElement, PvElement};
use crate::ua_decoder::{ElementPrediction, LayerOutput};

pub use hungarian::{assignment_cost, hungarian};

/// Ground-truth element in the decoder's output coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub class: usize,
    pub points: Vec<[f64; 2]>,
}

impl From<&MapElement> for Target {
    fn from(e: &MapElement) -> Self {
        Self {
            class: e.class.index(),
            points: e.points.points().to_vec(),
        }
    }
}

impl From<&PvElement> for Target {
    fn from(e: &PvElement) -> Self {
        Self {
            class: e.class.index(),
            points: e.points.points().to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub pts: f64,
    pub cls: f64,
    pub nll: f64,
    pub distill: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub cost_cls: f64,
    pub cost_pts: f64,
    /// Apply the likelihood term at every layer instead of the last only.
    pub nll_every_layer: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pts: 50.0,
            cls: 5.0,
            nll: 0.05,
            distill: 10.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            cost_cls: 2.0,
            cost_pts: 1.0,
            nll_every_layer: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(prediction, target)` pairs sorted by prediction.
    pub pairs: Vec<(usize, usize)>,
    /// Per pair: the target is compared in reversed point order.
    pub reversed: Vec<bool>,
    pub unmatched: Vec<usize>,
    pub cost: f64,
}

/// Mean per-point Manhattan distance, in units, under the better of the two
/// target orientations. Returns the distance and whether reversal won.
pub fn oriented_manhattan(pred: &[[f64; 2]], target: &[[f64; 2]], unit: f64) -> (f64, bool) {
    let n = pred.len().min(target.len()).max(1) as f64;
    let fwd: f64 = pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs())
        .sum();
    let rev: f64 = pred
        .iter()
        .zip(target.iter().rev())
        .map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs())
        .sum();
    if rev < fwd {
        (rev / n / unit, true)
    } else {
        (fwd / n / unit, false)
    }
}

/// Matching cost matrix `[M][G]`.
pub fn cost_matrix(preds: &[ElementPrediction], targets: &[Target], w: &LossWeights, unit: f64) -> Vec<Vec<f64>> {
    preds
        .iter()
        .map(|p| {
            targets
                .iter()
                .map(|g| w.cost_cls * (1.0 - p.scores[g.class]) + w.cost_pts * oriented_manhattan(&p.points, &g.points, unit).0)
                .collect()
        })
        .collect()
}

/// Exact minimum-cost assignment of predictions to targets.
pub fn hungarian_match(preds: &[ElementPrediction], targets: &[Target], w: &LossWeights, unit: f64) -> MatchResult {
    let cost = cost_matrix(preds, targets, w, unit);
    let pairs = if targets.is_empty() { Vec::new() } else { hungarian(&cost) };
    let total = assignment_cost(&cost, &pairs);
    let reversed = pairs
        .iter()
        .map(|&(i, j)| oriented_manhattan(&preds[i].points, &targets[j].points, unit).1)
        .collect();
    let matched: std::collections::BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    MatchResult {
        unmatched: (0..preds.len()).filter(|i| !matched.contains(i)).collect(),
        pairs,
        reversed,
        cost: total,
    }
}

fn oriented_targets(m: &MatchResult, targets: &[Target]) -> Vec<f64> {
    m.pairs
        .iter()
        .zip(&m.reversed)
        .flat_map(|(&(_, j), &rev)| {
            let pts = &targets[j].points;
            let ordered: Vec<[f64; 2]> = if rev { pts.iter().rev().copied().collect() } else { pts.clone() };
            ordered.into_iter().flatten()
        })
        .collect()
}

fn pred_rows(m: &MatchResult) -> Vec<usize> {
    m.pairs.iter().map(|p| p.0).collect()
}

/// `weight · mean over pairs of (1/N)·Σ(|Δx| + |Δy|)` in units. `points` is
/// `[M, 2N]`.
pub fn point_loss(t: &mut Tape<f64>, points: &DiffArray<f64>, m: &MatchResult, targets: &[Target], weight: f64, unit: f64) -> Result<DiffArray<f64>> {
    if m.pairs.is_empty() {
        return Ok(t.constant(&DiffArray::scalar(0.0)));
    }
    let n = points.shape()[1] / 2;
    let pred = t.gather_rows(points, &pred_rows(m))?;
    let tgt = DiffArray::new(pred.shape().to_vec(), oriented_targets(m, targets))?;
    let d = t.sub(&pred, &tgt)?;
    let d = t.abs(&d)?;
    let s = t.sum(&d)?;
    t.scale(&s, weight / (m.pairs.len() as f64 * n as f64 * unit))
}

/// `weight · mean over pairs of (1/N)·Σᵢⱼ (ln(2σ) + |p − p̂|/σ)` with both
/// residual and scale measured in units.
pub fn nll_loss(
    t: &mut Tape<f64>,
    points: &DiffArray<f64>,
    sigmas: &DiffArray<f64>,
    m: &MatchResult,
    targets: &[Target],
    weight: f64,
    unit: f64,
) -> Result<DiffArray<f64>> {
    if m.pairs.is_empty() {
        return Ok(t.constant(&DiffArray::scalar(0.0)));
    }
    if sigmas.values().iter().any(|&s| s <= 0.0) {
        return Err(Error::Domain {
            op: "nll_loss",
            detail: "non-positive scale".into(),
        });
    }
    let n = points.shape()[1] / 2;
    let rows = pred_rows(m);
    let pred = t.gather_rows(points, &rows)?;
    let sig = t.gather_rows(sigmas, &rows)?;
    let sig = t.scale(&sig, 1.0 / unit)?;
    let tgt = DiffArray::new(pred.shape().to_vec(), oriented_targets(m, targets))?;
    let r = t.sub(&pred, &tgt)?;
    let r = t.abs(&r)?;
    let r = t.scale(&r, 1.0 / unit)?;
    let ratio = t.div(&r, &sig)?;
    let two_sig = t.scale(&sig, 2.0)?;
    let log = t.ln(&two_sig)?;
    let terms = t.add(&log, &ratio)?;
    let s = t.sum(&terms)?;
    t.scale(&s, weight / (m.pairs.len() as f64 * n as f64))
}

/// Sigmoid focal loss over `scores: [M, 3]`, matched rows targeting their
/// class and the rest background, averaged over predictions.
pub fn focal_cls_loss(t: &mut Tape<f64>, scores: &DiffArray<f64>, m: &MatchResult, targets: &[Target], w: &LossWeights) -> Result<DiffArray<f64>> {
    let rows = scores.shape()[0];
    let classes = scores.shape()[1];
    let mut onehot = vec![0.0; rows * classes];
    for &(i, j) in &m.pairs {
        onehot[i * classes + targets[j].class] = 1.0;
    }
    let pos = DiffArray::new(vec![rows, classes], onehot.clone())?;
    let neg = DiffArray::new(vec![rows, classes], onehot.iter().map(|v| 1.0 - v).collect())?;
    let p = t.clamp(scores, 1e-7, 1.0 - 1e-7)?;
    let q = t.scale(&p, -1.0)?;
    let q = t.shift(&q, 1.0)?;
    let ln_p = t.ln(&p)?;
    let ln_q = t.ln(&q)?;
    let g = w.focal_gamma;
    // (1 − p)^γ and p^γ through exp(γ ln ·)
    let mod_pos = t.scale(&ln_q, g)?;
    let mod_pos = t.exp(&mod_pos)?;
    let mod_neg = t.scale(&ln_p, g)?;
    let mod_neg = t.exp(&mod_neg)?;
    let a = t.mul(&mod_pos, &ln_p)?;
    let a = t.mul(&a, &pos)?;
    let a = t.scale(&a, -w.focal_alpha)?;
    let b = t.mul(&mod_neg, &ln_q)?;
    let b = t.mul(&b, &neg)?;
    let b = t.scale(&b, -(1.0 - w.focal_alpha))?;
    let all = t.add(&a, &b)?;
    let s = t.sum(&all)?;
    t.scale(&s, w.cls / rows.max(1) as f64)
}

/// Weighted loss terms of one decoder layer.
#[derive(Clone, Debug)]
pub struct LayerLoss {
    pub pts: DiffArray<f64>,
    pub cls: DiffArray<f64>,
    pub nll: Option<DiffArray<f64>>,
    pub matching: MatchResult,
}

/// Matches and scores one layer's output against `targets`.
pub fn layer_loss(t: &mut Tape<f64>, out: &LayerOutput, targets: &[Target], w: &LossWeights, unit: f64, with_nll: bool) -> Result<LayerLoss> {
    let preds = out.predictions();
    let matching = hungarian_match(&preds, targets, w, unit);
    let pts = point_loss(t, &out.points, &matching, targets, w.pts, unit)?;
    let cls = focal_cls_loss(t, &out.scores, &matching, targets, w)?;
    let nll = match (&out.sigmas, with_nll) {
        (Some(s), true) => Some(nll_loss(t, &out.points, s, &matching, targets, w.nll, unit)?),
        _ => None,
    };
    Ok(LayerLoss { pts, cls, nll, matching })
}

/// Per-term values of one step, each already weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_pts: f64,
    pub l_cls: f64,
    pub l_nll: f64,
    pub l_distill: f64,
    pub total: f64,
}

/// Loss for all layers of a decoder stack.
pub fn decoder_loss(t: &mut Tape<f64>, layers: &[LayerOutput], targets: &[Target], w: &LossWeights, unit: f64) -> Result<Vec<LayerLoss>> {
    let last = layers.len().saturating_sub(1);
    layers
        .iter()
        .enumerate()
        .map(|(l, out)| layer_loss(t, out, targets, w, unit, w.nll_every_layer || l == last))
        .collect()
}

/// Sum over layers of the point, class and likelihood terms plus the
/// distillation term once. Returns the scalar and its breakdown.
pub fn total_loss(t: &mut Tape<f64>, layers: &[LayerLoss], distill: Option<&DiffArray<f64>>) -> Result<(DiffArray<f64>, LossRecord)> {
    let mut rec = LossRecord::default();
    let mut parts = Vec::new();
    for l in layers {
        rec.l_pts += l.pts.item();
        rec.l_cls += l.cls.item();
        parts.push(l.pts.clone());
        parts.push(l.cls.clone());
        if let Some(n) = &l.nll {
            rec.l_nll += n.item();
            parts.push(n.clone());
        }
    }
    if let Some(d) = distill {
        rec.l_distill = d.item();
        parts.push(d.clone());
    }
    let mut total = t.constant(&DiffArray::scalar(0.0));
    for p in &parts {
        total = t.add(&total, p)?;
    }
    rec.total = total.item();
    Ok((total, rec))
}

/// Appends one JSON line per record.
pub fn append_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}
