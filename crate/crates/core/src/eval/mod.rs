//! Chamfer-distance average precision for vectorized map predictions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{Frame, Polyline2D};
use crate::scalar::Scalar;
use crate::scenegen::MapClass;


/// Chamfer thresholds in meters.
pub const THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];

/// Recall sampling points for the interpolated precision envelope.
pub const RECALL_SAMPLES: usize = 101;

/// Symmetric mean point-to-point Chamfer distance.
pub fn chamfer_distance<S: Scalar, F: Frame>(a: &Polyline2D<S, F>, b: &Polyline2D<S, F>) -> S {
    chamfer_points(a.points(), b.points())
}

/// [`chamfer_distance`] on raw point lists.
pub fn chamfer_points<S: Scalar>(a: &[[S; 2]], b: &[[S; 2]]) -> S {
    let half = S::lit(0.5);
    half * (directed(a, b) + directed(b, a))
}

fn directed<S: Scalar>(from: &[[S; 2]], to: &[[S; 2]]) -> S {
    let mut total = S::zero();
    for p in from {
        let mut best = S::infinity();
        for q in to {
            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    total / S::from_usize(from.len()).unwrap()
}

/// A scored prediction. `id` must be unique within an evaluation and fixes
/// the order of equal scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection<S> {
    pub scene: usize,
    pub id: usize,
    pub class: usize,
    pub score: S,
    pub points: Vec<[S; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth<S> {
    pub scene: usize,
    pub class: usize,
    pub points: Vec<[S; 2]>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub num_gt: usize,
}

/// AP of one class at one threshold, with the raw PR walk.
#[derive(Clone, Debug, PartialEq)]
pub struct ApCurve {
    pub ap: f64,
    pub counts: Counts,
    /// `(recall, precision)` after each ranked prediction.
    pub pr: Vec<[f64; 2]>,
}

/// Ranks detections of `class`: score descending, then id ascending.
pub fn ranked<S: Scalar>(preds: &[Detection<S>], class: usize) -> Vec<&Detection<S>> {
    let mut out: Vec<&Detection<S>> = preds.iter().filter(|d| d.class == class).collect();
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.id.cmp(&b.id))
    });
    out
}

/// Greedy matching then 101-point interpolated AP.
pub fn ap_at_threshold<S: Scalar>(preds: &[Detection<S>], gts: &[GroundTruth<S>], class: usize, tau: f64) -> ApCurve {
    let gts: Vec<&GroundTruth<S>> = gts.iter().filter(|g| g.class == class).collect();
    let order = ranked(preds, class);
    let num_gt = gts.len();
    let mut used = vec![false; num_gt];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut pr = Vec::with_capacity(order.len());
    for d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.scene != d.scene {
                continue;
            }
            let c = chamfer_points(&d.points, &g.points).as_f64();
            if best.is_none_or(|(_, b)| c < b) {
                best = Some((j, c));
            }
        }
        match best {
            Some((j, c)) if c < tau => {
                used[j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
        pr.push([recall, tp as f64 / (tp + fp) as f64]);
    }
    let counts = Counts { tp, fp, num_gt };
    let ap = if num_gt == 0 {
        if order.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        interpolated_ap(&pr)
    };
    ApCurve { ap, counts, pr }
}

/// Mean over recall levels `0, 0.01, ..., 1` of the best precision reached at
/// or beyond that recall.
pub fn interpolated_ap(pr: &[[f64; 2]]) -> f64 {
    // running max from the tail gives the envelope
    let mut env = vec![0.0; pr.len()];
    let mut m: f64 = 0.0;
    for i in (0..pr.len()).rev() {
        m = m.max(pr[i][1]);
        env[i] = m;
    }
    let mut total = 0.0;
    let mut k = 0;
    for r in 0..RECALL_SAMPLES {
        let level = r as f64 / (RECALL_SAMPLES - 1) as f64;
        while k < pr.len() && pr[k][0] < level {
            k += 1;
        }
        if k < pr.len() {
            total += env[k];
        }
    }
    total / RECALL_SAMPLES as f64
}

fn tau_key(tau: f64) -> String {
    format!("{tau:.1}")
}

/// Per-class, per-threshold AP and the overall mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub per_class: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub counts: BTreeMap<String, BTreeMap<String, Counts>>,
    pub pr_curves: BTreeMap<String, BTreeMap<String, Vec<[f64; 2]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl ApResult {
    pub fn ap(&self, class: MapClass, tau: f64) -> f64 {
        self.per_class[class.name()][&tau_key(tau)]
    }

    /// AP of a class averaged over thresholds.
    pub fn class_mean(&self, class: MapClass) -> f64 {
        let row = &self.per_class[class.name()];
        row.values().sum::<f64>() / row.len() as f64
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["method".to_string()];
        cols.extend(MapClass::ALL.iter().map(|c| format!("AP_{}", c.name())));
        cols.push("mAP".into());
        cols.join(",")
    }

    /// One table row: per-class AP and mAP, in percent.
    pub fn csv_row(&self, label: &str) -> String {
        let mut cols = vec![label.to_string()];
        cols.extend(MapClass::ALL.iter().map(|&c| format!("{:.2}", 100.0 * self.class_mean(c))));
        cols.push(format!("{:.2}", 100.0 * self.map));
        cols.join(",")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, json: &Path, csv: Option<&Path>, label: &str) -> Result<()> {
        std::fs::write(json, self.to_json()?)?;
        if let Some(csv) = csv {
            std::fs::write(csv, format!("{}\n{}\n", Self::csv_header(), self.csv_row(label)))?;
        }
        Ok(())
    }
}

/// AP over 3 classes × 3 thresholds.
pub fn map_metric<S: Scalar>(preds: &[Detection<S>], gts: &[GroundTruth<S>]) -> ApResult {
    let mut per_class = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut pr_curves = BTreeMap::new();
    let mut total = 0.0;
    for class in MapClass::ALL {
        let (mut aps, mut cs, mut prs) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
        for tau in THRESHOLDS {
            let c = ap_at_threshold(preds, gts, class.index(), tau);
            total += c.ap;
            aps.insert(tau_key(tau), c.ap);
            cs.insert(tau_key(tau), c.counts);
            prs.insert(tau_key(tau), c.pr);
        }
        per_class.insert(class.name().to_string(), aps);
        counts.insert(class.name().to_string(), cs);
        pr_curves.insert(class.name().to_string(), prs);
    }
    ApResult {
        per_class,
        map: total / (MapClass::ALL.len() * THRESHOLDS.len()) as f64,
        counts,
        pr_curves,
        config_hash: None,
    }
}
