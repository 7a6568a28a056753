//! Detection geometry and the dynamic-vocabulary mAP protocol.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};

/// Axis-aligned box `(x1, y1, x2, y2)` with `x2 > x1`, `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_well_formed(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Cosine similarity mapped to `[0, 1]` as `(1 + cos) / 2`.
pub fn score(region_feature: &Embedding, text_embedding: &Embedding) -> Result<f64> {
    if region_feature.dim() != text_embedding.dim() {
        return Err(Error::Metric(format!(
            "score dimension mismatch: {} vs {}",
            region_feature.dim(),
            text_embedding.dim()
        )));
    }
    let denom = region_feature.norm() * text_embedding.norm();
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Metric("score of a zero-norm vector".into()));
    }
    let cos = (region_feature.dot(text_embedding) / denom).clamp(-1.0, 1.0);
    Ok((1.0 + cos) / 2.0)
}

/// One scored box for one caption of an object's vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionBox {
    pub bbox: BBox,
    pub score: f64,
    /// 0 is the positive caption, `1..=N` the negatives.
    pub caption_index: usize,
}

/// Descending score, then lower caption index, then input order.
fn ranking(preds: &[PredictionBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .partial_cmp(&preds[a].score)
            .unwrap_or(Ordering::Equal)
            .then(preds[a].caption_index.cmp(&preds[b].caption_index))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy NMS that ignores caption labels: a box is dropped when its IoU
/// with any already kept box reaches `iou_thr`.
pub fn class_agnostic_nms(preds: &[PredictionBox], iou_thr: f64) -> Vec<PredictionBox> {
    let mut kept: Vec<PredictionBox> = Vec::new();
    for i in ranking(preds) {
        let candidate = preds[i];
        if kept.iter().all(|k| iou(&k.bbox, &candidate.bbox) < iou_thr) {
            kept.push(candidate);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// COCO-style interpolated precision at `n` evenly spaced recall points.
    Points(usize),
    /// Area under the precision envelope at every recall change.
    Continuous,
}

impl Default for Interpolation {
    fn default() -> Self {
        Interpolation::Points(101)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApConfig {
    pub iou_thr: f64,
    pub interpolation: Interpolation,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self {
            iou_thr: 0.5,
            interpolation: Interpolation::default(),
        }
    }
}

/// TP/FP flags of `preds` in ranking order, and the number of ground truths.
///
/// A prediction is a true positive iff it carries the positive caption and
/// reaches `iou_thr` with a still unmatched ground truth; it takes the
/// unmatched ground truth of highest IoU.
pub fn match_predictions(preds: &[PredictionBox], gts: &[BBox], iou_thr: f64) -> Vec<bool> {
    let mut matched = vec![false; gts.len()];
    ranking(preds)
        .into_iter()
        .map(|i| {
            let p = &preds[i];
            if p.caption_index != 0 {
                return false;
            }
            let best = gts
                .iter()
                .enumerate()
                .filter(|(g, _)| !matched[*g])
                .map(|(g, gt)| (g, iou(&p.bbox, gt)))
                .filter(|(_, v)| *v >= iou_thr)
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(b.0.cmp(&a.0)));
            match best {
                Some((g, _)) => {
                    matched[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Totals over the whole prediction list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrCounts {
    pub tp: usize,
    pub fp: usize,
    pub num_gt: usize,
}

impl PrCounts {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.num_gt == 0 {
            0.0
        } else {
            self.tp as f64 / self.num_gt as f64
        }
    }
}

pub fn precision_recall(preds: &[PredictionBox], gts: &[BBox], iou_thr: f64) -> PrCounts {
    let flags = match_predictions(preds, gts, iou_thr);
    let tp = flags.iter().filter(|&&f| f).count();
    PrCounts {
        tp,
        fp: flags.len() - tp,
        num_gt: gts.len(),
    }
}

/// Average precision of one instance. `gts` must be non-empty.
pub fn average_precision(preds: &[PredictionBox], gts: &[BBox], cfg: &ApConfig) -> f64 {
    let num_gt = gts.len();
    debug_assert!(num_gt > 0);
    let flags = match_predictions(preds, gts, cfg.iou_thr);

    // (tp, precision) after each prediction
    let mut tp = 0usize;
    let curve: Vec<(usize, f64)> = flags
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            tp += usize::from(hit);
            (tp, tp as f64 / (k + 1) as f64)
        })
        .collect();

    // precision envelope: best precision at this or any later point
    let mut envelope = vec![0.0; curve.len()];
    let mut best: f64 = 0.0;
    for k in (0..curve.len()).rev() {
        best = best.max(curve[k].1);
        envelope[k] = best;
    }

    match cfg.interpolation {
        Interpolation::Points(n) => {
            let n = n.max(1);
            let mut total = 0.0;
            let mut k = 0;
            for step in 0..n {
                // recall threshold step/(n-1); compare tp/num_gt >= step/(n-1) exactly
                let (num, den) = if n == 1 { (0, 1) } else { (step, n - 1) };
                while k < curve.len() && curve[k].0 * den < num * num_gt {
                    k += 1;
                }
                if k < curve.len() {
                    total += envelope[k];
                }
            }
            total / n as f64
        }
        Interpolation::Continuous => {
            let mut area = 0.0;
            let mut prev_tp = 0;
            for (k, &(t, _)) in curve.iter().enumerate() {
                if t > prev_tp {
                    area += (t - prev_tp) as f64 / num_gt as f64 * envelope[k];
                    prev_tp = t;
                }
            }
            area
        }
    }
}

/// Mean of per-instance AP over instances that have ground truth.
pub fn compute_map(preds: &[Vec<PredictionBox>], gts: &[Vec<BBox>], cfg: &ApConfig) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Metric(format!(
            "{} prediction lists for {} ground-truth lists",
            preds.len(),
            gts.len()
        )));
    }
    if !(cfg.iou_thr > 0.0 && cfg.iou_thr < 1.0) {
        return Err(Error::Metric(format!("IoU threshold {} outside (0, 1)", cfg.iou_thr)));
    }
    let aps: Vec<f64> = preds
        .iter()
        .zip(gts)
        .filter(|(_, g)| !g.is_empty())
        .map(|(p, g)| average_precision(p, g, cfg))
        .collect();
    if aps.is_empty() {
        return Err(Error::Metric("no ground truth in any instance; mAP is undefined".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}
