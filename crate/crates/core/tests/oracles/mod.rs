//! Independent reference implementations used by the integration tests and
//! the acceptance suite. Nothing here calls into the code under test except
//! for plain data types.
#![allow(dead_code)]

use fgovd_core::evaluator::{BBox, PredictionBox};
use fgovd_core::mask::RestrictAxis;

/// Bit `i` of `bits` as a 0/1 indicator.
pub fn bit(bits: u32, i: usize) -> bool {
    bits >> i & 1 == 1
}

/// Bidirectional default mask, one entry at a time.
pub fn bert_default_open(psi: u32, i: usize, j: usize) -> bool {
    if bit(psi, i) && bit(psi, j) {
        true
    } else {
        i == j && !bit(psi, i)
    }
}

/// Bidirectional attribute mask, one entry at a time.
pub fn bert_attribute_open(theta: u32, psi: u32, axis: RestrictAxis, i: usize, j: usize) -> bool {
    let restricted = match axis {
        RestrictAxis::Queries => bit(theta, i) && bit(psi, j),
        RestrictAxis::Keys => bit(psi, i) && bit(theta, j),
    };
    if restricted {
        return true;
    }
    i == j && !bit(psi, i)
}

pub fn clip_default_open(i: usize, j: usize) -> bool {
    j <= i
}

pub fn clip_attribute_open(phi: u32, i: usize, j: usize) -> bool {
    j <= i && bit(phi, j)
}

/// Largest number of positive-caption predictions in `preds` that can be
/// paired one-to-one with ground truths at IoU ≥ `thr`, by trying every
/// assignment.
pub fn max_true_positives(preds: &[&PredictionBox], gts: &[BBox], thr: f64) -> usize {
    fn go(preds: &[&PredictionBox], gts: &[BBox], used: &mut Vec<bool>, thr: f64) -> usize {
        let Some((first, rest)) = preds.split_first() else {
            return 0;
        };
        let mut best = go(rest, gts, used, thr);
        if first.caption_index == 0 {
            for g in 0..gts.len() {
                if !used[g] && plain_iou(&first.bbox, &gts[g]) >= thr {
                    used[g] = true;
                    best = best.max(1 + go(rest, gts, used, thr));
                    used[g] = false;
                }
            }
        }
        best
    }
    go(preds, gts, &mut vec![false; gts.len()], thr)
}

pub fn plain_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// 101-point interpolated AP by enumerating every score cut-off.
///
/// Scores must be distinct. At each cut-off the true-positive count is the
/// best achievable over all matchings, which equals greedy matching when no
/// prediction reaches the threshold with two ground truths.
pub fn brute_force_ap(preds: &[PredictionBox], gts: &[BBox], thr: f64) -> f64 {
    let mut ranked: Vec<&PredictionBox> = preds.iter().collect();
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let points: Vec<(usize, f64)> = (1..=ranked.len())
        .map(|k| {
            let tp = max_true_positives(&ranked[..k], gts, thr);
            (tp, tp as f64 / k as f64)
        })
        .collect();
    let total: f64 = (0..=100)
        .map(|r| {
            points
                .iter()
                .filter(|(tp, _)| tp * 100 >= r * gts.len())
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    total / 101.0
}

pub fn brute_force_map(preds: &[Vec<PredictionBox>], gts: &[Vec<BBox>], thr: f64) -> f64 {
    let aps: Vec<f64> = preds
        .iter()
        .zip(gts)
        .filter(|(_, g)| !g.is_empty())
        .map(|(p, g)| brute_force_ap(p, g, thr))
        .collect();
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// Ground truths in separate cells of a 3×1 grid, so no box can reach
/// IoU ≥ 0.5 with two of them, plus up to five predictions that are either
/// jittered copies of a ground truth or random boxes.
pub fn random_instance(rng: &mut impl rand::Rng) -> (Vec<PredictionBox>, Vec<BBox>) {
    let n_gt = rng.random_range(1..=3);
    let gts: Vec<BBox> = (0..n_gt)
        .map(|c| {
            let x0 = 100.0 * c as f64;
            let x1 = x0 + rng.random_range(0.0..20.0);
            let y1 = rng.random_range(0.0..20.0);
            BBox::new(x1, y1, x1 + rng.random_range(40.0..70.0), y1 + rng.random_range(40.0..70.0))
        })
        .collect();
    let n_pred = rng.random_range(0..=5);
    let preds = (0..n_pred)
        .map(|_| {
            let bbox = if rng.random_bool(0.7) {
                let g = gts[rng.random_range(0..gts.len())];
                let d: [f64; 4] = std::array::from_fn(|_| rng.random_range(-12.0..12.0));
                BBox::new(g.x1 + d[0], g.y1 + d[1], g.x2 + d[2], g.y2 + d[3])
            } else {
                let x1 = rng.random_range(0.0..260.0);
                let y1 = rng.random_range(0.0..60.0);
                BBox::new(x1, y1, x1 + rng.random_range(10.0..80.0), y1 + rng.random_range(10.0..80.0))
            };
            PredictionBox {
                bbox,
                score: rng.random_range(0.0..1.0),
                caption_index: if rng.random_bool(0.6) { 0 } else { rng.random_range(1..=5) },
            }
        })
        .collect();
    (preds, gts)
}
