//! Gradient-descent fitting of the weight triplet on frozen embeddings.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::composer::{compose, WeightTriplet};
use crate::embedding::Embedding;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::evaluator::{encode_captions, EvalInstance, Mode, PairOptions};
use crate::extractor::AttributeExtractor;

/// Default slope of the logit `scale · cos + shift`.
pub const LOGIT_SCALE: f64 = 100.0;

/// One (caption, region) pair with its binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSample {
    pub global: Embedding,
    pub attri: Embedding,
    pub skip: bool,
    pub region: Embedding,
    pub positive: bool,
}

/// How the constant logit offset is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogitShift {
    Fixed(f64),
    /// Fitted once at the initial triplet, then frozen.
    #[default]
    Calibrated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub init: WeightTriplet,
    pub seed: u64,
    pub l2: f64,
    pub logit_scale: f64,
    pub logit_shift: LogitShift,
    pub pair: PairOptions,
    /// Step halvings tried per epoch before giving up on that epoch.
    pub max_halvings: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            epochs: 200,
            init: WeightTriplet::IDENTITY,
            seed: 0,
            l2: 0.0,
            logit_scale: LOGIT_SCALE,
            logit_shift: LogitShift::default(),
            pair: PairOptions::default(),
            max_halvings: 40,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Fit(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Fit("epochs must be at least 1".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Fit(format!("l2 must be non-negative, got {}", self.l2)));
        }
        if !self.init.is_finite() {
            return Err(Error::Fit("initial triplet is not finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub logit_shift: f64,
    pub initial_loss: f64,
    /// Loss after each epoch.
    pub losses: Vec<f64>,
    /// Triplet after each epoch.
    pub triplets: Vec<WeightTriplet>,
    #[serde(rename = "final")]
    pub final_triplet: WeightTriplet,
}

impl FitTrace {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(self.initial_loss)
    }

    /// `epoch,loss,w_global,w_attri,bias`, one row per epoch.
    pub fn to_csv(&self, provenance: Option<&serde_json::Value>) -> String {
        let mut out = String::new();
        if let Some(p) = provenance {
            out.push_str(&format!("# provenance: {p}\n"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "loss", "w_global", "w_attri", "bias"])
            .expect("in-memory write");
        for (i, (loss, t)) in self.losses.iter().zip(&self.triplets).enumerate() {
            w.write_record([
                (i + 1).to_string(),
                format!("{loss:.12}"),
                format!("{:.12}", t.w_global),
                format!("{:.12}", t.w_attri),
                format!("{:.12}", t.bias),
            ])
            .expect("in-memory write");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"));
        out
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn text_embedding(s: &FitSample, t: &WeightTriplet) -> Embedding {
    compose(&s.global, &s.attri, t, s.skip).expect("sample embeddings share a dimension")
}

/// Cosine, taken as 0 when either vector has zero norm.
fn cosine(r: &Embedding, x: &Embedding) -> f64 {
    let denom = r.norm() * x.norm();
    if denom == 0.0 {
        0.0
    } else {
        r.dot(x) / denom
    }
}

fn logit(s: &FitSample, t: &WeightTriplet, obj: &Objective) -> f64 {
    obj.logit_scale * cosine(&s.region, &text_embedding(s, t)) + obj.logit_shift
}

fn bce(z: f64, positive: bool) -> f64 {
    if positive {
        softplus(-z)
    } else {
        softplus(z)
    }
}

/// Non-trainable parts of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub l2: f64,
    pub logit_scale: f64,
    /// Constant added to every logit.
    pub logit_shift: f64,
}

impl Default for Objective {
    fn default() -> Self {
        Self::new(0.0, LOGIT_SCALE, 0.0)
    }
}

impl Objective {
    pub fn new(l2: f64, logit_scale: f64, logit_shift: f64) -> Self {
        Self {
            l2,
            logit_scale,
            logit_shift,
        }
    }
}

fn l2_term(t: &WeightTriplet, l2: f64) -> f64 {
    l2 * (t.w_global * t.w_global + t.w_attri * t.w_attri + t.bias * t.bias)
}

/// Mean binary cross-entropy of `sigmoid(logit)` against the labels, plus
/// `l2 · ‖t‖²`.
pub fn fit_loss(t: &WeightTriplet, batch: &[FitSample], obj: &Objective) -> f64 {
    let sum: f64 = batch.iter().map(|s| bce(logit(s, t, obj), s.positive)).sum();
    sum / batch.len() as f64 + l2_term(t, obj.l2)
}

/// Analytic gradient of [`fit_loss`] with respect to `(w_global, w_attri, bias)`.
pub fn grad_triplet(t: &WeightTriplet, batch: &[FitSample], obj: &Objective) -> [f64; 3] {
    let l2 = obj.l2;
    let mut g = [0.0; 3];
    for s in batch {
        if s.skip {
            continue;
        }
        let x = text_embedding(s, t);
        let (nr, nx) = (s.region.norm(), x.norm());
        if nr == 0.0 || nx == 0.0 {
            continue;
        }
        let cos = s.region.dot(&x) / (nr * nx);
        let z = obj.logit_scale * cos + obj.logit_shift;
        let dz = sigmoid(z) - if s.positive { 1.0 } else { 0.0 };
        // d cos / d x = r / (|r||x|) - cos · x / |x|²
        let dcos = |v_dot_r: f64, v_dot_x: f64| v_dot_r / (nr * nx) - cos * v_dot_x / (nx * nx);
        let partials = [
            dcos(s.global.dot(&s.region), s.global.dot(&x)),
            dcos(s.attri.dot(&s.region), s.attri.dot(&x)),
            dcos(s.region.sum(), x.sum()),
        ];
        for (gi, p) in g.iter_mut().zip(partials) {
            *gi += dz * obj.logit_scale * p;
        }
    }
    let n = batch.len() as f64;
    let t = t.as_array();
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = g[i] / n + 2.0 * l2 * t[i];
    }
    out
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

/// Canonical sample order, so results do not depend on batch order.
fn canonical_order(batch: &mut [FitSample]) {
    batch.sort_by(|a, b| {
        a.positive
            .cmp(&b.positive)
            .then(a.skip.cmp(&b.skip))
            .then_with(|| lexicographic(a.region.values(), b.region.values()))
            .then_with(|| lexicographic(a.global.values(), b.global.values()))
            .then_with(|| lexicographic(a.attri.values(), b.attri.values()))
    });
}

/// Offset `c` minimizing the unregularized loss at `t`: the root of
/// `mean(sigmoid(z_i + c)) = fraction of positives`, found by bisection.
pub fn calibrate_shift(t: &WeightTriplet, batch: &[FitSample], logit_scale: f64) -> f64 {
    let unshifted = Objective::new(0.0, logit_scale, 0.0);
    let base: Vec<f64> = batch.iter().map(|s| logit(s, t, &unshifted)).collect();
    let target = batch.iter().filter(|s| s.positive).count() as f64 / batch.len() as f64;
    let mean_prob = |c: f64| base.iter().map(|z| sigmoid(z + c)).sum::<f64>() / base.len() as f64;
    let bound = 2.0 * logit_scale.abs() + 50.0;
    let (mut lo, mut hi) = (-bound, bound);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_prob(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Full-batch gradient descent from `cfg.init`.
///
/// A step is accepted only if it lowers the loss; otherwise the step size
/// is halved (and stays halved) until it does or `max_halvings` is reached.
pub fn fit_batch(batch: &[FitSample], cfg: &FitConfig) -> Result<FitTrace> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Fit("empty training batch".into()));
    }
    let positives = batch.iter().filter(|s| s.positive).count();
    if positives == 0 || positives == batch.len() {
        return Err(Error::Fit("training data must contain both positive and negative captions".into()));
    }
    let mut batch = batch.to_vec();
    canonical_order(&mut batch);

    let mut t = cfg.init;
    let obj = Objective::new(
        cfg.l2,
        cfg.logit_scale,
        match cfg.logit_shift {
            LogitShift::Fixed(c) => c,
            LogitShift::Calibrated => calibrate_shift(&t, &batch, cfg.logit_scale),
        },
    );
    let mut loss = fit_loss(&t, &batch, &obj);
    let initial_loss = loss;
    let mut lr = cfg.learning_rate;
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut triplets = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let g = grad_triplet(&t, &batch, &obj);
        for _ in 0..=cfg.max_halvings {
            let cur = t.as_array();
            let candidate = WeightTriplet::from_array([cur[0] - lr * g[0], cur[1] - lr * g[1], cur[2] - lr * g[2]]);
            let candidate_loss = fit_loss(&candidate, &batch, &obj);
            if candidate.is_finite() && candidate_loss < loss {
                t = candidate;
                loss = candidate_loss;
                break;
            }
            lr /= 2.0;
        }
        losses.push(loss);
        triplets.push(t);
    }
    log::debug!("fit: loss {initial_loss:.6} -> {loss:.6}, final step {lr:e}");
    Ok(FitTrace {
        logit_shift: obj.logit_shift,
        initial_loss,
        losses,
        triplets,
        final_triplet: t,
    })
}

/// Training pairs from the ground-truth proposal of every object: the
/// positive caption is labelled 1 and each negative 0.
pub fn build_batch(
    instances: &[EvalInstance],
    enc: &Encoder,
    extractor: &dyn AttributeExtractor,
    opts: PairOptions,
    seed: u64,
) -> Result<Vec<FitSample>> {
    let pairs = encode_captions(instances, enc, extractor, Mode::HaFgovd, opts, seed)?;
    let mut batch = Vec::new();
    for inst in instances {
        for obj in &inst.objects {
            for (i, caption) in obj.record.captions.vocabulary().enumerate() {
                let pair = &pairs[caption];
                batch.push(FitSample {
                    global: pair.global.clone(),
                    attri: pair.attri.clone(),
                    skip: pair.skip,
                    region: obj.region_feature.clone(),
                    positive: i == 0,
                });
            }
        }
    }
    Ok(batch)
}

/// Precomputes embeddings once and fits the triplet.
pub fn fit(
    instances: &[EvalInstance],
    enc: &Encoder,
    extractor: &dyn AttributeExtractor,
    cfg: &FitConfig,
) -> Result<FitTrace> {
    cfg.validate()?;
    let batch = build_batch(instances, enc, extractor, cfg.pair, cfg.seed)?;
    fit_batch(&batch, cfg)
}
