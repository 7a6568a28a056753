//! Synthetic benchmark and the dynamic-vocabulary evaluation protocol.

pub mod dataset;
pub mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composer::{compose, WeightTriplet};
use crate::embedding::Embedding;
use crate::encoder::{AttributeMaskOptions, DegenerateRows, EncodedPair, Encoder};
use crate::error::{Error, Result};
use crate::extractor::AttributeExtractor;
use crate::seed::{fnv1a, substream};
use crate::tokenizer::{match_positions_with, tokenize, AttributePositions, MatchOptions, TokenKind, TokenSequence};

pub use dataset::{EvalInstance, Subset, SyntheticObject};
pub use metrics::{
    average_precision, class_agnostic_nms, compute_map, iou, precision_recall, score, ApConfig, BBox,
    Interpolation, PrCounts, PredictionBox,
};

/// How caption embeddings are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Global embedding only.
    #[default]
    Baseline,
    /// Composition of global and attribute-specific embeddings.
    HaFgovd,
    /// As `HaFgovd`, with the start and end tokens removed from Φ.
    MaskSpecials,
    /// As `HaFgovd`, with Φ's text positions replaced by a random subset.
    MaskRandom,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::HaFgovd, Mode::MaskSpecials, Mode::MaskRandom];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::HaFgovd => "ha-fgovd",
            Mode::MaskSpecials => "mask-specials",
            Mode::MaskRandom => "mask-random",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim().to_ascii_lowercase().replace('_', "-");
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected baseline, ha-fgovd, mask-specials or mask-random)"))
    }
}

/// How Φ is matched and turned into the attribute mask.
///
/// By default bidirectional PAD positions are left out of Φ: with the key
/// restriction they would otherwise outnumber the attribute tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairOptions {
    pub matching: MatchOptions,
    pub mask: AttributeMaskOptions,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self {
            matching: MatchOptions {
                bidirectional_pads: false,
                causal_specials: true,
            },
            mask: AttributeMaskOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mode: Mode,
    pub triplet: WeightTriplet,
    pub ap: ApConfig,
    pub nms_iou: f64,
    pub pair: PairOptions,
    /// Seed of the `mask-random` substream.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Baseline,
            triplet: WeightTriplet::IDENTITY,
            ap: ApConfig::default(),
            nms_iou: 0.5,
            pair: PairOptions::default(),
            seed: 0,
        }
    }
}

/// Φ for `seq` under `mode`, before the skip check.
pub fn mode_positions(seq: &TokenSequence, phi: AttributePositions, mode: Mode, seed: u64, caption: &str) -> AttributePositions {
    match mode {
        Mode::Baseline | Mode::HaFgovd => phi,
        Mode::MaskSpecials => {
            let kinds = seq.kinds();
            phi.without(|i| matches!(kinds[i], TokenKind::Start | TokenKind::End))
        }
        Mode::MaskRandom => {
            if !phi.has_text(seq) {
                return phi;
            }
            let mut rng = substream(seed, "mask-random", fnv1a(caption.as_bytes()));
            let l = seq.text_len();
            let k = rng.random_range(1..=l);
            let chosen: Vec<usize> = sample(&mut rng, l, k).into_iter().map(|i| i + 1).collect();
            let kinds = seq.kinds();
            let rest = phi.without(|i| kinds[i] == TokenKind::Text);
            rest.union(&AttributePositions::new(chosen, phi.source_words().to_vec()))
        }
    }
}

/// Global/attribute embedding pair of one caption under `mode`.
pub fn caption_pair(
    enc: &Encoder,
    extractor: &dyn AttributeExtractor,
    caption: &str,
    mode: Mode,
    opts: PairOptions,
    seed: u64,
) -> Result<EncodedPair> {
    let seq = tokenize(caption, enc.config().seq_len, enc.flavor())?;
    if mode == Mode::Baseline {
        let global = enc.encode_default(&seq)?;
        return Ok(EncodedPair {
            attri: global.clone(),
            global,
            skip: true,
        });
    }
    let attrs = extractor.extract(caption)?;
    let phi = match_positions_with(&seq, attrs.words(), enc.flavor(), opts.matching);
    let phi = mode_positions(&seq, phi, mode, seed, caption);
    let mut mask = opts.mask;
    if mode == Mode::MaskSpecials {
        mask.degenerate = DegenerateRows::SelfAttend;
    }
    Ok(enc.encode_pair(&seq, &phi, mask)?)
}

/// Every distinct caption of the given instances, in sorted order.
pub fn unique_captions(instances: &[EvalInstance]) -> Vec<String> {
    let set: BTreeSet<&str> = instances
        .iter()
        .flat_map(|inst| inst.objects.iter())
        .flat_map(|o| o.record.captions.vocabulary())
        .collect();
    set.into_iter().map(str::to_string).collect()
}

/// Embedding pairs for every distinct caption, computed in parallel.
pub fn encode_captions(
    instances: &[EvalInstance],
    enc: &Encoder,
    extractor: &dyn AttributeExtractor,
    mode: Mode,
    opts: PairOptions,
    seed: u64,
) -> Result<BTreeMap<String, EncodedPair>> {
    unique_captions(instances)
        .into_par_iter()
        .map(|c| {
            let pair = caption_pair(enc, extractor, &c, mode, opts, seed)?;
            Ok((c, pair))
        })
        .collect()
}

/// Class-agnostic-NMS-filtered predictions of one instance.
pub fn instance_predictions(
    instance: &EvalInstance,
    text: &BTreeMap<String, Embedding>,
    nms_iou: f64,
) -> Result<Vec<PredictionBox>> {
    let mut preds = Vec::new();
    for obj in &instance.objects {
        for proposal in &obj.proposals {
            for (caption_index, caption) in obj.record.captions.vocabulary().enumerate() {
                let emb = text
                    .get(caption)
                    .ok_or_else(|| Error::Dataset(format!("no embedding for caption `{caption}`")))?;
                preds.push(PredictionBox {
                    bbox: proposal.bbox,
                    score: score(&proposal.feature, emb)?,
                    caption_index,
                });
            }
        }
    }
    Ok(class_agnostic_nms(&preds, nms_iou))
}

/// Per-subset mAP of one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub map: BTreeMap<Subset, f64>,
}

impl EvalReport {
    /// Arithmetic mean over the subsets present.
    pub fn average(&self) -> f64 {
        if self.map.is_empty() {
            return f64::NAN;
        }
        self.map.values().sum::<f64>() / self.map.len() as f64
    }

    pub fn get(&self, subset: Subset) -> Option<f64> {
        self.map.get(&subset).copied()
    }

    /// `subset,mode,mAP` rows plus an `average` row, preceded by a
    /// `# provenance:` comment when given.
    pub fn to_csv(&self, provenance: Option<&serde_json::Value>) -> String {
        reports_to_csv(std::slice::from_ref(self), provenance)
    }
}

pub fn reports_to_csv(reports: &[EvalReport], provenance: Option<&serde_json::Value>) -> String {
    let mut out = String::new();
    if let Some(p) = provenance {
        out.push_str(&format!("# provenance: {p}\n"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["subset", "mode", "mAP"]).expect("in-memory write");
    for r in reports {
        for (subset, v) in &r.map {
            w.write_record([subset.name(), r.mode.name(), &format!("{v:.6}")])
                .expect("in-memory write");
        }
        w.write_record(["average", r.mode.name(), &format!("{:.6}", r.average())])
            .expect("in-memory write");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"));
    out
}

/// Parses report CSV text; `#` lines and `average` rows are skipped.
pub fn reports_from_csv(text: &str) -> Result<Vec<EvalReport>> {
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let mut by_mode: BTreeMap<Mode, BTreeMap<Subset, f64>> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Dataset(format!("report csv: {e}")))?;
        if row.len() != 3 {
            return Err(Error::Dataset(format!("report csv: expected 3 columns, got {}", row.len())));
        }
        let mode: Mode = row[1].parse().map_err(Error::Dataset)?;
        let entry = by_mode.entry(mode).or_default();
        if row[0].eq_ignore_ascii_case("average") {
            continue;
        }
        let subset: Subset = row[0].parse()?;
        let value: f64 = row[2]
            .parse()
            .map_err(|e| Error::Dataset(format!("report csv: mAP `{}`: {e}", &row[2])))?;
        entry.insert(subset, value);
    }
    Ok(by_mode.into_iter().map(|(mode, map)| EvalReport { mode, map }).collect())
}

/// Markdown table with one row per report, subset columns in table order
/// and a final Average column; values are mAP × 100 with one decimal.
pub fn markdown_table(reports: &[EvalReport]) -> String {
    let subsets: BTreeSet<Subset> = reports.iter().flat_map(|r| r.map.keys().copied()).collect();
    let mut out = String::from("| Mode |");
    for s in &subsets {
        out.push_str(&format!(" {} |", s.title()));
    }
    out.push_str(" Average |\n|---|");
    for _ in 0..=subsets.len() {
        out.push_str("---:|");
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("| {} |", r.mode));
        for s in &subsets {
            match r.get(*s) {
                Some(v) => out.push_str(&format!(" {:.1} |", 100.0 * v)),
                None => out.push_str(" - |"),
            }
        }
        out.push_str(&format!(" {:.1} |\n", 100.0 * r.average()));
    }
    out
}

/// Final text embeddings of every caption under `cfg`.
pub fn text_embeddings(
    instances: &[EvalInstance],
    enc: &Encoder,
    extractor: &dyn AttributeExtractor,
    cfg: &EvalConfig,
) -> Result<BTreeMap<String, Embedding>> {
    let pairs = encode_captions(instances, enc, extractor, cfg.mode, cfg.pair, cfg.seed)?;
    pairs
        .into_iter()
        .map(|(c, p)| {
            let emb = if cfg.mode == Mode::Baseline {
                p.global
            } else {
                compose(&p.global, &p.attri, &cfg.triplet, p.skip)?
            };
            Ok((c, emb))
        })
        .collect()
}

/// Scores every (proposal, caption) pair, applies class-agnostic NMS per
/// image, and reports mAP per subset.
pub fn evaluate(
    instances: &[EvalInstance],
    enc: &Encoder,
    extractor: &dyn AttributeExtractor,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    if !(cfg.nms_iou > 0.0 && cfg.nms_iou < 1.0) {
        return Err(Error::Metric(format!("NMS threshold {} outside (0, 1)", cfg.nms_iou)));
    }
    let text = text_embeddings(instances, enc, extractor, cfg)?;
    let preds: Vec<Vec<PredictionBox>> = instances
        .par_iter()
        .map(|inst| instance_predictions(inst, &text, cfg.nms_iou))
        .collect::<Result<_>>()?;

    type Group = (Vec<Vec<PredictionBox>>, Vec<Vec<BBox>>);
    let mut grouped: BTreeMap<Subset, Group> = BTreeMap::new();
    for (inst, p) in instances.iter().zip(preds) {
        let entry = grouped.entry(inst.subset).or_default();
        entry.0.push(p);
        entry.1.push(inst.ground_truth());
    }
    let map = grouped
        .into_iter()
        .map(|(subset, (p, g))| Ok((subset, compute_map(&p, &g, &cfg.ap)?)))
        .collect::<Result<_>>()?;
    Ok(EvalReport { mode: cfg.mode, map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::extractor::RuleBasedExtractor;
    use crate::tokenizer::{match_positions, Flavor};
    use dataset::{generate_dataset, NoiseConfig};

    fn encoder(flavor: Flavor) -> Encoder {
        Encoder::new(EncoderConfig::with_flavor(flavor, 7)).unwrap()
    }

    #[test]
    fn identity_triplet_matches_baseline() {
        for flavor in [Flavor::Bidirectional, Flavor::Causal] {
            let enc = encoder(flavor);
            let data = generate_dataset(Subset::Hard, 12, 1, &enc, &NoiseConfig::default()).unwrap();
            let ext = RuleBasedExtractor::default();
            let base = evaluate(&data, &enc, &ext, &EvalConfig::default()).unwrap();
            let ha = evaluate(
                &data,
                &enc,
                &ext,
                &EvalConfig {
                    mode: Mode::HaFgovd,
                    ..EvalConfig::default()
                },
            )
            .unwrap();
            assert_eq!(base.map, ha.map);
        }
    }

    #[test]
    fn mask_random_keeps_specials_and_is_seeded() {
        let seq = tokenize("a dark brown wooden chair", 16, Flavor::Causal).unwrap();
        let phi = match_positions(&seq, &["dark", "brown", "wooden"], Flavor::Causal);
        let a = mode_positions(&seq, phi.clone(), Mode::MaskRandom, 3, "c");
        let b = mode_positions(&seq, phi.clone(), Mode::MaskRandom, 3, "c");
        assert_eq!(a, b);
        assert!(a.contains(0) && a.contains(seq.end_index()));
        assert!(a.has_text(&seq));
        let specials = mode_positions(&seq, phi, Mode::MaskSpecials, 3, "c");
        assert!(!specials.contains(0) && !specials.contains(seq.end_index()));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("oracle".parse::<Mode>().is_err());
    }

    #[test]
    fn csv_round_trip_and_markdown() {
        let report = EvalReport {
            mode: Mode::HaFgovd,
            map: [(Subset::Hard, 0.5), (Subset::Color, 0.25)].into_iter().collect(),
        };
        assert_eq!(report.average(), 0.375);
        let csv = report.to_csv(Some(&serde_json::json!({"seed": 1})));
        assert!(csv.starts_with("# provenance:"));
        assert_eq!(reports_from_csv(&csv).unwrap(), vec![report.clone()]);
        let md = markdown_table(&[report]);
        assert!(md.contains("| Hard | Color | Average |"));
        assert!(md.contains("| ha-fgovd | 50.0 | 25.0 | 37.5 |"));
    }
}
