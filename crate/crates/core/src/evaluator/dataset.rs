//! Synthetic fine-grained detection benchmark.
//!
//! Captions follow the template `a {attributes...} {category}` with the
//! attributes in a fixed type order. Negatives are built per subset:
//! Hard/Medium/Easy swap 1/2/3 attribute values, Trivial borrows captions of
//! unrelated objects, and the four attribute subsets swap the value of the
//! named attribute type.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::evaluator::metrics::{iou, BBox};
use crate::extractor::AttributeType;
use crate::seed::substream;
use crate::tokenizer::{tokenize, Flavor};

const DEFAULT_POOLS: &str = include_str!("../../data/pools.tsv");

/// Caption order of attribute types.
const CAPTION_ORDER: [AttributeType; 4] = [
    AttributeType::Transparency,
    AttributeType::Pattern,
    AttributeType::Color,
    AttributeType::Material,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Hard,
    Medium,
    Easy,
    Trivial,
    Color,
    Material,
    Pattern,
    Transparency,
}

impl Subset {
    /// Reporting order.
    pub const ALL: [Subset; 8] = [
        Subset::Hard,
        Subset::Medium,
        Subset::Easy,
        Subset::Trivial,
        Subset::Color,
        Subset::Material,
        Subset::Pattern,
        Subset::Transparency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Hard => "hard",
            Subset::Medium => "medium",
            Subset::Easy => "easy",
            Subset::Trivial => "trivial",
            Subset::Color => "color",
            Subset::Material => "material",
            Subset::Pattern => "pattern",
            Subset::Transparency => "transparency",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Subset::Hard => "Hard",
            Subset::Medium => "Medium",
            Subset::Easy => "Easy",
            Subset::Trivial => "Trivial",
            Subset::Color => "Color",
            Subset::Material => "Material",
            Subset::Pattern => "Pattern",
            Subset::Transparency => "Transparency",
        }
    }

    pub fn is_difficulty_based(self) -> bool {
        matches!(self, Subset::Hard | Subset::Medium | Subset::Easy | Subset::Trivial)
    }

    /// N: 5 for difficulty-based subsets, 2 for attribute-based ones.
    pub fn n_negatives(self) -> usize {
        if self.is_difficulty_based() {
            5
        } else {
            2
        }
    }

    /// Attribute values replaced per negative, for the replacement subsets.
    pub fn replacements(self) -> Option<usize> {
        match self {
            Subset::Hard => Some(1),
            Subset::Medium => Some(2),
            Subset::Easy => Some(3),
            Subset::Trivial => None,
            _ => Some(1),
        }
    }

    pub fn attribute_type(self) -> Option<AttributeType> {
        match self {
            Subset::Color => Some(AttributeType::Color),
            Subset::Material => Some(AttributeType::Material),
            Subset::Pattern => Some(AttributeType::Pattern),
            Subset::Transparency => Some(AttributeType::Transparency),
            _ => None,
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subset::ALL
            .into_iter()
            .find(|sub| sub.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownSubset(s.to_string()))
    }
}

/// Attribute values per type and object categories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordPools {
    pub attributes: BTreeMap<AttributeType, Vec<String>>,
    pub categories: Vec<String>,
}

impl WordPools {
    /// Parses `type<TAB>value` lines, where type is an attribute type or `category`.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut attributes: BTreeMap<AttributeType, Vec<String>> = BTreeMap::new();
        let mut categories = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (ty, value) = line
                .split_once('\t')
                .ok_or_else(|| Error::Dataset(format!("pools line {}: expected `type<TAB>value`", n + 1)))?;
            let value = value.trim().to_ascii_lowercase();
            if ty == "category" {
                categories.push(value);
            } else {
                let ty: AttributeType = ty
                    .parse()
                    .map_err(|e| Error::Dataset(format!("pools line {}: {e}", n + 1)))?;
                attributes.entry(ty).or_default().push(value);
            }
        }
        for ty in AttributeType::ALL {
            if attributes.get(&ty).map_or(0, Vec::len) < 3 {
                return Err(Error::Dataset(format!("pool for {ty} needs at least 3 values")));
            }
        }
        if categories.len() < 7 {
            return Err(Error::Dataset("need at least 7 categories".into()));
        }
        Ok(Self { attributes, categories })
    }

    fn values(&self, ty: AttributeType) -> &[String] {
        &self.attributes[&ty]
    }
}

impl Default for WordPools {
    fn default() -> Self {
        Self::from_tsv(DEFAULT_POOLS).expect("bundled pools are well-formed")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeValue {
    #[serde(rename = "type")]
    pub kind: AttributeType,
    pub word: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Captions {
    pub pos: String,
    pub neg: Vec<String>,
}

impl Captions {
    /// Positive first, then negatives; index matches `caption_index`.
    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.pos.as_str()).chain(self.neg.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub category: String,
    pub attributes: Vec<AttributeValue>,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub captions: Captions,
}

/// One image: serializable part of an evaluation instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: u64,
    pub subset: Subset,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub max_objects: usize,
    pub canvas_width: f64,
    pub canvas_height: f64,
    pub min_box: f64,
    pub max_box: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            max_objects: 3,
            canvas_width: 640.0,
            canvas_height: 480.0,
            min_box: 40.0,
            max_box: 200.0,
        }
    }
}

fn caption(category: &str, attributes: &[AttributeValue]) -> String {
    let mut words = vec!["a".to_string()];
    for ty in CAPTION_ORDER {
        words.extend(attributes.iter().filter(|a| a.kind == ty).map(|a| a.word.clone()));
    }
    words.push(category.to_string());
    words.join(" ")
}

fn sample_attributes(
    rng: &mut ChaCha8Rng,
    pools: &WordPools,
    required: Option<AttributeType>,
    count: usize,
) -> Vec<AttributeValue> {
    let mut types: Vec<AttributeType> = AttributeType::ALL
        .into_iter()
        .filter(|t| Some(*t) != required)
        .collect();
    types.shuffle(rng);
    let mut chosen: Vec<AttributeType> = required.into_iter().collect();
    chosen.extend(types.into_iter().take(count - chosen.len()));
    chosen
        .into_iter()
        .map(|kind| AttributeValue {
            kind,
            word: pools.values(kind).choose(rng).expect("non-empty pool").clone(),
        })
        .collect()
}

fn replace_values(
    rng: &mut ChaCha8Rng,
    pools: &WordPools,
    attributes: &[AttributeValue],
    kinds: &[AttributeType],
) -> Vec<AttributeValue> {
    attributes
        .iter()
        .map(|a| {
            if kinds.contains(&a.kind) {
                let others: Vec<&String> = pools.values(a.kind).iter().filter(|w| **w != a.word).collect();
                AttributeValue {
                    kind: a.kind,
                    word: (*others.choose(rng).expect("pool has alternatives")).clone(),
                }
            } else {
                a.clone()
            }
        })
        .collect()
}

fn sample_box(rng: &mut ChaCha8Rng, cfg: &GenConfig, taken: &[BBox]) -> BBox {
    let mut candidate = BBox::new(0.0, 0.0, cfg.min_box, cfg.min_box);
    for _ in 0..1000 {
        let w = rng.random_range(cfg.min_box..=cfg.max_box).min(cfg.canvas_width);
        let h = rng.random_range(cfg.min_box..=cfg.max_box).min(cfg.canvas_height);
        let x1 = rng.random_range(0.0..=cfg.canvas_width - w);
        let y1 = rng.random_range(0.0..=cfg.canvas_height - h);
        candidate = BBox::new(x1.round(), y1.round(), (x1 + w).round(), (y1 + h).round());
        if taken.iter().all(|t| t.intersection(&candidate) == 0.0) {
            break;
        }
    }
    candidate
}

fn negatives(
    rng: &mut ChaCha8Rng,
    pools: &WordPools,
    subset: Subset,
    category: &str,
    attributes: &[AttributeValue],
    pos: &str,
) -> Result<Vec<String>> {
    let n = subset.n_negatives();
    let mut out: Vec<String> = Vec::with_capacity(n);
    for _ in 0..10_000 {
        if out.len() == n {
            break;
        }
        let candidate = match (subset, subset.attribute_type(), subset.replacements()) {
            (Subset::Trivial, _, _) => {
                let other: Vec<&String> = pools.categories.iter().filter(|c| *c != category).collect();
                let other_category = (*other.choose(rng).expect("categories")).clone();
                let count = rng.random_range(1..=AttributeType::ALL.len());
                caption(&other_category, &sample_attributes(rng, pools, None, count))
            }
            (_, Some(kind), _) => caption(category, &replace_values(rng, pools, attributes, &[kind])),
            (_, None, Some(r)) => {
                let mut kinds: Vec<AttributeType> = attributes.iter().map(|a| a.kind).collect();
                kinds.shuffle(rng);
                kinds.truncate(r);
                caption(category, &replace_values(rng, pools, attributes, &kinds))
            }
            (_, None, None) => unreachable!("every subset has a construction rule"),
        };
        if candidate != pos && !out.contains(&candidate) {
            out.push(candidate);
        }
    }
    if out.len() < n {
        return Err(Error::Dataset(format!("could not build {n} distinct negatives for `{pos}`")));
    }
    Ok(out)
}

/// Text-only records for `n_instances` images of `subset`.
pub fn generate_records(
    subset: Subset,
    n_instances: usize,
    seed: u64,
    pools: &WordPools,
    cfg: &GenConfig,
) -> Result<Vec<InstanceRecord>> {
    (0..n_instances as u64)
        .map(|id| {
            let mut rng = substream(seed, &format!("dataset/{subset}"), id);
            let n_objects = rng.random_range(1..=cfg.max_objects.max(1));
            let mut boxes = Vec::with_capacity(n_objects);
            let mut objects = Vec::with_capacity(n_objects);
            for _ in 0..n_objects {
                let category = pools.categories.choose(&mut rng).expect("categories").clone();
                let count = match subset {
                    Subset::Hard | Subset::Medium | Subset::Easy => rng.random_range(3..=4),
                    Subset::Trivial => rng.random_range(1..=4),
                    _ => rng.random_range(1..=3),
                };
                let attributes = sample_attributes(&mut rng, pools, subset.attribute_type(), count);
                let pos = caption(&category, &attributes);
                let neg = negatives(&mut rng, pools, subset, &category, &attributes, &pos)?;
                let bbox = sample_box(&mut rng, cfg, &boxes);
                boxes.push(bbox);
                objects.push(ObjectRecord {
                    category,
                    attributes,
                    bbox,
                    captions: Captions { pos, neg },
                });
            }
            Ok(InstanceRecord { id, subset, objects })
        })
        .collect()
}

/// Region-feature and proposal settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Noise norm as a fraction of the clean embedding norm; `None` picks
    /// [`default_sigma`] for the encoder flavor.
    pub sigma: Option<f64>,
    /// Jittered proposals per object in addition to the ground-truth box.
    pub n_jitter: usize,
    /// Maximum corner shift as a fraction of box width/height.
    pub jitter: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma: None,
            n_jitter: 2,
            jitter: 0.05,
        }
    }
}

impl NoiseConfig {
    pub fn with_sigma(sigma: f64) -> Self {
        Self {
            sigma: Some(sigma),
            ..Self::default()
        }
    }

    pub fn sigma_for(&self, flavor: Flavor) -> f64 {
        self.sigma.unwrap_or_else(|| default_sigma(flavor))
    }
}

/// Relative noise putting baseline Hard-subset mAP near the middle of its
/// range for the default encoder size.
pub fn default_sigma(flavor: Flavor) -> f64 {
    match flavor {
        Flavor::Bidirectional => 0.8,
        Flavor::Causal => 0.1,
    }
}

/// A candidate box with its region feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub feature: Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObject {
    pub record: ObjectRecord,
    /// Feature of the ground-truth proposal.
    pub region_feature: Embedding,
    /// `proposals[0]` is the ground-truth box.
    pub proposals: Vec<Proposal>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalInstance {
    pub id: u64,
    pub subset: Subset,
    pub objects: Vec<SyntheticObject>,
}

impl EvalInstance {
    pub fn record(&self) -> InstanceRecord {
        InstanceRecord {
            id: self.id,
            subset: self.subset,
            objects: self.objects.iter().map(|o| o.record.clone()).collect(),
        }
    }

    pub fn ground_truth(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.record.bbox).collect()
    }
}

fn noisy(clean: &Embedding, sigma: f64, rng: &mut ChaCha8Rng) -> Embedding {
    let direction: Vec<f64> = (0..clean.dim()).map(|_| StandardNormal.sample(rng)).collect();
    let dir_norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    let magnitude = sigma * clean.norm();
    if dir_norm == 0.0 || magnitude == 0.0 {
        return clean.clone();
    }
    Embedding::new(
        clean
            .values()
            .iter()
            .zip(&direction)
            .map(|(c, d)| c + magnitude * d / dir_norm)
            .collect(),
    )
}

fn jittered(rng: &mut ChaCha8Rng, b: &BBox, jitter: f64) -> BBox {
    let (w, h) = (b.x2 - b.x1, b.y2 - b.y1);
    let mut shift = |span: f64| rng.random_range(-jitter..=jitter) * span;
    let x1 = b.x1 + shift(w);
    let y1 = b.y1 + shift(h);
    let x2 = b.x2 + shift(w);
    let y2 = b.y2 + shift(h);
    BBox::new(x1, y1, x2.max(x1 + 1.0), y2.max(y1 + 1.0))
}

/// Attaches region features and proposals to records.
///
/// The clean feature of an object is the default-mask encoding of its
/// positive caption; every proposal adds its own noise draw of norm
/// `sigma · ‖clean‖`. Randomness depends only on `(seed, record id)`.
pub fn realize(records: &[InstanceRecord], enc: &Encoder, noise: &NoiseConfig, seed: u64) -> Result<Vec<EvalInstance>> {
    use rayon::prelude::*;

    if noise.sigma.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
        return Err(Error::Dataset(format!("noise sigma must be finite and non-negative, got {:?}", noise.sigma)));
    }
    let sigma = noise.sigma_for(enc.flavor());
    records
        .par_iter()
        .map(|record| {
            let mut noise_rng = substream(seed, &format!("noise/{}", record.subset), record.id);
            let mut box_rng = substream(seed, &format!("proposals/{}", record.subset), record.id);
            let objects = record
                .objects
                .iter()
                .map(|obj| {
                    let seq = tokenize(&obj.captions.pos, enc.config().seq_len, enc.flavor())?;
                    let clean = enc.encode_default(&seq)?;
                    let mut proposals = vec![Proposal {
                        bbox: obj.bbox,
                        feature: noisy(&clean, sigma, &mut noise_rng),
                    }];
                    for _ in 0..noise.n_jitter {
                        proposals.push(Proposal {
                            bbox: jittered(&mut box_rng, &obj.bbox, noise.jitter),
                            feature: noisy(&clean, sigma, &mut noise_rng),
                        });
                    }
                    Ok(SyntheticObject {
                        record: obj.clone(),
                        region_feature: proposals[0].feature.clone(),
                        proposals,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalInstance {
                id: record.id,
                subset: record.subset,
                objects,
            })
        })
        .collect()
}

/// Records plus region features in one step.
pub fn generate_dataset(
    subset: Subset,
    n_instances: usize,
    seed: u64,
    enc: &Encoder,
    noise: &NoiseConfig,
) -> Result<Vec<EvalInstance>> {
    let records = generate_records(subset, n_instances, seed, &WordPools::default(), &GenConfig::default())?;
    realize(&records, enc, noise, seed)
}

/// JSON Lines dataset: an optional `{"provenance": ...}` header line, then
/// one instance per line.
pub fn write_jsonl(mut out: impl Write, records: &[InstanceRecord], provenance: Option<&serde_json::Value>) -> Result<()> {
    if let Some(p) = provenance {
        serde_json::to_writer(&mut out, &serde_json::json!({ "provenance": p }))?;
        out.write_all(b"\n")?;
    }
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Parsed dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub provenance: Option<serde_json::Value>,
    pub records: Vec<InstanceRecord>,
}

impl DatasetFile {
    /// Seed recorded in the provenance header, if any.
    pub fn seed(&self) -> Option<u64> {
        self.provenance.as_ref()?.get("seed")?.as_u64()
    }

    pub fn subsets(&self) -> BTreeSet<Subset> {
        self.records.iter().map(|r| r.subset).collect()
    }
}

pub fn read_jsonl(input: impl BufRead) -> Result<DatasetFile> {
    let mut provenance = None;
    let mut records = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("line {}: {e}", n + 1)))?;
        if let Some(p) = value.get("provenance") {
            provenance = Some(p.clone());
            continue;
        }
        let record: InstanceRecord = serde_json::from_value(value)
            .map_err(|e| Error::Dataset(format!("line {}: {e}", n + 1)))?;
        if record.objects.iter().any(|o| !o.bbox.is_well_formed()) {
            return Err(Error::Dataset(format!("line {}: malformed box", n + 1)));
        }
        records.push(record);
    }
    Ok(DatasetFile { provenance, records })
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<DatasetFile> {
    read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Words differing between two captions of the same length, position by position.
pub fn differing_words(a: &str, b: &str) -> Option<usize> {
    let (wa, wb): (Vec<&str>, Vec<&str>) = (a.split(' ').collect(), b.split(' ').collect());
    (wa.len() == wb.len()).then(|| wa.iter().zip(&wb).filter(|(x, y)| x != y).count())
}

/// Largest IoU between two distinct ground-truth boxes; zero for disjoint layouts.
pub fn max_gt_overlap(instance: &InstanceRecord) -> f64 {
    let boxes: Vec<BBox> = instance.objects.iter().map(|o| o.bbox).collect();
    let mut worst: f64 = 0.0;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            worst = worst.max(iou(&boxes[i], &boxes[j]));
        }
    }
    worst
}
