//! A small frozen transformer text encoder.
//!
//! Each layer runs masked multi-head attention, a residual connection and
//! layer norm, then a ReLU feed-forward block with another residual and layer
//! norm. Every weight matrix and bias is drawn from `U(-1/√d, 1/√d)` with a
//! ChaCha8 stream seeded from [`EncoderConfig::seed`], in the fixed order
//! documented on [`Encoder::new`]. Layer-norm gains start at one and shifts
//! at zero.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::Embedding;
use crate::mask::{
    bert_attribute_mask, bert_default_mask, clip_attribute_mask_unchecked, clip_default_mask,
    indicator, token_mask_1d, AttentionMask2D, MaskError, RestrictAxis, NEG_INF,
};
use crate::tokenizer::{AttributePositions, Flavor, TokenSequence, VOCAB_SIZE};

const LAYER_NORM_EPS: f64 = 1e-5;
const CHECKPOINT_MAGIC: &[u8; 8] = b"FGOVDENC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("attention row {row} has no unmasked key")]
    DegenerateRow { row: usize },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub flavor: Flavor,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            flavor: Flavor::Bidirectional,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            seq_len: 16,
            d_ff: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn with_flavor(flavor: Flavor, seed: u64) -> Self {
        Self {
            flavor,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |m: String| Err(EncoderError::Config(m));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return fail("d_model, n_layers, n_heads and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.seq_len < 2 {
            return fail(format!("seq_len {} cannot hold start and end tokens", self.seq_len));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    ln1_gain: Array1<f64>,
    ln1_shift: Array1<f64>,
    ln2_gain: Array1<f64>,
    ln2_shift: Array1<f64>,
}

impl Layer {
    fn tensors(&self) -> [&[f64]; 12] {
        [
            slice(&self.wq),
            slice(&self.wk),
            slice(&self.wv),
            slice(&self.wo),
            slice(&self.w1),
            self.b1.as_slice().expect("contiguous"),
            slice(&self.w2),
            self.b2.as_slice().expect("contiguous"),
            self.ln1_gain.as_slice().expect("contiguous"),
            self.ln1_shift.as_slice().expect("contiguous"),
            self.ln2_gain.as_slice().expect("contiguous"),
            self.ln2_shift.as_slice().expect("contiguous"),
        ]
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("weights are standard-layout")
}

/// Frozen encoder weights. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    token_embedding: Array2<f64>,
    position_embedding: Array2<f64>,
    layers: Vec<Layer>,
}

/// How fully blocked rows of an attribute mask are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegenerateRows {
    /// Fail with [`EncoderError::DegenerateRow`].
    #[default]
    Reject,
    /// Let such rows attend to themselves only.
    SelfAttend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeMaskOptions {
    pub axis: RestrictAxis,
    pub degenerate: DegenerateRows,
}

/// Output of [`Encoder::encode_pair`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub global: Embedding,
    pub attri: Embedding,
    /// No attribute matched a TEXT position; composition must be skipped.
    pub skip: bool,
}

impl Encoder {
    /// Draws all weights from the seeded stream in this order: token
    /// embedding table (row-major), position table, then per layer
    /// `wq, wk, wv, wo, w1, b1, w2, b2`.
    pub fn new(config: EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let d = config.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut matrix = |rows: usize, cols: usize| {
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
        };

        let token_embedding = matrix(VOCAB_SIZE, d);
        let position_embedding = matrix(config.seq_len, d);
        let layers = (0..config.n_layers)
            .map(|_| {
                let wq = matrix(d, d);
                let wk = matrix(d, d);
                let wv = matrix(d, d);
                let wo = matrix(d, d);
                let w1 = matrix(d, config.d_ff);
                let b1 = matrix(1, config.d_ff).remove_axis(Axis(0));
                let w2 = matrix(config.d_ff, d);
                let b2 = matrix(1, d).remove_axis(Axis(0));
                Layer {
                    wq,
                    wk,
                    wv,
                    wo,
                    w1,
                    b1,
                    w2,
                    b2,
                    ln1_gain: Array1::ones(d),
                    ln1_shift: Array1::zeros(d),
                    ln2_gain: Array1::ones(d),
                    ln2_shift: Array1::zeros(d),
                }
            })
            .collect();

        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn flavor(&self) -> Flavor {
        self.config.flavor
    }

    fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        [slice(&self.token_embedding), slice(&self.position_embedding)]
            .into_iter()
            .chain(self.layers.iter().flat_map(|l| l.tensors()))
    }

    fn header_json(&self) -> String {
        serde_json::to_string(&self.config).expect("config serializes")
    }

    /// SHA-256 over the config header and every weight in canonical order,
    /// as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.header_json().as_bytes());
        for tensor in self.tensors() {
            for v in tensor {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_digest(&hasher.finalize())
    }

    /// Default mask for this flavor over the full padded sequence.
    pub fn default_mask(&self, seq: &TokenSequence) -> Result<AttentionMask2D, EncoderError> {
        Ok(match self.config.flavor {
            Flavor::Bidirectional => bert_default_mask(&token_mask_1d(seq)),
            Flavor::Causal => clip_default_mask(seq.total_len())?,
        })
    }

    /// Attribute-restricted mask for this flavor.
    pub fn attribute_mask(
        &self,
        seq: &TokenSequence,
        phi: &AttributePositions,
        opts: AttributeMaskOptions,
    ) -> Result<AttentionMask2D, EncoderError> {
        let mask = match self.config.flavor {
            Flavor::Bidirectional => {
                let theta = indicator(seq.total_len(), phi)?;
                bert_attribute_mask(&theta, &token_mask_1d(seq), opts.axis)?
            }
            Flavor::Causal => clip_attribute_mask_unchecked(seq.total_len(), phi)?,
        };
        match opts.degenerate {
            DegenerateRows::Reject => Ok(mask.check_rows()?),
            DegenerateRows::SelfAttend => Ok(mask.with_self_fallback()),
        }
    }

    fn check_seq(&self, seq: &TokenSequence) -> Result<(), EncoderError> {
        if seq.total_len() != self.config.seq_len {
            return Err(EncoderError::Shape(format!(
                "sequence length {} but encoder expects {}",
                seq.total_len(),
                self.config.seq_len
            )));
        }
        if seq.flavor() != self.config.flavor {
            return Err(EncoderError::Shape(format!(
                "sequence tokenized for {} but encoder is {}",
                seq.flavor(),
                self.config.flavor
            )));
        }
        Ok(())
    }

    /// Final hidden states, one row per position.
    pub fn hidden_states(
        &self,
        seq: &TokenSequence,
        mask: &AttentionMask2D,
    ) -> Result<Array2<f64>, EncoderError> {
        self.check_seq(seq)?;
        if mask.size() != seq.total_len() {
            return Err(EncoderError::Shape(format!(
                "mask is {0}x{0} but sequence has {1} positions",
                mask.size(),
                seq.total_len()
            )));
        }
        if let Some(&row) = mask.degenerate_rows().first() {
            return Err(EncoderError::DegenerateRow { row });
        }

        let mut x = Array2::from_shape_fn((seq.total_len(), self.config.d_model), |(i, c)| {
            self.token_embedding[[seq.ids()[i] as usize, c]] + self.position_embedding[[i, c]]
        });
        let dh = self.config.head_dim();
        for layer in &self.layers {
            let q = x.dot(&layer.wq);
            let k = x.dot(&layer.wk);
            let v = x.dot(&layer.wv);
            let mut heads = Array2::<f64>::zeros(x.raw_dim());
            for h in 0..self.config.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let out = attention(q.slice(cols), k.slice(cols), v.slice(cols), mask)?;
                heads.slice_mut(cols).assign(&out);
            }
            let attended = heads.dot(&layer.wo);
            x = layer_norm(&(&x + &attended), &layer.ln1_gain, &layer.ln1_shift);

            let mut hidden = x.dot(&layer.w1) + &layer.b1;
            hidden.mapv_inplace(|v| v.max(0.0));
            let ff = hidden.dot(&layer.w2) + &layer.b2;
            x = layer_norm(&(&x + &ff), &layer.ln2_gain, &layer.ln2_shift);
        }
        Ok(x)
    }

    /// Pooled embedding of `seq` under `mask`.
    ///
    /// The bidirectional flavor averages the TEXT positions (falling back to
    /// the start token for an empty caption); the causal flavor takes the
    /// end-of-text position.
    pub fn encode(&self, seq: &TokenSequence, mask: &AttentionMask2D) -> Result<Embedding, EncoderError> {
        let states = self.hidden_states(seq, mask)?;
        let pooled = match self.config.flavor {
            Flavor::Bidirectional if seq.text_len() > 0 => {
                let text = states.slice(s![1..=seq.text_len(), ..]);
                text.sum_axis(Axis(0)) / seq.text_len() as f64
            }
            Flavor::Bidirectional => states.row(0).to_owned(),
            Flavor::Causal => states.row(seq.end_index()).to_owned(),
        };
        Ok(Embedding::new(pooled.to_vec()))
    }

    pub fn encode_default(&self, seq: &TokenSequence) -> Result<Embedding, EncoderError> {
        self.encode(seq, &self.default_mask(seq)?)
    }

    /// Global and attribute-specific embeddings of one caption.
    pub fn encode_pair(
        &self,
        seq: &TokenSequence,
        phi: &AttributePositions,
        opts: AttributeMaskOptions,
    ) -> Result<EncodedPair, EncoderError> {
        let global = self.encode_default(seq)?;
        if !phi.has_text(seq) {
            return Ok(EncodedPair {
                attri: global.clone(),
                global,
                skip: true,
            });
        }
        let attri = self.encode(seq, &self.attribute_mask(seq, phi, opts)?)?;
        Ok(EncodedPair {
            global,
            attri,
            skip: false,
        })
    }

    /// Writes the binary checkpoint; see the README for the layout.
    pub fn write_checkpoint(&self, mut out: impl Write) -> Result<(), EncoderError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = self.header_json();
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        for tensor in self.tensors() {
            for v in tensor {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EncoderError> {
        let file = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(file))
    }

    pub fn read_checkpoint(mut input: impl Read) -> Result<Self, EncoderError> {
        let bad = |m: &str| EncoderError::Checkpoint(m.to_string());
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        if buf.len() < 16 + 32 || &buf[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not an encoder checkpoint"));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(EncoderError::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
        let header = body
            .get(16..16 + header_len)
            .ok_or_else(|| bad("truncated header"))?;
        let config: EncoderConfig = serde_json::from_slice(header)
            .map_err(|e| EncoderError::Checkpoint(format!("bad header: {e}")))?;
        config.validate()?;

        let mut values = body[16 + header_len..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        if !(body.len() - 16 - header_len).is_multiple_of(8) {
            return Err(bad("weight section is not a whole number of f64"));
        }
        let mut take = |rows: usize, cols: usize| -> Result<Array2<f64>, EncoderError> {
            let data: Vec<f64> = values.by_ref().take(rows * cols).collect();
            if data.len() != rows * cols {
                return Err(bad("truncated weights"));
            }
            Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
        };

        let d = config.d_model;
        let token_embedding = take(VOCAB_SIZE, d)?;
        let position_embedding = take(config.seq_len, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(Layer {
                wq: take(d, d)?,
                wk: take(d, d)?,
                wv: take(d, d)?,
                wo: take(d, d)?,
                w1: take(d, config.d_ff)?,
                b1: take(1, config.d_ff)?.remove_axis(Axis(0)),
                w2: take(config.d_ff, d)?,
                b2: take(1, d)?.remove_axis(Axis(0)),
                ln1_gain: take(1, d)?.remove_axis(Axis(0)),
                ln1_shift: take(1, d)?.remove_axis(Axis(0)),
                ln2_gain: take(1, d)?.remove_axis(Axis(0)),
                ln2_shift: take(1, d)?.remove_axis(Axis(0)),
            });
        }
        if values.next().is_some() {
            return Err(bad("trailing weights"));
        }
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EncoderError> {
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, shift: &Array1<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.outer_iter_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.iter_mut()
            .zip(gain.iter().zip(shift))
            .for_each(|(v, (g, b))| *v = (*v - mean) * inv * g + b);
    }
    out
}

/// Row-wise `softmax(Q Kᵀ / √d_K + M)`.
pub fn attention_weights(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    mask: &AttentionMask2D,
) -> Result<Array2<f64>, EncoderError> {
    let (s, d) = q.dim();
    if k.dim() != (s, d) || mask.size() != s {
        return Err(EncoderError::Shape(format!(
            "q {:?}, k {:?}, mask {}x{}",
            q.dim(),
            k.dim(),
            mask.size(),
            mask.size()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = q.dot(&k.t()) * scale + mask.entries();
    for (row, mut r) in scores.outer_iter_mut().enumerate() {
        if mask.entries().row(row).iter().all(|&m| m == NEG_INF) {
            return Err(EncoderError::DegenerateRow { row });
        }
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        r.mapv_inplace(|v| (v - max).exp());
        let total = r.sum();
        r.mapv_inplace(|v| v / total);
    }
    Ok(scores)
}

/// `softmax(Q Kᵀ / √d_K + M) V`.
pub fn attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    mask: &AttentionMask2D,
) -> Result<Array2<f64>, EncoderError> {
    if v.nrows() != k.nrows() {
        return Err(EncoderError::Shape(format!(
            "v has {} rows, k has {}",
            v.nrows(),
            k.nrows()
        )));
    }
    Ok(attention_weights(q, k, mask)?.dot(&v))
}
