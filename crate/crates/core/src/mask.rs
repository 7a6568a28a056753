//! 1D token masks and 2D additive attention masks.
//!
//! Masks are built with indicator-matrix algebra (outer products, diagonals,
//! triangular matrices) over `{0, 1}` and only then mapped to the additive
//! `{0, NEG_INF}` form consumed by attention.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{AttributePositions, TokenKind, TokenSequence};

/// Additive value of a blocked entry: the most negative finite `f64`.
pub const NEG_INF: f64 = f64::MIN;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("position {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },
    #[error("row {row} of the attention mask blocks every key")]
    DegenerateRow { row: usize },
    #[error("mask size must be at least 1")]
    Empty,
}

/// Which side of the attention map the attribute mask restricts.
///
/// `Queries` builds `Θ Ψᵀ + diag(1 − Ψ)`: only attribute rows gather context.
/// `Keys` builds `Ψ Θᵀ + diag(1 − Ψ)`: text rows read only attribute columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestrictAxis {
    Queries,
    #[default]
    Keys,
}

impl std::str::FromStr for RestrictAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "queries" | "rows" => Ok(RestrictAxis::Queries),
            "keys" | "columns" => Ok(RestrictAxis::Keys),
            other => Err(format!("unknown restrict axis `{other}`")),
        }
    }
}

/// Indicator vector over sequence positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask1D {
    values: Vec<u8>,
}

impl TokenMask1D {
    /// Builds a mask from 0/1 values; any non-zero value counts as 1.
    pub fn from_values(values: impl IntoIterator<Item = u8>) -> Self {
        Self {
            values: values.into_iter().map(|v| u8::from(v != 0)).collect(),
        }
    }

    pub fn from_bools(values: impl IntoIterator<Item = bool>) -> Self {
        Self::from_values(values.into_iter().map(u8::from))
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn column(&self) -> Array1<i32> {
        self.values.iter().map(|&v| i32::from(v)).collect()
    }
}

/// `S × S` additive mask whose entries are exactly `0.0` or [`NEG_INF`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask2D {
    entries: Array2<f64>,
}

impl AttentionMask2D {
    /// Maps an indicator matrix to additive form: `≥ 1` opens, else blocks.
    fn from_indicator(indicator: &Array2<i32>) -> Self {
        Self {
            entries: indicator.mapv(|v| if v >= 1 { 0.0 } else { NEG_INF }),
        }
    }

    /// Builds a mask from a predicate over `(query, key)`.
    pub fn from_fn(size: usize, open: impl Fn(usize, usize) -> bool) -> Self {
        Self {
            entries: Array2::from_shape_fn((size, size), |(i, j)| if open(i, j) { 0.0 } else { NEG_INF }),
        }
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn is_open(&self, query: usize, key: usize) -> bool {
        self.entries[[query, key]] == 0.0
    }

    /// Row-major pattern of open entries.
    pub fn open_pattern(&self) -> Vec<Vec<bool>> {
        self.entries
            .outer_iter()
            .map(|row| row.iter().map(|&v| v == 0.0).collect())
            .collect()
    }

    /// Rows with no open entry.
    pub fn degenerate_rows(&self) -> Vec<usize> {
        self.entries
            .outer_iter()
            .enumerate()
            .filter(|(_, row)| row.iter().all(|&v| v != 0.0))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn check_rows(self) -> Result<Self, MaskError> {
        match self.degenerate_rows().first() {
            Some(&row) => Err(MaskError::DegenerateRow { row }),
            None => Ok(self),
        }
    }

    /// Opens the diagonal entry of every fully blocked row, so such tokens
    /// attend only to themselves.
    pub fn with_self_fallback(mut self) -> Self {
        for row in self.degenerate_rows() {
            self.entries[[row, row]] = 0.0;
        }
        self
    }
}

/// Ψ: 1 at TEXT positions, 0 at START/END/PAD.
pub fn token_mask_1d(seq: &TokenSequence) -> TokenMask1D {
    TokenMask1D::from_bools(seq.kinds().iter().map(|k| *k == TokenKind::Text))
}

/// Θ: 1 at attribute positions, 0 elsewhere.
pub fn attribute_mask_1d(seq: &TokenSequence, phi: &AttributePositions) -> Result<TokenMask1D, MaskError> {
    indicator(seq.total_len(), phi)
}

pub(crate) fn indicator(len: usize, phi: &AttributePositions) -> Result<TokenMask1D, MaskError> {
    if let Some(&index) = phi.positions().iter().find(|&&i| i >= len) {
        return Err(MaskError::OutOfRange { index, len });
    }
    Ok(TokenMask1D::from_bools((0..len).map(|i| phi.contains(i))))
}

fn outer(rows: &Array1<i32>, cols: &Array1<i32>) -> Array2<i32> {
    let r = rows.view().insert_axis(Axis(1));
    let c = cols.view().insert_axis(Axis(0));
    &r * &c
}

fn diag_complement(psi: &Array1<i32>) -> Array2<i32> {
    Array2::from_diag(&psi.mapv(|v| 1 - v))
}

/// `M̄ = Ψ Ψᵀ + diag(1 − Ψ)`.
pub fn bert_default_mask(psi: &TokenMask1D) -> AttentionMask2D {
    let psi = psi.column();
    AttentionMask2D::from_indicator(&(outer(&psi, &psi) + diag_complement(&psi)))
}

/// `M̄* = Θ Ψᵀ + diag(1 − Ψ)` (queries) or `Ψ Θᵀ + diag(1 − Ψ)` (keys).
pub fn bert_attribute_mask(
    theta: &TokenMask1D,
    psi: &TokenMask1D,
    axis: RestrictAxis,
) -> Result<AttentionMask2D, MaskError> {
    if theta.len() != psi.len() {
        return Err(MaskError::LengthMismatch {
            left: theta.len(),
            right: psi.len(),
        });
    }
    let (theta, psi) = (theta.column(), psi.column());
    let product = match axis {
        RestrictAxis::Queries => outer(&theta, &psi),
        RestrictAxis::Keys => outer(&psi, &theta),
    };
    Ok(AttentionMask2D::from_indicator(&(product + diag_complement(&psi))))
}

fn lower_triangle(size: usize) -> Array2<i32> {
    Array2::from_shape_fn((size, size), |(i, j)| i32::from(i >= j))
}

/// Causal mask: open iff `i ≥ j`.
pub fn clip_default_mask(size: usize) -> Result<AttentionMask2D, MaskError> {
    if size == 0 {
        return Err(MaskError::Empty);
    }
    Ok(AttentionMask2D::from_indicator(&lower_triangle(size)))
}

/// Causal attribute mask without the row check.
pub fn clip_attribute_mask_unchecked(
    size: usize,
    phi: &AttributePositions,
) -> Result<AttentionMask2D, MaskError> {
    if size == 0 {
        return Err(MaskError::Empty);
    }
    let keys = indicator(size, phi)?.column();
    let ones = Array1::<i32>::ones(size);
    let indicator = lower_triangle(size) * outer(&ones, &keys);
    Ok(AttentionMask2D::from_indicator(&indicator))
}

/// Causal attribute mask: open iff `i ≥ j` and `j ∈ Φ`.
///
/// Fails when a row ends up fully blocked, which happens exactly when
/// position 0 is not in `phi`.
pub fn clip_attribute_mask(size: usize, phi: &AttributePositions) -> Result<AttentionMask2D, MaskError> {
    clip_attribute_mask_unchecked(size, phi)?.check_rows()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{match_positions, tokenize, Flavor};

    fn open_set(mask: &AttentionMask2D) -> Vec<(usize, usize)> {
        let n = mask.size();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| mask.is_open(i, j))
            .collect()
    }

    fn mask(v: &[u8]) -> TokenMask1D {
        TokenMask1D::from_values(v.iter().copied())
    }

    #[test]
    fn token_mask_examples() {
        let seq = tokenize("a dark brown dog", 8, Flavor::Bidirectional).unwrap();
        assert_eq!(token_mask_1d(&seq).values(), [0, 1, 1, 1, 1, 0, 0, 0]);
        let seq = tokenize("", 4, Flavor::Bidirectional).unwrap();
        assert_eq!(token_mask_1d(&seq).values(), [0, 0, 0, 0]);
        let seq = tokenize("dog", 3, Flavor::Causal).unwrap();
        assert_eq!(token_mask_1d(&seq).values(), [0, 1, 0]);
    }

    #[test]
    fn attribute_mask_marks_attribute_positions() {
        let seq = tokenize("a dark brown dog", 8, Flavor::Bidirectional).unwrap();
        let phi = match_positions(&seq, &["dark"], Flavor::Bidirectional);
        assert_eq!(attribute_mask_1d(&seq, &phi).unwrap().values(), [0, 0, 1, 0, 0, 0, 1, 1]);
        let empty = AttributePositions::default();
        assert_eq!(attribute_mask_1d(&seq, &empty).unwrap().values(), [0; 8]);

        let all_text = match_positions(&seq, &["a", "dark", "brown", "dog"], Flavor::Bidirectional);
        let theta = attribute_mask_1d(&seq, &all_text).unwrap();
        let psi = token_mask_1d(&seq);
        assert!(theta.values().iter().zip(psi.values()).all(|(t, p)| t >= p));
    }

    #[test]
    fn attribute_mask_rejects_out_of_range() {
        let seq = tokenize("a dog", 4, Flavor::Causal).unwrap();
        let phi = AttributePositions::new([1, 4], vec![]);
        assert_eq!(
            attribute_mask_1d(&seq, &phi),
            Err(MaskError::OutOfRange { index: 4, len: 4 })
        );
    }

    #[test]
    fn bert_default_examples() {
        let m = bert_default_mask(&mask(&[0, 1, 1, 0]));
        assert_eq!(open_set(&m), [(0, 0), (1, 1), (1, 2), (2, 1), (2, 2), (3, 3)]);
        let full = bert_default_mask(&mask(&[1; 5]));
        assert!(full.entries().iter().all(|&v| v == 0.0));
        let ident = bert_default_mask(&mask(&[0; 4]));
        assert_eq!(open_set(&ident), [(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn bert_attribute_examples() {
        let psi = mask(&[0, 1, 1, 0]);
        let theta = mask(&[0, 1, 0, 0]);
        let q = bert_attribute_mask(&theta, &psi, RestrictAxis::Queries).unwrap();
        assert_eq!(open_set(&q), [(0, 0), (1, 1), (1, 2), (3, 3)]);
        let k = bert_attribute_mask(&theta, &psi, RestrictAxis::Keys).unwrap();
        assert_eq!(open_set(&k), [(0, 0), (1, 1), (2, 1), (3, 3)]);

        let zero = bert_attribute_mask(&mask(&[0; 4]), &psi, RestrictAxis::Queries).unwrap();
        assert_eq!(open_set(&zero), [(0, 0), (3, 3)]);

        for axis in [RestrictAxis::Queries, RestrictAxis::Keys] {
            assert_eq!(
                bert_attribute_mask(&psi, &psi, axis).unwrap(),
                bert_default_mask(&psi)
            );
        }
        assert_eq!(
            bert_attribute_mask(&mask(&[1]), &psi, RestrictAxis::Keys),
            Err(MaskError::LengthMismatch { left: 1, right: 4 })
        );
    }

    #[test]
    fn clip_default_examples() {
        let m = clip_default_mask(3).unwrap();
        assert_eq!(
            m.open_pattern(),
            [[true, false, false], [true, true, false], [true, true, true]]
        );
        assert_eq!(open_set(&clip_default_mask(1).unwrap()), [(0, 0)]);
        for s in 2..10 {
            assert_eq!(clip_default_mask(s).unwrap().entries()[[0, 1]], NEG_INF);
        }
        assert_eq!(clip_default_mask(0), Err(MaskError::Empty));
    }

    #[test]
    fn clip_attribute_examples() {
        let phi = AttributePositions::new([0, 2], vec![]);
        let m = clip_attribute_mask(4, &phi).unwrap();
        let rows: Vec<String> = m
            .open_pattern()
            .iter()
            .map(|r| r.iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect();
        assert_eq!(rows, ["1000", "1000", "1010", "1010"]);

        assert_eq!(
            clip_attribute_mask(6, &AttributePositions::all(6)).unwrap(),
            clip_default_mask(6).unwrap()
        );
    }

    #[test]
    fn clip_attribute_without_start_is_degenerate() {
        let phi = AttributePositions::new([2], vec![]);
        assert_eq!(
            clip_attribute_mask(4, &phi),
            Err(MaskError::DegenerateRow { row: 0 })
        );
        let repaired = clip_attribute_mask_unchecked(4, &phi).unwrap().with_self_fallback();
        assert!(repaired.degenerate_rows().is_empty());
        assert!(repaired.is_open(0, 0) && repaired.is_open(1, 1));
        assert!(!repaired.is_open(2, 2) || phi.contains(2));
    }

    #[test]
    fn only_two_sentinels_occur() {
        let m = bert_attribute_mask(&mask(&[1, 0, 1, 0, 1]), &mask(&[0, 1, 1, 1, 0]), RestrictAxis::Queries)
            .unwrap();
        assert!(m.entries().iter().all(|&v| v == 0.0 || v == NEG_INF));
        // 0 * -x would produce -0.0; make sure open entries are +0.0
        assert!(m.entries().iter().filter(|&&v| v == 0.0).all(|v| v.is_sign_positive()));
    }
}
