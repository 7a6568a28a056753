//! Linear composition of global and attribute-specific embeddings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Embedding;

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("triplet has a non-finite component")]
    NonFinite,
    #[error("triplet file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `(w_global, w_attri, bias)`, the only trainable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightTriplet {
    pub w_global: f64,
    pub w_attri: f64,
    pub bias: f64,
}

impl WeightTriplet {
    /// `(1, 0, 0)`: composition returns the global embedding.
    pub const IDENTITY: WeightTriplet = WeightTriplet::new(1.0, 0.0, 0.0);

    pub const fn new(w_global: f64, w_attri: f64, bias: f64) -> Self {
        Self {
            w_global,
            w_attri,
            bias,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w_global.is_finite() && self.w_attri.is_finite() && self.bias.is_finite()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.w_global, self.w_attri, self.bias]
    }

    pub fn from_array([w_global, w_attri, bias]: [f64; 3]) -> Self {
        Self::new(w_global, w_attri, bias)
    }
}

impl Default for WeightTriplet {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl std::str::FromStr for WeightTriplet {
    type Err = String;

    /// Parses `w_global,w_attri,bias`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<Result<_, _>>()?;
        let arr: [f64; 3] = parts
            .try_into()
            .map_err(|_| format!("expected three comma-separated numbers, got `{s}`"))?;
        let t = WeightTriplet::from_array(arr);
        if !t.is_finite() {
            return Err(format!("non-finite triplet `{s}`"));
        }
        Ok(t)
    }
}

fn same_dim(a: &Embedding, b: &Embedding) -> Result<(), ComposeError> {
    if a.dim() != b.dim() {
        return Err(ComposeError::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(())
}

/// `w_global·u_global + w_attri·u_attri + bias·1`, or `u_global` when `skip`.
pub fn compose(
    u_global: &Embedding,
    u_attri: &Embedding,
    t: &WeightTriplet,
    skip: bool,
) -> Result<Embedding, ComposeError> {
    same_dim(u_global, u_attri)?;
    if skip {
        return Ok(u_global.clone());
    }
    Ok(Embedding::new(
        u_global
            .values()
            .iter()
            .zip(u_attri.values())
            .map(|(g, a)| t.w_global * g + t.w_attri * a + t.bias)
            .collect(),
    ))
}

/// Category component `u_global − u_attri`.
pub fn decompose_category(u_global: &Embedding, u_attri: &Embedding) -> Result<Embedding, ComposeError> {
    same_dim(u_global, u_attri)?;
    Ok(u_global - u_attri)
}

/// Keeps the two weights and zeroes the bias.
pub fn transfer_triplet(t: &WeightTriplet) -> WeightTriplet {
    WeightTriplet::new(t.w_global, t.w_attri, 0.0)
}

/// On-disk form of a triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletFile {
    pub w_global: f64,
    pub w_attri: f64,
    pub bias: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_model: Option<String>,
    /// Effective configuration of the run that produced the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl TripletFile {
    pub fn new(t: WeightTriplet) -> Self {
        Self {
            w_global: t.w_global,
            w_attri: t.w_attri,
            bias: t.bias,
            source_model: None,
            provenance: None,
        }
    }

    pub fn triplet(&self) -> WeightTriplet {
        WeightTriplet::new(self.w_global, self.w_attri, self.bias)
    }

    pub fn from_json(text: &str) -> Result<Self, ComposeError> {
        let file: TripletFile =
            serde_json::from_str(text).map_err(|e| ComposeError::Format(e.to_string()))?;
        if !file.triplet().is_finite() {
            return Err(ComposeError::NonFinite);
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("triplet serializes");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ComposeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ComposeError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}
