use std::ops::{Add, Index, Mul, Sub};

use serde::{Deserialize, Serialize};

/// Dense real vector produced by the text encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, factor: f64) -> Embedding {
        Embedding::new(self.values.iter().map(|v| v * factor).collect())
    }
}

impl Index<usize> for Embedding {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(values: Vec<f64>) -> Self {
        Self::new(values)
    }
}

impl<'a> Add<&'a Embedding> for &'a Embedding {
    type Output = Embedding;

    fn add(self, rhs: &'a Embedding) -> Embedding {
        Embedding::new(self.values.iter().zip(&rhs.values).map(|(a, b)| a + b).collect())
    }
}

impl<'a> Sub<&'a Embedding> for &'a Embedding {
    type Output = Embedding;

    fn sub(self, rhs: &'a Embedding) -> Embedding {
        Embedding::new(self.values.iter().zip(&rhs.values).map(|(a, b)| a - b).collect())
    }
}

impl Mul<&Embedding> for f64 {
    type Output = Embedding;

    fn mul(self, rhs: &Embedding) -> Embedding {
        rhs.scaled(self)
    }
}
