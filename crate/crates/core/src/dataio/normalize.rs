use serde::{Deserialize, Serialize};

use crate::error::{Result, StpsError};

/// Global z-score normaliser (population standard deviation).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl Normalizer {
    /// Fits on training-split values only.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(StpsError::Degenerate("no values to fit a normalizer".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(StpsError::Degenerate(format!(
                "training values have standard deviation {std}"
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn forward(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse(&self, x: f64) -> f64 {
        x * self.std + self.mean
    }

    pub fn transform(&self, xs: &[f64], direction: Direction) -> Vec<f64> {
        match direction {
            Direction::Forward => xs.iter().map(|&x| self.forward(x)).collect(),
            Direction::Inverse => xs.iter().map(|&x| self.inverse(x)).collect(),
        }
    }
}
