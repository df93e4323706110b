use serde::{Deserialize, Serialize};

use super::{DataError, DatasetSplit, SpeedSeries};

/// Global z-score statistics fitted on the training range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub fn new(mean: f64, std: f64) -> Result<Self, DataError> {
        if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
            return Err(DataError::Config(format!("invalid normalizer mean={mean} std={std}")));
        }
        Ok(Self { mean, std })
    }

    /// Fits on every raw index the training windows touch.
    pub fn fit(series: &[SpeedSeries], split: &DatasetSplit) -> Result<Self, DataError> {
        let end = split.train_raw_end();
        let values: Vec<f64> = series
            .iter()
            .flat_map(|s| s.speeds[..end.min(s.len())].iter().copied())
            .collect();
        Self::fit_values(&values)
    }

    pub fn fit_values(values: &[f64]) -> Result<Self, DataError> {
        if values.len() < 2 {
            return Err(DataError::Config("normalizer needs at least two values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self::new(mean, var.sqrt())
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}
