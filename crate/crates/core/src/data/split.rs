use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Chronological train/validation/test partition of window start indices.
///
/// A window starting at `w` reads inputs `[w, w + lookback)` and targets
/// `[w + lookback, w + lookback + horizon)`. Consecutive splits are separated
/// by `horizon - 1` purged windows so that no two splits share a target index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub lookback: usize,
    pub horizon: usize,
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

pub const TRAIN_FRACTION: f64 = 0.70;
pub const VALIDATION_FRACTION: f64 = 0.15;

/// Shortest series that still leaves ten windows after purging.
pub fn min_series_length(lookback: usize, horizon: usize) -> usize {
    lookback + horizon - 1 + 2 * horizon.saturating_sub(1) + 10
}

pub fn chronological_split(series_length: usize, lookback: usize, horizon: usize) -> Result<DatasetSplit, DataError> {
    if lookback == 0 || horizon == 0 {
        return Err(DataError::Config("lookback and horizon must be positive".into()));
    }
    let required = min_series_length(lookback, horizon);
    if series_length < required {
        return Err(DataError::SeriesTooShort {
            length: series_length,
            required,
        });
    }
    let windows = series_length - lookback - horizon + 1;
    let gap = horizon - 1;
    let usable = windows - 2 * gap;
    let n_val = ((usable as f64 * VALIDATION_FRACTION).round() as usize).max(1);
    let n_test = ((usable as f64 * (1.0 - TRAIN_FRACTION - VALIDATION_FRACTION)).round() as usize).max(1);
    let n_train = usable - n_val - n_test;
    let train = 0..n_train;
    let validation = n_train + gap..n_train + gap + n_val;
    let test = validation.end + gap..validation.end + gap + n_test;
    debug_assert_eq!(test.end, windows);
    Ok(DatasetSplit {
        lookback,
        horizon,
        train,
        validation,
        test,
    })
}

impl DatasetSplit {
    /// Raw indices `[first, last]` covered by targets of windows in `range`.
    pub fn target_span(&self, range: &Range<usize>) -> Option<(usize, usize)> {
        if range.is_empty() {
            return None;
        }
        Some((range.start + self.lookback, range.end - 1 + self.lookback + self.horizon - 1))
    }

    /// One past the last raw index touched by a training window.
    pub fn train_raw_end(&self) -> usize {
        self.train.end - 1 + self.lookback + self.horizon
    }

    pub fn total_windows(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}
