//! Speed-series ingest, chronological splitting, normalization and the
//! synthetic data generator.

mod normalize;
pub mod period;
mod series;
mod split;
pub mod synthetic;
pub mod timefmt;

pub use normalize::Normalizer;
pub use period::{TimePeriod, TimePeriodBins};
pub use series::{
    load_speed_csv, read_speed_csv, write_speed_csv, GapReport, LoadedSpeeds, SpeedSeries, CSV_HEADER,
    MAX_INTERPOLATED_GAP, MAX_SPEED_KMH,
};
pub use split::{chronological_split, min_series_length, DatasetSplit};
pub use synthetic::{generate_synthetic, InjectedEffect, LedgerEntry, SyntheticDataset, SyntheticSpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("line {line}: speed {value} outside [0, 200] km/h")]
    OutOfRange { line: u64, value: f64 },
    #[error("non-constant spacing: {0}")]
    Spacing(String),
    #[error("series of length {length} is shorter than the required {required}")]
    SeriesTooShort { length: usize, required: usize },
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub(crate) fn csv(e: csv::Error) -> Self {
        DataError::Config(format!("csv: {e}"))
    }
}
