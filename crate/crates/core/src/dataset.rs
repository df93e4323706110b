//! Forecasting windows assembled from speeds, causal features and the graph.
//!
//! Everything the network consumes is precomputed per segment and step once;
//! [`ForecastData::batch`] only copies slices into dense arrays.

use std::f64::consts::TAU;

use chrono::{NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ckb::CausalKnowledgeBase;
use crate::data::{chronological_split, DataError, DatasetSplit, Normalizer, SpeedSeries};
use crate::events::EventRecord;
use crate::features::{segment_features, CausalFeatureVector, FeatureConfig, D_C};
use crate::graph::{log_bias, RoadGraph};
use crate::numerics::Array;

/// Per-step input channels: normalized speed and the time of day on the
/// unit circle.
pub const D_T: usize = 3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("segment `{0}` is not in the graph")]
    NotInGraph(String),
    #[error("series disagree on {0}")]
    Misaligned(&'static str),
    #[error("no series given")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub top_k: usize,
    pub features: FeatureConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            lookback: 15,
            horizon: 3,
            top_k: 5,
            features: FeatureConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    Validation,
    Test,
}

/// A window: inputs `[start, start + T)`, targets `[start + T, start + T + H)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowRef {
    pub segment: usize,
    pub start: usize,
}

/// Scales a feature vector to the ranges the network sees.
pub fn scale_features(v: &CausalFeatureVector, normalizer: &Normalizer, config: &FeatureConfig) -> [f64; D_C] {
    [
        v.adjustment / normalizer.std,
        v.event_count,
        v.time_since_last / config.time_since_cap_min,
        v.confidence,
        v.severity_max / 5.0,
        v.capacity_reduction_sum,
    ]
}

/// Time-of-day channels for one instant.
pub fn time_channels(t: NaiveDateTime) -> [f64; 2] {
    let frac = f64::from(t.hour() * 60 + t.minute()) / 1440.0;
    [(TAU * frac).sin(), (TAU * frac).cos()]
}

/// One mini-batch in the layouts the network expects.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub lookback: usize,
    pub horizon: usize,
    /// Neighbour slots per sample, real or padding.
    pub k: usize,
    /// `[T, B, D_T]`, step-major so the recurrence reads contiguous slices.
    pub target: Array,
    /// `[T, B·K, D_T]`, zero rows in padded slots; `None` when `k == 0`.
    pub neighbors: Option<Array>,
    /// `[B·K]`, whether a neighbour slot is real.
    pub neighbor_present: Vec<bool>,
    /// `[B·K]`, `ln w` for real slots and `0` for padding.
    pub log_bias: Vec<f64>,
    /// `[B, T, D_C]`, scaled causal features.
    pub features: Array,
    /// `[B, T]`, event flags `m_s`.
    pub flags: Vec<f64>,
    /// `[B, H]`, normalized targets.
    pub y: Array,
    /// Whether any lookback step is flagged.
    pub has_event: Vec<bool>,
    pub windows: Vec<WindowRef>,
}

impl Batch {
    /// Same batch with causal features replaced by the neutral vector and
    /// every flag cleared.
    pub fn neutralized(&self, neutral: &[f64; D_C]) -> Batch {
        let mut b = self.clone();
        let data: Vec<f64> = (0..self.size * self.lookback).flat_map(|_| neutral.iter().copied()).collect();
        b.features = Array::new(vec![self.size, self.lookback, D_C], data).expect("neutral features are finite");
        b.flags = vec![0.0; self.flags.len()];
        b.has_event = vec![false; self.size];
        b
    }
}

/// Precomputed per-step channels of every segment.
#[derive(Clone, Debug)]
pub struct ForecastData {
    pub config: DatasetConfig,
    pub segment_ids: Vec<String>,
    pub split: DatasetSplit,
    pub normalizer: Normalizer,
    pub start: NaiveDateTime,
    pub interval_min: u32,
    /// Raw km/h speeds per segment.
    pub speeds: Vec<Vec<f64>>,
    inputs: Vec<Vec<[f64; D_T]>>,
    features: Vec<Vec<[f64; D_C]>>,
    flags: Vec<Vec<bool>>,
    usable: Vec<Vec<bool>>,
    /// Per segment, `(segment index, normalized weight)` of its neighbours.
    pub neighbors: Vec<Vec<(usize, f64)>>,
    pub neutral: [f64; D_C],
}

impl ForecastData {
    /// Fits the normalizer on the training range and precomputes inputs,
    /// scaled features and neighbour lists.
    pub fn build(
        series: &[SpeedSeries],
        events: &[EventRecord],
        ckb: &CausalKnowledgeBase,
        graph: &RoadGraph,
        config: &DatasetConfig,
    ) -> Result<Self, DatasetError> {
        let first = series.first().ok_or(DatasetError::Empty)?;
        if series.iter().any(|s| s.len() != first.len()) {
            return Err(DatasetError::Misaligned("length"));
        }
        if series.iter().any(|s| s.start != first.start || s.interval_min != first.interval_min) {
            return Err(DatasetError::Misaligned("time axis"));
        }
        let split = chronological_split(first.len(), config.lookback, config.horizon)?;
        let normalizer = Normalizer::fit(series, &split)?;
        Self::build_with(series, events, ckb, graph, config, split, normalizer)
    }

    /// As [`ForecastData::build`] with a given split and normalizer, as
    /// needed when applying a trained model.
    pub fn build_with(
        series: &[SpeedSeries],
        events: &[EventRecord],
        ckb: &CausalKnowledgeBase,
        graph: &RoadGraph,
        config: &DatasetConfig,
        split: DatasetSplit,
        normalizer: Normalizer,
    ) -> Result<Self, DatasetError> {
        let first = series.first().ok_or(DatasetError::Empty)?;
        let fc = &config.features;
        let segment_ids: Vec<String> = series.iter().map(|s| s.segment_id.clone()).collect();
        let mut graph_to_series = vec![None; graph.len()];
        for (i, id) in segment_ids.iter().enumerate() {
            let g = graph.index_of(id).ok_or_else(|| DatasetError::NotInGraph(id.clone()))?;
            graph_to_series[g] = Some(i);
        }
        let neighbors = segment_ids
            .iter()
            .map(|id| {
                let g = graph.index_of(id).expect("checked above");
                graph
                    .top_k(g, config.top_k)
                    .into_iter()
                    .filter_map(|(j, w)| graph_to_series[j].map(|s| (s, w)))
                    .collect()
            })
            .collect();

        let mut inputs = Vec::with_capacity(series.len());
        let mut features = Vec::with_capacity(series.len());
        let mut flags = Vec::with_capacity(series.len());
        for s in series {
            inputs.push(
                s.timestamps()
                    .zip(&s.speeds)
                    .map(|(t, &v)| {
                        let [a, b] = time_channels(t);
                        [normalizer.apply(v), a, b]
                    })
                    .collect(),
            );
            let fv = segment_features(s, events, ckb, fc);
            flags.push(fv.iter().map(CausalFeatureVector::has_events).collect());
            features.push(fv.iter().map(|v| scale_features(v, &normalizer, fc)).collect());
        }
        Ok(Self {
            config: config.clone(),
            segment_ids,
            split,
            normalizer,
            start: first.start,
            interval_min: first.interval_min,
            speeds: series.iter().map(|s| s.speeds.clone()).collect(),
            inputs,
            features,
            flags,
            usable: series.iter().map(|s| s.usable.clone()).collect(),
            neighbors,
            neutral: scale_features(&CausalFeatureVector::neutral(fc), &normalizer, fc),
        })
    }

    pub fn lookback(&self) -> usize {
        self.config.lookback
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn timestamp(&self, step: usize) -> NaiveDateTime {
        self.start + chrono::Duration::minutes(i64::from(self.interval_min) * step as i64)
    }

    /// Windows of one part whose every step is usable, taking every
    /// `stride`-th start, ordered by start then segment.
    pub fn windows(&self, part: Part, stride: usize) -> Vec<WindowRef> {
        let range = match part {
            Part::Train => self.split.train.clone(),
            Part::Validation => self.split.validation.clone(),
            Part::Test => self.split.test.clone(),
        };
        let span = self.lookback() + self.horizon();
        let mut out = Vec::new();
        for start in range.step_by(stride.max(1)) {
            for (segment, usable) in self.usable.iter().enumerate() {
                if usable[start..start + span].iter().all(|&u| u) {
                    out.push(WindowRef { segment, start });
                }
            }
        }
        out
    }

    /// Whether any lookback step of the window is flagged.
    pub fn is_event_window(&self, w: WindowRef) -> bool {
        self.flags[w.segment][w.start..w.start + self.lookback()].iter().any(|&f| f)
    }

    /// Raw km/h targets of a window.
    pub fn targets_kmh(&self, w: WindowRef) -> &[f64] {
        let s = w.start + self.lookback();
        &self.speeds[w.segment][s..s + self.horizon()]
    }

    pub fn batch(&self, windows: &[WindowRef]) -> Batch {
        let (t_len, h, k) = (self.lookback(), self.horizon(), self.config.top_k);
        let b = windows.len();
        let mut target = vec![0.0; t_len * b * D_T];
        let mut nb = vec![0.0; t_len * b * k * D_T];
        let mut present = vec![false; b * k];
        let mut bias = vec![0.0; b * k];
        let mut feats = Vec::with_capacity(b * t_len * D_C);
        let mut flags = Vec::with_capacity(b * t_len);
        let mut y = Vec::with_capacity(b * h);
        let mut has_event = Vec::with_capacity(b);
        for (i, w) in windows.iter().enumerate() {
            for t in 0..t_len {
                let off = (t * b + i) * D_T;
                target[off..off + D_T].copy_from_slice(&self.inputs[w.segment][w.start + t]);
                for (j, &(n, _)) in self.neighbors[w.segment].iter().enumerate() {
                    let off = (t * b * k + i * k + j) * D_T;
                    nb[off..off + D_T].copy_from_slice(&self.inputs[n][w.start + t]);
                }
                feats.extend_from_slice(&self.features[w.segment][w.start + t]);
                flags.push(if self.flags[w.segment][w.start + t] { 1.0 } else { 0.0 });
            }
            for (j, &(_, wgt)) in self.neighbors[w.segment].iter().enumerate() {
                present[i * k + j] = true;
                bias[i * k + j] = log_bias(wgt);
            }
            y.extend(self.targets_kmh(*w).iter().map(|&v| self.normalizer.apply(v)));
            has_event.push(self.is_event_window(*w));
        }
        let arr = |shape: Vec<usize>, data: Vec<f64>| Array::new(shape, data).expect("batch values are finite");
        Batch {
            size: b,
            lookback: t_len,
            horizon: h,
            k,
            target: arr(vec![t_len, b, D_T], target),
            neighbors: (k > 0).then(|| arr(vec![t_len, b * k, D_T], nb)),
            neighbor_present: present,
            log_bias: bias,
            features: arr(vec![b, t_len, D_C], feats),
            flags,
            y: arr(vec![b, h], y),
            has_event,
            windows: windows.to_vec(),
        }
    }
}
