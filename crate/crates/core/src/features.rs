//! Per-timestep causal feature vectors built from active events and the
//! knowledge base.
//!
//! An event with onset `t₀` is active at `t` while
//! `0 ≤ t − t₀ ≤ expected_duration + 3λ`. Its contribution to the causal
//! adjustment is
//!
//! ```text
//! exp(−Δt/λ) · (severity/3) · (danger/3) · τ(type, period(t))
//! ```
//!
//! where τ comes from [`CausalKnowledgeBase::query`].
//!
//! ```
//! use causnet::features::temporal_decay;
//!
//! assert_eq!(temporal_decay(0.0, 30.0), 1.0);
//! assert!((temporal_decay(30.0, 30.0) - (-1.0f64).exp()).abs() < 1e-15);
//! ```

use std::io::Write;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::ckb::CausalKnowledgeBase;
use crate::data::timefmt::format_instant;
use crate::data::{SpeedSeries, TimePeriodBins};
use crate::events::EventRecord;

/// Number of causal feature channels.
pub const D_C: usize = 6;
pub const FEATURE_NAMES: [&str; D_C] = [
    "adjustment",
    "event_count",
    "time_since_last",
    "confidence",
    "severity_max",
    "capacity_reduction_sum",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Decay constant λ in minutes.
    pub decay_min: f64,
    pub time_since_cap_min: f64,
    /// Score at which a severity or danger weight equals one.
    pub neutral_score: f64,
    pub time_period_bins: TimePeriodBins,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            decay_min: 30.0,
            time_since_cap_min: 1440.0,
            neutral_score: 3.0,
            time_period_bins: TimePeriodBins::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalFeatureVector {
    pub adjustment: f64,
    pub event_count: f64,
    pub time_since_last: f64,
    pub confidence: f64,
    pub severity_max: f64,
    pub capacity_reduction_sum: f64,
}

impl CausalFeatureVector {
    /// The vector of a step with no active events.
    pub fn neutral(config: &FeatureConfig) -> Self {
        Self {
            adjustment: 0.0,
            event_count: 0.0,
            time_since_last: config.time_since_cap_min,
            confidence: 0.0,
            severity_max: 0.0,
            capacity_reduction_sum: 0.0,
        }
    }

    pub fn to_array(&self) -> [f64; D_C] {
        [
            self.adjustment,
            self.event_count,
            self.time_since_last,
            self.confidence,
            self.severity_max,
            self.capacity_reduction_sum,
        ]
    }

    pub fn has_events(&self) -> bool {
        self.event_count > 0.0
    }
}

/// An event together with the minutes elapsed since its onset.
#[derive(Clone, Copy, Debug)]
pub struct ActiveEvent<'a> {
    pub record: &'a EventRecord,
    pub elapsed_min: f64,
}

pub fn temporal_decay(elapsed_min: f64, decay_min: f64) -> f64 {
    (-elapsed_min / decay_min).exp()
}

/// `(severity/3, danger/3)` under the default neutral score.
pub fn event_weights(record: &EventRecord) -> (f64, f64) {
    event_weights_with(record, FeatureConfig::default().neutral_score)
}

pub fn event_weights_with(record: &EventRecord, neutral_score: f64) -> (f64, f64) {
    (
        f64::from(record.severity) / neutral_score,
        f64::from(record.danger) / neutral_score,
    )
}

fn minutes_between(from: NaiveDateTime, to: NaiveDateTime) -> f64 {
    (to - from).num_seconds() as f64 / 60.0
}

/// Events from `events` active at `t`.
pub fn active_events<'a>(events: &'a [EventRecord], t: NaiveDateTime, config: &FeatureConfig) -> Vec<ActiveEvent<'a>> {
    events
        .iter()
        .filter_map(|r| {
            let elapsed = minutes_between(r.onset, t);
            (elapsed >= 0.0 && elapsed <= r.expected_duration_min + 3.0 * config.decay_min).then_some(ActiveEvent {
                record: r,
                elapsed_min: elapsed,
            })
        })
        .collect()
}

/// Sum of decayed, score-weighted knowledge-base effects, km/h.
pub fn causal_adjustment(active: &[ActiveEvent<'_>], ckb: &CausalKnowledgeBase, t: NaiveDateTime, config: &FeatureConfig) -> f64 {
    let period = config.time_period_bins.classify(t);
    active
        .iter()
        .map(|a| {
            let (tau, _) = ckb.query(a.record.event_type, period);
            let (ws, wd) = event_weights_with(a.record, config.neutral_score);
            temporal_decay(a.elapsed_min, config.decay_min) * ws * wd * tau
        })
        .sum()
}

/// Feature vector at `t` for one segment's events.
pub fn feature_vector(events: &[EventRecord], ckb: &CausalKnowledgeBase, t: NaiveDateTime, config: &FeatureConfig) -> CausalFeatureVector {
    let active = active_events(events, t, config);
    let period = config.time_period_bins.classify(t);
    let since_last = events
        .iter()
        .map(|r| minutes_between(r.onset, t))
        .filter(|m| *m >= 0.0)
        .fold(f64::INFINITY, f64::min)
        .min(config.time_since_cap_min);
    CausalFeatureVector {
        adjustment: causal_adjustment(&active, ckb, t, config),
        event_count: active.len() as f64,
        time_since_last: since_last,
        confidence: active
            .iter()
            .map(|a| ckb.query(a.record.event_type, period).1)
            .fold(0.0, f64::max),
        severity_max: active.iter().map(|a| f64::from(a.record.severity)).fold(0.0, f64::max),
        capacity_reduction_sum: active.iter().map(|a| a.record.capacity_reduction).sum(),
    }
}

/// One feature vector per instant in `window`.
pub fn build_feature_sequence(
    events: &[EventRecord],
    ckb: &CausalKnowledgeBase,
    window: &[NaiveDateTime],
    config: &FeatureConfig,
) -> Vec<CausalFeatureVector> {
    window.iter().map(|&t| feature_vector(events, ckb, t, config)).collect()
}

/// Feature vectors for every step of `series`, using only events on its
/// segment.
pub fn segment_features(
    series: &SpeedSeries,
    events: &[EventRecord],
    ckb: &CausalKnowledgeBase,
    config: &FeatureConfig,
) -> Vec<CausalFeatureVector> {
    let mut own: Vec<EventRecord> = events
        .iter()
        .filter(|r| r.segment_id == series.segment_id)
        .cloned()
        .collect();
    own.sort_by_key(|r| r.onset);
    let horizon = own
        .iter()
        .map(|r| r.expected_duration_min + 3.0 * config.decay_min)
        .fold(config.time_since_cap_min, f64::max);
    // Events older than the horizon are neither active nor within the
    // time-since cap, so they cannot change the vector.
    let mut lo = 0;
    let mut hi = 0;
    series
        .timestamps()
        .map(|t| {
            while hi < own.len() && own[hi].onset <= t {
                hi += 1;
            }
            while lo < hi && minutes_between(own[lo].onset, t) > horizon {
                lo += 1;
            }
            feature_vector(&own[lo..hi], ckb, t, config)
        })
        .collect()
}

/// Writes `segment_id,timestamp,<feature names>` rows.
pub fn write_feature_csv(
    writer: impl Write,
    rows: impl IntoIterator<Item = (String, NaiveDateTime, CausalFeatureVector)>,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["segment_id", "timestamp"];
    header.extend(FEATURE_NAMES);
    w.write_record(&header).map_err(std::io::Error::other)?;
    for (seg, t, v) in rows {
        let mut rec = vec![seg, format_instant(t)];
        // adding zero turns a negative zero into a plain one
        rec.extend(v.to_array().iter().map(|x| (x + 0.0).to_string()));
        w.write_record(&rec).map_err(std::io::Error::other)?;
    }
    w.flush()
}
