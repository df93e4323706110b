//! Observation rows for one (event type, time period) group.

use std::collections::HashMap;
use std::f64::consts::TAU;

use chrono::{Datelike, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::data::{SpeedSeries, TimePeriodBins};
use crate::events::EventRecord;

/// Names of the confounder columns, in order.
pub const CONFOUNDER_SCHEMA: [&str; 9] = [
    "period_morning_peak",
    "period_evening_peak",
    "period_off_peak",
    "period_night",
    "hour_sin",
    "hour_cos",
    "weekday_sin",
    "weekday_cos",
    "baseline_speed_percentile",
];

/// How the outcome of a unit is summarized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    /// Mean speed difference over the window.
    WindowMean,
    /// Least-squares amplitude of the difference against the decay kernel
    /// `exp(-Δt/λ)`, which estimates the effect at onset.
    DecayProjected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutcomeConfig {
    pub kind: OutcomeKind,
    pub window_min: f64,
    pub decay_min: f64,
    /// How many days either side to search for a comparable event-free day.
    pub max_day_offset: u32,
}

impl Default for OutcomeConfig {
    fn default() -> Self {
        Self {
            kind: OutcomeKind::DecayProjected,
            window_min: 30.0,
            decay_min: 30.0,
            max_day_offset: 7,
        }
    }
}

/// One unit entering propensity estimation and matching.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationRow {
    pub unit_id: u64,
    pub treated: bool,
    pub confounders: Vec<f64>,
    pub outcome: f64,
}

/// Event-free test and outcome computation over a set of series.
pub(crate) struct Panel<'a> {
    pub series: &'a [SpeedSeries],
    pub index: HashMap<&'a str, usize>,
    /// Per segment, sorted `[start, end]` step ranges under event influence.
    busy: Vec<Vec<(usize, usize)>>,
    pub outcome: OutcomeConfig,
}

/// A located unit before confounder assembly.
#[derive(Clone, Debug)]
pub(crate) struct Located {
    pub time: NaiveDateTime,
    pub outcome: f64,
    pub baseline_speed: f64,
}

impl<'a> Panel<'a> {
    pub fn new(series: &'a [SpeedSeries], records: &[EventRecord], outcome: OutcomeConfig) -> Self {
        let index: HashMap<&str, usize> = series.iter().enumerate().map(|(i, s)| (s.segment_id.as_str(), i)).collect();
        let mut busy = vec![Vec::new(); series.len()];
        for r in records {
            if let Some(&s) = index.get(r.segment_id.as_str()) {
                let ser = &series[s];
                let start = ser.ceil_index(r.onset);
                let reach = ((r.expected_duration_min + 3.0 * outcome.decay_min) / f64::from(ser.interval_min)).ceil() as usize;
                busy[s].push((start, start + reach));
            }
        }
        for b in &mut busy {
            b.sort_unstable();
        }
        Self {
            series,
            index,
            busy,
            outcome,
        }
    }

    pub fn window_steps(&self, seg: usize) -> usize {
        ((self.outcome.window_min / f64::from(self.series[seg].interval_min)).round() as usize).max(1)
    }

    pub fn is_quiet(&self, seg: usize, start: usize, len: usize) -> bool {
        let end = start + len - 1;
        let ser = &self.series[seg];
        if end >= ser.len() || !ser.usable[start..=end].iter().all(|&u| u) {
            return false;
        }
        // ranges are sorted by start; only those starting at or before `end` matter
        let b = &self.busy[seg];
        let upto = b.partition_point(|r| r.0 <= end);
        !b[..upto].iter().any(|r| r.1 >= start)
    }

    /// Outcome of a unit starting at step `start`; `active_min` caps the
    /// decay kernel for treated units.
    pub fn locate(&self, seg: usize, start: usize, active_min: Option<f64>) -> Option<Located> {
        let ser = &self.series[seg];
        let len = self.window_steps(seg);
        if start + len > ser.len() || !ser.usable[start..start + len].iter().all(|&u| u) {
            return None;
        }
        let per_day = (1440 / ser.interval_min) as i64;
        let offsets = (1..=i64::from(self.outcome.max_day_offset)).flat_map(|k| [k, -k]);
        let base = offsets
            .map(|k| start as i64 + k * per_day)
            .filter(|&j| j >= 0)
            .map(|j| j as usize)
            .find(|&j| self.is_quiet(seg, j, len))?;
        let dt = f64::from(ser.interval_min);
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..len {
            let d = ser.speeds[start + k] - ser.speeds[base + k];
            let elapsed = k as f64 * dt;
            // a unit kernel makes the projection the plain window mean
            let w = match self.outcome.kind {
                OutcomeKind::WindowMean => 1.0,
                OutcomeKind::DecayProjected if active_min.is_some_and(|a| elapsed > a) => 0.0,
                OutcomeKind::DecayProjected => (-elapsed / self.outcome.decay_min).exp(),
            };
            num += w * d;
            den += w * w;
        }
        Some(Located {
            time: ser.timestamp(start),
            outcome: num / den,
            baseline_speed: ser.speeds[base..base + len].iter().sum::<f64>() / len as f64,
        })
    }
}

/// Confounders of a unit at `time`, with the percentile column left at the
/// raw baseline speed until [`finish_percentiles`] runs.
pub(crate) fn confounders(time: NaiveDateTime, bins: &TimePeriodBins, baseline_speed: f64) -> Vec<f64> {
    let mut x = vec![0.0; CONFOUNDER_SCHEMA.len()];
    x[bins.classify(time).index()] = 1.0;
    let day_frac = f64::from(time.hour() * 60 + time.minute()) / 1440.0;
    x[4] = (TAU * day_frac).sin();
    x[5] = (TAU * day_frac).cos();
    let wd = f64::from(time.weekday().num_days_from_monday()) / 7.0;
    x[6] = (TAU * wd).sin();
    x[7] = (TAU * wd).cos();
    x[8] = baseline_speed;
    x
}

/// Replaces the last confounder column with its mid-rank percentile.
pub(crate) fn finish_percentiles(rows: &mut [ObservationRow]) {
    let col = CONFOUNDER_SCHEMA.len() - 1;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].confounders[col].total_cmp(&rows[b].confounders[col]));
    let n = rows.len() as f64;
    let mut ranks = vec![0.0; rows.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && rows[order[j + 1]].confounders[col] == rows[order[i]].confounders[col] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid / n;
        }
        i = j + 1;
    }
    for (r, p) in rows.iter_mut().zip(ranks) {
        r.confounders[col] = p;
    }
}
