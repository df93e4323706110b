//! Generator for speed panels with injected, known event effects.
//!
//! Each segment's speed is
//!
//! ```text
//! speed(t) = scale_i · profile(t) + ar1(t) + Σ_events τ*·exp(−Δt/λ*)   for 0 ≤ Δt ≤ duration
//! ```
//!
//! clamped to `[0, 200]`. The AR(1) coefficient is 0.8 and `noise_std` is the
//! stationary standard deviation of the noise process.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::period::{TimePeriod, TimePeriodBins};
use super::series::{write_speed_csv, SpeedSeries, MAX_SPEED_KMH};
use super::timefmt::format_instant;
use super::DataError;
use crate::events::{expected_duration_for_score, write_jsonl, EventRecord, EventType, RawEventText};
use crate::graph::{ring_lattice_edges, write_edge_csv, EdgeRow};

pub const AR_COEFFICIENT: f64 = 0.8;

/// True effect for one (event type, time period) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectedEffect {
    pub event_type: EventType,
    pub time_period: TimePeriod,
    /// km/h at onset.
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub segment_count: usize,
    pub timestep_minutes: u32,
    pub horizon_days: u32,
    /// 24 hourly mean speeds, linearly interpolated within each hour.
    pub base_daily_profile: Vec<f64>,
    pub noise_std: f64,
    pub injected_effects: Vec<InjectedEffect>,
    /// Events per segment-day.
    pub event_rate: f64,
    /// Decay constant λ* in minutes.
    pub decay_constant_min: f64,
    pub random_seed: u64,
    #[serde(default = "default_start")]
    pub start: NaiveDateTime,
    /// Per-segment multiplicative spread of the profile, `scale_i ∈ [1-s, 1+s]`.
    #[serde(default)]
    pub segment_speed_spread: f64,
    #[serde(default)]
    pub time_period_bins: TimePeriodBins,
}

fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 3, 4).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

/// A typical urban weekday profile, km/h.
pub const URBAN_PROFILE: [f64; 24] = [
    62.0, 64.0, 65.0, 65.0, 63.0, 58.0, 50.0, 38.0, 33.0, 37.0, 44.0, 47.0, //
    46.0, 47.0, 46.0, 44.0, 40.0, 34.0, 31.0, 36.0, 44.0, 50.0, 55.0, 59.0,
];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Config(m));
        if self.segment_count == 0 {
            return fail("segment_count must be positive".into());
        }
        if self.timestep_minutes == 0 || 1440 % self.timestep_minutes != 0 {
            return fail(format!("timestep_minutes {} must divide a day", self.timestep_minutes));
        }
        if self.horizon_days == 0 {
            return fail("horizon_days must be positive".into());
        }
        if self.base_daily_profile.len() != 24
            || self
                .base_daily_profile
                .iter()
                .any(|v| !(v.is_finite() && *v >= 0.0 && *v <= MAX_SPEED_KMH))
        {
            return fail("base_daily_profile needs 24 speeds in [0, 200]".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std {} must be >= 0", self.noise_std));
        }
        if !(self.event_rate >= 0.0 && self.event_rate.is_finite()) {
            return fail(format!("event_rate {} must be >= 0", self.event_rate));
        }
        if !(self.decay_constant_min > 0.0 && self.decay_constant_min.is_finite()) {
            return fail(format!("decay_constant_min {} must be > 0", self.decay_constant_min));
        }
        if !(0.0..1.0).contains(&self.segment_speed_spread) {
            return fail("segment_speed_spread must be in [0, 1)".into());
        }
        let mut seen = HashSet::new();
        for e in &self.injected_effects {
            if !e.tau.is_finite() {
                return fail("injected effect must be finite".into());
            }
            if !seen.insert((e.event_type, e.time_period)) {
                return fail(format!("duplicate effect for {} x {}", e.event_type, e.time_period));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon_days * 1440 / self.timestep_minutes) as usize
    }

    /// Profile speed at a minute of the day, before per-segment scaling.
    pub fn profile_at(&self, minute_of_day: u32) -> f64 {
        let h = (minute_of_day / 60) as usize % 24;
        let frac = f64::from(minute_of_day % 60) / 60.0;
        let a = self.base_daily_profile[h];
        let b = self.base_daily_profile[(h + 1) % 24];
        a + (b - a) * frac
    }

    pub fn effect_for(&self, event_type: EventType, period: TimePeriod) -> f64 {
        self.injected_effects
            .iter()
            .find(|e| e.event_type == event_type && e.time_period == period)
            .map_or(0.0, |e| e.tau)
    }
}

/// Ground truth for one injected event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub event_id: String,
    #[serde(rename = "type")]
    pub event_type: EventType,
    pub onset: NaiveDateTime,
    pub duration_min: f64,
    pub tau_true: f64,
    pub time_period: TimePeriod,
    pub segment_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub series: Vec<SpeedSeries>,
    pub events: Vec<EventRecord>,
    pub raw_events: Vec<RawEventText>,
    pub ledger: Vec<LedgerEntry>,
    pub edges: Vec<EdgeRow>,
    /// Per-segment profile scale factors.
    pub segment_scales: Vec<f64>,
}

/// Severity assigned to an event with true effect `tau`: one point per
/// 5 km/h of magnitude, starting at 1 and capped at 5.
pub fn severity_for_effect(tau: f64) -> u8 {
    (1.0 + (tau.abs() / 5.0).floor()).min(5.0) as u8
}

/// Capacity reduction assigned to an event with true effect `tau`.
pub fn capacity_for_effect(tau: f64) -> f64 {
    (tau.abs() / 25.0).min(1.0)
}

fn raw_phrase(t: EventType) -> &'static str {
    match t {
        EventType::Accident => "accident",
        EventType::Construction => "roadwork",
        EventType::Hazard => "debris hazard",
        EventType::RoadClosure => "road closed",
        EventType::TrafficControl => "traffic control",
    }
}

pub fn segment_id(index: usize) -> String {
    format!("S{}", index + 1)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.random_seed);
    let steps = spec.steps();
    let dt = spec.timestep_minutes;
    let lambda = spec.decay_constant_min;
    let ids: Vec<String> = (0..spec.segment_count).map(segment_id).collect();
    let scales: Vec<f64> = (0..spec.segment_count)
        .map(|_| 1.0 + spec.segment_speed_spread * rng.gen_range(-1.0..=1.0))
        .collect();

    // keys events are drawn from; with no injected effects every group is null
    let keys: Vec<(EventType, TimePeriod)> = if spec.injected_effects.is_empty() {
        EventType::ALL
            .iter()
            .flat_map(|&t| TimePeriod::ALL.iter().map(move |&p| (t, p)))
            .collect()
    } else {
        spec.injected_effects.iter().map(|e| (e.event_type, e.time_period)).collect()
    };
    let period_minutes: Vec<Vec<u32>> = TimePeriod::ALL
        .iter()
        .map(|&p| {
            spec.time_period_bins
                .minutes_of(p)
                .into_iter()
                .filter(|m| m % dt == 0)
                .collect()
        })
        .collect();

    let poisson = (spec.event_rate > 0.0)
        .then(|| Poisson::new(spec.event_rate).map_err(|e| DataError::Config(e.to_string())))
        .transpose()?;

    let mut events = Vec::new();
    let mut ledger = Vec::new();
    let mut raw_events = Vec::new();
    let mut per_segment: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); spec.segment_count];
    for (seg, seg_events) in per_segment.iter_mut().enumerate() {
        let mut busy: Vec<(i64, i64)> = Vec::new();
        for day in 0..spec.horizon_days {
            let count = poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
            for _ in 0..count {
                let (event_type, period) = keys[rng.gen_range(0..keys.len())];
                let minutes = &period_minutes[period.index()];
                let minute = minutes[rng.gen_range(0..minutes.len())];
                let duration_score: u8 = rng.gen_range(1..=5);
                let onset_min = i64::from(day) * 1440 + i64::from(minute);
                let duration = expected_duration_for_score(duration_score);
                let reach = onset_min + (duration + 3.0 * lambda).ceil() as i64;
                let onset_idx = (onset_min / i64::from(dt)) as usize;
                if onset_idx >= steps || busy.iter().any(|&(a, b)| onset_min <= b && a <= reach) {
                    continue;
                }
                busy.push((onset_min, reach));
                let tau = spec.effect_for(event_type, period);
                let onset = spec.start + Duration::minutes(onset_min);
                let event_id = format!("ev-{:06}", events.len() + 1);
                let severity = severity_for_effect(tau);
                events.push(EventRecord {
                    event_id: event_id.clone(),
                    event_type,
                    onset,
                    segment_id: ids[seg].clone(),
                    severity,
                    danger: severity,
                    duration_score,
                    impact_scope: severity,
                    capacity_reduction: capacity_for_effect(tau),
                    expected_duration_min: duration,
                });
                ledger.push(LedgerEntry {
                    event_id: event_id.clone(),
                    event_type,
                    onset,
                    duration_min: duration,
                    tau_true: tau,
                    time_period: period,
                    segment_id: ids[seg].clone(),
                });
                raw_events.push(RawEventText {
                    event_id,
                    text: format!(
                        "{} on segment {} at {}",
                        raw_phrase(event_type),
                        ids[seg],
                        onset.format("%H:%M")
                    ),
                    report_time: onset,
                    source: "synthetic".into(),
                });
                seg_events.push((onset_idx, duration, tau));
            }
        }
    }

    let innovation = spec.noise_std * (1.0 - AR_COEFFICIENT * AR_COEFFICIENT).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut series = Vec::with_capacity(spec.segment_count);
    for seg in 0..spec.segment_count {
        let mut speeds = Vec::with_capacity(steps);
        let mut noise = spec.noise_std * normal.sample(&mut rng);
        for i in 0..steps {
            if i > 0 {
                noise = AR_COEFFICIENT * noise + innovation * normal.sample(&mut rng);
            }
            let minute = (i as u32 * dt) % 1440;
            speeds.push(scales[seg] * spec.profile_at(minute) + noise);
        }
        for &(onset_idx, duration, tau) in &per_segment[seg] {
            let active_steps = (duration / f64::from(dt)).floor() as usize;
            for k in 0..=active_steps {
                let Some(v) = speeds.get_mut(onset_idx + k) else { break };
                let elapsed = (k as u32 * dt) as f64;
                *v += tau * (-elapsed / lambda).exp();
            }
        }
        for v in &mut speeds {
            *v = v.clamp(0.0, MAX_SPEED_KMH);
        }
        series.push(SpeedSeries::new(ids[seg].clone(), spec.start, dt, speeds)?);
    }

    Ok(SyntheticDataset {
        spec: spec.clone(),
        series,
        events,
        raw_events,
        ledger,
        edges: ring_lattice_edges(&ids),
        segment_scales: scales,
    })
}

impl SyntheticDataset {
    /// Writes `speeds.csv`, `events.jsonl`, `raw_events.jsonl`,
    /// `ledger.json`, `edges.csv` and `spec.json` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), DataError> {
        let io = |path: &Path| {
            let p = path.display().to_string();
            move |e: std::io::Error| DataError::Io { path: p, source: e }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let speeds = dir.join("speeds.csv");
        write_speed_csv(fs::File::create(&speeds).map_err(io(&speeds))?, &self.series)?;
        let events = dir.join("events.jsonl");
        write_jsonl(fs::File::create(&events).map_err(io(&events))?, &self.events).map_err(io(&events))?;
        let raw = dir.join("raw_events.jsonl");
        write_jsonl(fs::File::create(&raw).map_err(io(&raw))?, &self.raw_events).map_err(io(&raw))?;
        let ledger = dir.join("ledger.json");
        fs::write(&ledger, serde_json::to_string_pretty(&self.ledger).expect("ledger serializes") + "\n")
            .map_err(io(&ledger))?;
        let edges = dir.join("edges.csv");
        write_edge_csv(fs::File::create(&edges).map_err(io(&edges))?, &self.edges).map_err(io(&edges))?;
        let spec = dir.join("spec.json");
        fs::write(&spec, serde_json::to_string_pretty(&self.spec).expect("spec serializes") + "\n")
            .map_err(io(&spec))?;
        Ok(())
    }
}

/// Human-readable onset for logs.
pub fn describe(entry: &LedgerEntry) -> String {
    format!(
        "{} {} on {} at {} (tau {:+.2})",
        entry.event_id,
        entry.event_type,
        entry.segment_id,
        format_instant(entry.onset),
        entry.tau_true
    )
}
