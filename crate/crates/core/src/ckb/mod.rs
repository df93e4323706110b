//! Causal knowledge base: per-group average treatment effects estimated by
//! propensity-score matching.
//!
//! For every (event type, time period) group, treated units are events of
//! that type starting in that period and control units are event-free slots
//! of the same period. Each unit's outcome compares the speeds after its
//! start with the same clock times on the nearest comparable event-free
//! day. A logistic propensity model over [`CONFOUNDER_SCHEMA`] drives greedy
//! caliper matching on the logit scale; the mean matched-pair difference is
//! the group's effect.

mod ate;
mod matching;
mod observe;
mod propensity;

pub use ate::{estimate_ate, AteEstimate};
pub use matching::{match_pairs, match_pairs_brute_force, MatchUnit, MatchedPair};
pub use observe::{ObservationRow, OutcomeConfig, OutcomeKind, CONFOUNDER_SCHEMA};
pub use propensity::{
    coefficient_standard_errors, fit_propensity, fit_propensity_or_ridge, propensity_score, LogitModel, Standardizer,
    FALLBACK_RIDGE,
};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{SpeedSeries, TimePeriod, TimePeriodBins};
use crate::events::{EventRecord, EventType};
use observe::{confounders, finish_percentiles, Panel};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkbError {
    #[error("propensity fit needs at least 20 rows with both groups present (rows {rows}, treated {treated})")]
    InsufficientRows { rows: usize, treated: usize },
    #[error("perfect separation: coefficient norm {coefficient_norm:.1} diverges; a ridge penalty is required")]
    Separation { coefficient_norm: f64 },
    #[error("no matches within caliper {caliper:.3e} ({treated} treated, {controls} controls); widen the caliper")]
    NoMatches { caliper: f64, treated: usize, controls: usize },
    #[error("confounder vector has length {got}, schema expects {expected}")]
    Schema { expected: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {reason}")]
    File { path: String, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CkbConfig {
    /// Caliper as a multiple of the standard deviation of the logit score.
    pub caliper: f64,
    pub min_matches: usize,
    pub outcome: OutcomeConfig,
    /// Spacing, in steps, of candidate control slots.
    pub control_stride: usize,
    /// Controls per group are subsampled to at most this many.
    pub max_controls: usize,
    pub seed: u64,
    pub time_period_bins: TimePeriodBins,
}

impl Default for CkbConfig {
    fn default() -> Self {
        Self {
            caliper: 0.2,
            min_matches: 30,
            outcome: OutcomeConfig::default(),
            control_stride: 3,
            max_controls: 20_000,
            seed: 0,
            time_period_bins: TimePeriodBins::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteEntry {
    pub event_type: EventType,
    pub time_period: TimePeriod,
    pub ate: f64,
    pub standard_error: f64,
    pub n_matched: usize,
    pub p_value: f64,
}

impl AteEntry {
    /// Effect confidence `1 / (1 + SE)`.
    pub fn confidence(&self) -> f64 {
        1.0 / (1.0 + self.standard_error)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalKnowledgeBase {
    pub schema_version: u32,
    pub caliper: f64,
    pub confounder_schema: Vec<String>,
    #[serde(default)]
    pub min_matches: usize,
    #[serde(default)]
    pub outcome: OutcomeConfig,
    #[serde(default)]
    pub data_hash: String,
    pub entries: Vec<AteEntry>,
}

impl CausalKnowledgeBase {
    pub fn new(entries: Vec<AteEntry>) -> Result<Self, CkbError> {
        let mut ckb = Self {
            schema_version: SCHEMA_VERSION,
            caliper: CkbConfig::default().caliper,
            confounder_schema: CONFOUNDER_SCHEMA.iter().map(|s| s.to_string()).collect(),
            min_matches: CkbConfig::default().min_matches,
            outcome: OutcomeConfig::default(),
            data_hash: String::new(),
            entries,
        };
        ckb.normalize()?;
        Ok(ckb)
    }

    fn normalize(&mut self) -> Result<(), CkbError> {
        self.entries.sort_by_key(|e| (e.event_type, e.time_period));
        if let Some(w) = self
            .entries
            .windows(2)
            .find(|w| (w[0].event_type, w[0].time_period) == (w[1].event_type, w[1].time_period))
        {
            return Err(CkbError::Config(format!(
                "duplicate entry for {} x {}",
                w[0].event_type, w[0].time_period
            )));
        }
        for e in &self.entries {
            let ok = e.ate.is_finite()
                && e.standard_error >= 0.0
                && e.n_matched >= 1
                && (0.0..=1.0).contains(&e.p_value);
            if !ok {
                return Err(CkbError::Config(format!("invalid entry for {} x {}", e.event_type, e.time_period)));
            }
        }
        Ok(())
    }

    pub fn entry(&self, event_type: EventType, period: TimePeriod) -> Option<&AteEntry> {
        self.entries
            .iter()
            .find(|e| e.event_type == event_type && e.time_period == period)
    }

    /// Stored effect and confidence; an absent group yields the neutral
    /// prior `(0, 0)`.
    pub fn query(&self, event_type: EventType, period: TimePeriod) -> (f64, f64) {
        self.entry(event_type, period).map_or((0.0, 0.0), |e| (e.ate, e.confidence()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("knowledge base serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CkbError> {
        let mut ckb: Self = serde_json::from_str(text).map_err(|e| CkbError::Config(format!("knowledge base: {e}")))?;
        if ckb.schema_version != SCHEMA_VERSION {
            return Err(CkbError::Config(format!("unsupported schema_version {}", ckb.schema_version)));
        }
        ckb.normalize()?;
        Ok(ckb)
    }

    pub fn save(&self, path: &Path) -> Result<(), CkbError> {
        std::fs::write(path, self.to_json()).map_err(|e| CkbError::File {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CkbError> {
        let text = std::fs::read_to_string(path).map_err(|e| CkbError::File {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    /// Grid of effects with significance stars and standard errors, one
    /// row per event type and one column per time period.
    pub fn report(&self) -> String {
        let width = 18;
        let mut out = format!("{:<16}", "Event Type");
        for p in TimePeriod::ALL {
            let _ = write!(out, "{:>width$}", p.label());
        }
        out.push('\n');
        for t in EventType::ALL {
            let _ = write!(out, "{:<16}", t.label());
            for p in TimePeriod::ALL {
                let cell = self.entry(t, p).map_or_else(|| "n/a".to_string(), format_cell);
                let _ = write!(out, "{cell:>width$}");
            }
            out.push('\n');
        }
        out.push_str("Standard errors in parentheses. *** p < 0.001, ** p < 0.01, * p < 0.05.\n");
        out
    }
}

pub fn stars(p_value: f64) -> &'static str {
    if p_value < 0.001 {
        "***"
    } else if p_value < 0.01 {
        "**"
    } else if p_value < 0.05 {
        "*"
    } else {
        ""
    }
}

/// `ate` and `se` to two decimals, e.g. `-10.06*** (0.51)`.
pub fn format_cell(e: &AteEntry) -> String {
    format!("{:.2}{} ({:.2})", e.ate, stars(e.p_value), e.standard_error)
}

/// Why a group has no entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Omission {
    pub event_type: EventType,
    pub time_period: TimePeriod,
    pub treated: usize,
    pub matched: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub omitted: Vec<Omission>,
    /// Records naming a segment without speed data.
    pub unknown_segments: Vec<String>,
    /// Treated units dropped because no outcome could be computed.
    pub unlocated: usize,
    /// Observation rows, treated plus candidate controls, of every group
    /// that reached estimation.
    #[serde(default)]
    pub group_rows: Vec<(EventType, TimePeriod, usize)>,
}

impl BuildReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for o in &self.omitted {
            let _ = writeln!(
                s,
                "omitted {} x {}: {} ({} treated, {} matched)",
                o.event_type, o.time_period, o.reason, o.treated, o.matched
            );
        }
        if !self.unknown_segments.is_empty() {
            let _ = writeln!(s, "{} records reference unknown segments", self.unknown_segments.len());
        }
        s
    }
}

/// Everything computed for one group, exposed for diagnostics.
#[derive(Clone, Debug)]
pub struct GroupEstimate {
    pub rows: Vec<ObservationRow>,
    pub model: LogitModel,
    pub caliper: f64,
    pub pairs: Vec<MatchedPair>,
    pub estimate: AteEstimate,
}

/// Propensity fit, matching and effect estimate on prepared rows.
pub fn estimate_group(rows: Vec<ObservationRow>, caliper_multiplier: f64) -> Result<GroupEstimate, CkbError> {
    let width = rows.first().map_or(0, |r| r.confounders.len());
    if let Some(r) = rows.iter().find(|r| r.confounders.len() != width) {
        return Err(CkbError::Schema {
            expected: width,
            got: r.confounders.len(),
        });
    }
    let raw: Vec<Vec<f64>> = rows.iter().map(|r| r.confounders.clone()).collect();
    let standardizer = Standardizer::fit(&raw);
    let x: Vec<Vec<f64>> = raw.iter().map(|r| standardizer.apply(r)).collect();
    let treated: Vec<bool> = rows.iter().map(|r| r.treated).collect();
    let model = fit_propensity_or_ridge(&x, &treated)?;
    let logits: Vec<f64> = x.iter().map(|r| model.linear(r)).collect();
    let mean = logits.iter().sum::<f64>() / logits.len() as f64;
    let sd = (logits.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (logits.len() - 1) as f64).sqrt();
    // A constant score means every control is equally comparable.
    let caliper = (caliper_multiplier * sd).max(1e-9);
    let units: Vec<MatchUnit> = rows
        .iter()
        .zip(&logits)
        .map(|(r, &s)| MatchUnit {
            unit_id: r.unit_id,
            treated: r.treated,
            score: s,
        })
        .collect();
    let pairs = match_pairs(&units, caliper)?;
    let by_id: HashMap<u64, f64> = rows.iter().map(|r| (r.unit_id, r.outcome)).collect();
    let outcomes: Vec<(f64, f64)> = pairs.iter().map(|p| (by_id[&p.treated], by_id[&p.control])).collect();
    let estimate = estimate_ate(&outcomes)?;
    Ok(GroupEstimate {
        rows,
        model,
        caliper,
        pairs,
        estimate,
    })
}

/// Absolute standardized mean difference of each confounder between the
/// matched treated and control units.
pub fn standardized_mean_differences(rows: &[ObservationRow], pairs: &[MatchedPair]) -> Vec<f64> {
    let by_id: HashMap<u64, &ObservationRow> = rows.iter().map(|r| (r.unit_id, r)).collect();
    let width = rows.first().map_or(0, |r| r.confounders.len());
    let stats = |ids: &mut dyn Iterator<Item = u64>, c: usize| {
        let v: Vec<f64> = ids.map(|id| by_id[&id].confounders[c]).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len().max(2) - 1) as f64;
        (m, var)
    };
    (0..width)
        .map(|c| {
            let (mt, vt) = stats(&mut pairs.iter().map(|p| p.treated), c);
            let (mc, vc) = stats(&mut pairs.iter().map(|p| p.control), c);
            let pooled = ((vt + vc) / 2.0).sqrt();
            if pooled == 0.0 {
                0.0
            } else {
                (mt - mc).abs() / pooled
            }
        })
        .collect()
}

/// SHA-256 over the records and speeds, identifying the build input.
pub fn data_hash(records: &[EventRecord], series: &[SpeedSeries]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(serde_json::to_vec(r).expect("record serializes"));
    }
    for s in series {
        h.update(s.segment_id.as_bytes());
        h.update(crate::data::timefmt::format_instant(s.start).as_bytes());
        h.update(s.interval_min.to_le_bytes());
        for v in &s.speeds {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Estimates one entry per (event type, time period) group with at least
/// `min_matches` matched pairs.
pub fn build_ckb(
    records: &[EventRecord],
    series: &[SpeedSeries],
    config: &CkbConfig,
) -> Result<(CausalKnowledgeBase, BuildReport), CkbError> {
    if records.is_empty() {
        return Err(CkbError::Empty("no event records".into()));
    }
    if series.is_empty() {
        return Err(CkbError::Empty("no speed series".into()));
    }
    if config.min_matches < 2 || !(config.caliper > 0.0) || config.control_stride == 0 {
        return Err(CkbError::Config(
            "min_matches must be >= 2, caliper > 0 and control_stride > 0".into(),
        ));
    }
    let bins = &config.time_period_bins;
    let panel = Panel::new(series, records, config.outcome);
    let mut report = BuildReport::default();

    // Treated units grouped by key.
    let mut treated: HashMap<(EventType, TimePeriod), Vec<(usize, observe::Located)>> = HashMap::new();
    for r in records {
        let Some(&seg) = panel.index.get(r.segment_id.as_str()) else {
            report.unknown_segments.push(r.event_id.clone());
            continue;
        };
        let start = series[seg].ceil_index(r.onset);
        let period = bins.classify(series[seg].timestamp(start.min(series[seg].len().saturating_sub(1))));
        match panel.locate(seg, start, Some(r.expected_duration_min)) {
            Some(loc) => treated.entry((r.event_type, period)).or_default().push((seg, loc)),
            None => report.unlocated += 1,
        }
    }

    // Candidate controls per period.
    let mut controls: HashMap<TimePeriod, Vec<observe::Located>> = HashMap::new();
    for (seg, s) in series.iter().enumerate() {
        let len = panel.window_steps(seg);
        for i in (0..s.len()).step_by(config.control_stride) {
            if !panel.is_quiet(seg, i, len) {
                continue;
            }
            if let Some(loc) = panel.locate(seg, i, None) {
                controls.entry(bins.classify(loc.time)).or_default().push(loc);
            }
        }
    }

    let mut entries = Vec::new();
    for (gi, (t, p)) in EventType::ALL
        .iter()
        .flat_map(|&t| TimePeriod::ALL.iter().map(move |&p| (t, p)))
        .enumerate()
    {
        let units = treated.remove(&(t, p)).unwrap_or_default();
        let omit = |reason: String, matched: usize| Omission {
            event_type: t,
            time_period: p,
            treated: units.len(),
            matched,
            reason,
        };
        if units.is_empty() {
            report.omitted.push(omit("no events".into(), 0));
            continue;
        }
        let mut pool: Vec<&observe::Located> = controls.get(&p).map(|v| v.iter().collect()).unwrap_or_default();
        if pool.len() > config.max_controls {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (gi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            pool.shuffle(&mut rng);
            pool.truncate(config.max_controls);
        }
        let mut rows: Vec<ObservationRow> = units
            .iter()
            .map(|(_, l)| (true, l))
            .chain(pool.into_iter().map(|l| (false, l)))
            .enumerate()
            .map(|(id, (is_treated, l))| ObservationRow {
                unit_id: id as u64,
                treated: is_treated,
                confounders: confounders(l.time, bins, l.baseline_speed),
                outcome: l.outcome,
            })
            .collect();
        finish_percentiles(&mut rows);
        report.group_rows.push((t, p, rows.len()));
        match estimate_group(rows, config.caliper) {
            Ok(g) if g.estimate.n_matched >= config.min_matches => entries.push(AteEntry {
                event_type: t,
                time_period: p,
                ate: g.estimate.ate,
                standard_error: g.estimate.standard_error,
                n_matched: g.estimate.n_matched,
                p_value: g.estimate.p_value,
            }),
            Ok(g) => report.omitted.push(omit(
                format!("fewer than {} matched pairs", config.min_matches),
                g.estimate.n_matched,
            )),
            Err(e) => report.omitted.push(omit(e.to_string(), 0)),
        }
    }

    let mut ckb = CausalKnowledgeBase::new(entries)?;
    ckb.caliper = config.caliper;
    ckb.min_matches = config.min_matches;
    ckb.outcome = config.outcome;
    ckb.data_hash = data_hash(records, series);
    Ok((ckb, report))
}
