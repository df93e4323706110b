use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Duration, NaiveDateTime, NaiveTime, Timelike};
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::record::{expected_duration_for_score, EventRecord, EventType, RawEventText};
use super::{EventError, Extractor};

const BUILTIN_RUBRIC: &str = include_str!("../../assets/rubric_v1.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeKeywords {
    pub event_type: EventType,
    pub keywords: Vec<String>,
}

/// Score contributions of one keyword. Unset fields contribute nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRule {
    pub keyword: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub danger: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_score: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impact_scope: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_reduction: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreDefaults {
    pub severity: u8,
    pub danger: u8,
    pub duration_score: u8,
    pub impact_scope: u8,
    pub capacity_reduction: f64,
}

/// Keyword tables for both extraction stages.
///
/// Stage 1 picks the event type whose keyword occurs earliest in the text
/// (ties go to the type listed first). Stage 2 takes, for every field, the
/// largest value among all matching score rules, falling back to the
/// defaults when no rule sets the field. Matching is case-insensitive
/// substring search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rubric {
    pub version: String,
    pub type_keywords: Vec<TypeKeywords>,
    pub score_rules: Vec<ScoreRule>,
    pub defaults: ScoreDefaults,
}

impl Rubric {
    /// The rubric shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_RUBRIC).expect("builtin rubric is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, EventError> {
        let mut r: Rubric = serde_json::from_str(text).map_err(|e| EventError::Rubric(e.to_string()))?;
        r.lowercase();
        r.check()?;
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self, EventError> {
        let text = std::fs::read_to_string(path).map_err(|e| EventError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    fn lowercase(&mut self) {
        for t in &mut self.type_keywords {
            for k in &mut t.keywords {
                *k = k.to_lowercase();
            }
        }
        for r in &mut self.score_rules {
            r.keyword = r.keyword.to_lowercase();
        }
    }

    fn check(&self) -> Result<(), EventError> {
        let score_ok = |v: Option<u8>| v.is_none_or(|s| (1..=5).contains(&s));
        for r in &self.score_rules {
            if !(score_ok(r.severity) && score_ok(r.danger) && score_ok(r.duration_score) && score_ok(r.impact_scope)) {
                return Err(EventError::Rubric(format!("rule `{}` has a score outside 1..=5", r.keyword)));
            }
            if r.capacity_reduction.is_some_and(|c| !(0.0..=1.0).contains(&c)) {
                return Err(EventError::Rubric(format!("rule `{}` has capacity outside [0, 1]", r.keyword)));
            }
        }
        let d = self.defaults;
        for s in [d.severity, d.danger, d.duration_score, d.impact_scope] {
            if !(1..=5).contains(&s) {
                return Err(EventError::Rubric("default score outside 1..=5".into()));
            }
        }
        if !(0.0..=1.0).contains(&d.capacity_reduction) {
            return Err(EventError::Rubric("default capacity outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Alias table mapping place names to segment ids, consulted before the
/// `S<digits>` token pattern.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentLookup {
    pub aliases: BTreeMap<String, String>,
}

impl SegmentLookup {
    pub fn load(path: &Path) -> Result<Self, EventError> {
        let text = std::fs::read_to_string(path).map_err(|e| EventError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let aliases: BTreeMap<String, String> =
            serde_json::from_str(&text).map_err(|e| EventError::Rubric(format!("segment lookup: {e}")))?;
        Ok(Self {
            aliases: aliases.into_iter().map(|(k, v)| (k.to_lowercase(), v)).collect(),
        })
    }
}

/// Output of stage 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialRecord {
    pub event_type: EventType,
    pub onset: NaiveDateTime,
    pub segment_id: String,
}

/// Deterministic keyword extractor.
#[derive(Clone, Debug)]
pub struct RuleBasedExtractor {
    rubric: Rubric,
    lookup: SegmentLookup,
    segment_pattern: Regex,
    time_pattern: Regex,
}

impl Default for RuleBasedExtractor {
    fn default() -> Self {
        Self::new(Rubric::builtin(), SegmentLookup::default())
    }
}

impl RuleBasedExtractor {
    pub fn new(rubric: Rubric, lookup: SegmentLookup) -> Self {
        Self {
            rubric,
            lookup,
            segment_pattern: Regex::new(r"\b[Ss](\d+)\b").expect("valid regex"),
            time_pattern: Regex::new(r"\b([01]?\d|2[0-3]):([0-5]\d)\b").expect("valid regex"),
        }
    }

    pub fn rubric(&self) -> &Rubric {
        &self.rubric
    }

    /// Stage 1: event type, onset and location.
    pub fn structurize(&self, raw: &RawEventText) -> Result<PartialRecord, EventError> {
        let text = raw.text.to_lowercase();
        let event_type = self
            .rubric
            .type_keywords
            .iter()
            .enumerate()
            .filter_map(|(rank, t)| {
                t.keywords
                    .iter()
                    .filter_map(|k| text.find(k.as_str()))
                    .min()
                    .map(|pos| (pos, rank, t.event_type))
            })
            .min()
            .map(|(_, _, t)| t)
            .ok_or_else(|| EventError::UnclassifiableEvent {
                event_id: raw.event_id.clone(),
            })?;

        let alias = self
            .lookup
            .aliases
            .iter()
            .filter_map(|(alias, id)| text.find(alias.as_str()).map(|pos| (pos, id)))
            .min()
            .map(|(_, id)| id.clone());
        let segment_id = match alias {
            Some(id) => id,
            None => self
                .segment_pattern
                .captures(&raw.text)
                .map(|c| format!("S{}", &c[1]))
                .ok_or_else(|| EventError::MissingLocation {
                    event_id: raw.event_id.clone(),
                })?,
        };

        Ok(PartialRecord {
            event_type,
            onset: self.onset(raw),
            segment_id,
        })
    }

    /// A clock time in the text sets the onset on the report date; a time
    /// more than an hour after the report time refers to the previous day.
    fn onset(&self, raw: &RawEventText) -> NaiveDateTime {
        let Some(c) = self.time_pattern.captures(&raw.text) else {
            return raw.report_time;
        };
        let (h, m) = (c[1].parse().unwrap_or(0), c[2].parse().unwrap_or(0));
        let Some(time) = NaiveTime::from_hms_opt(h, m, 0) else {
            return raw.report_time;
        };
        let candidate = raw.report_time.date().and_time(time);
        let report_minutes = raw.report_time.hour() * 60 + raw.report_time.minute();
        if h * 60 + m > report_minutes + 60 {
            candidate - Duration::days(1)
        } else {
            candidate
        }
    }

    /// Stage 2: rubric scores.
    pub fn quantify(&self, partial: &PartialRecord, raw: &RawEventText) -> EventRecord {
        let text = raw.text.to_lowercase();
        let matched: Vec<&ScoreRule> = self
            .rubric
            .score_rules
            .iter()
            .filter(|r| text.contains(r.keyword.as_str()))
            .collect();
        let pick = |f: fn(&ScoreRule) -> Option<u8>, default: u8| matched.iter().filter_map(|r| f(r)).max().unwrap_or(default);
        let d = self.rubric.defaults;
        let duration_score = pick(|r| r.duration_score, d.duration_score);
        EventRecord {
            event_id: raw.event_id.clone(),
            event_type: partial.event_type,
            onset: partial.onset,
            segment_id: partial.segment_id.clone(),
            severity: pick(|r| r.severity, d.severity),
            danger: pick(|r| r.danger, d.danger),
            duration_score,
            impact_scope: pick(|r| r.impact_scope, d.impact_scope),
            capacity_reduction: matched
                .iter()
                .filter_map(|r| r.capacity_reduction)
                .fold(None, |acc: Option<f64>, c| Some(acc.map_or(c, |a| a.max(c))))
                .unwrap_or(d.capacity_reduction),
            expected_duration_min: expected_duration_for_score(duration_score),
        }
    }
}

impl Extractor for RuleBasedExtractor {
    fn extract(&self, raw: &RawEventText) -> Result<EventRecord, EventError> {
        let partial = self.structurize(raw)?;
        let record = self.quantify(&partial, raw);
        record.validate()?;
        Ok(record)
    }
}
