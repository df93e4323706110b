use std::fmt;
use std::str::FromStr;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::EventError;

/// Closed set of event categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventType {
    Accident,
    Construction,
    Hazard,
    RoadClosure,
    TrafficControl,
}

impl EventType {
    pub const ALL: [EventType; 5] = [
        EventType::Accident,
        EventType::Construction,
        EventType::Hazard,
        EventType::RoadClosure,
        EventType::TrafficControl,
    ];

    /// Row label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            EventType::Accident => "Accident",
            EventType::Construction => "Construction",
            EventType::Hazard => "Hazard",
            EventType::RoadClosure => "Road Closure",
            EventType::TrafficControl => "Traffic Control",
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventType::Accident => "Accident",
            EventType::Construction => "Construction",
            EventType::Hazard => "Hazard",
            EventType::RoadClosure => "RoadClosure",
            EventType::TrafficControl => "TrafficControl",
        })
    }
}

impl FromStr for EventType {
    type Err = EventError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "accident" => Ok(EventType::Accident),
            "construction" => Ok(EventType::Construction),
            "hazard" => Ok(EventType::Hazard),
            "roadclosure" => Ok(EventType::RoadClosure),
            "trafficcontrol" => Ok(EventType::TrafficControl),
            _ => Err(EventError::UnknownEventType(s.to_string())),
        }
    }
}

/// Free-text event report as received from a feed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawEventText {
    pub event_id: String,
    pub text: String,
    pub report_time: NaiveDateTime,
    pub source: String,
}

/// Structured and quantified event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: String,
    pub event_type: EventType,
    pub onset: NaiveDateTime,
    pub segment_id: String,
    pub severity: u8,
    pub danger: u8,
    pub duration_score: u8,
    pub impact_scope: u8,
    pub capacity_reduction: f64,
    pub expected_duration_min: f64,
}

impl EventRecord {
    /// Checks score ranges, capacity fraction and duration.
    pub fn validate(&self) -> Result<(), EventError> {
        let scores = [
            ("severity", self.severity),
            ("danger", self.danger),
            ("duration_score", self.duration_score),
            ("impact_scope", self.impact_scope),
        ];
        for (field, v) in scores {
            if !(1..=5).contains(&v) {
                return Err(EventError::InvalidRecord {
                    event_id: self.event_id.clone(),
                    reason: format!("{field} = {v} outside 1..=5"),
                });
            }
        }
        if !(0.0..=1.0).contains(&self.capacity_reduction) {
            return Err(EventError::InvalidRecord {
                event_id: self.event_id.clone(),
                reason: format!("capacity_reduction = {} outside [0, 1]", self.capacity_reduction),
            });
        }
        if !(self.expected_duration_min.is_finite() && self.expected_duration_min >= 0.0) {
            return Err(EventError::InvalidRecord {
                event_id: self.event_id.clone(),
                reason: format!("expected_duration_min = {}", self.expected_duration_min),
            });
        }
        if self.segment_id.is_empty() {
            return Err(EventError::InvalidRecord {
                event_id: self.event_id.clone(),
                reason: "empty segment_id".into(),
            });
        }
        Ok(())
    }
}

/// Minutes of expected impact for each duration score.
pub const DURATION_MINUTES: [f64; 5] = [15.0, 30.0, 60.0, 120.0, 240.0];

pub fn expected_duration_for_score(score: u8) -> f64 {
    DURATION_MINUTES[(score.clamp(1, 5) - 1) as usize]
}
