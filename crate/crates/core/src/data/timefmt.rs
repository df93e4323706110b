//! ISO-8601 instants as naive local times.

use chrono::{DateTime, NaiveDateTime};

pub const FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Parses `YYYY-MM-DDTHH:MM[:SS[.fff]]`, or an RFC 3339 string whose local
/// wall-clock time is kept.
pub fn parse_instant(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    DateTime::parse_from_rfc3339(s).ok().map(|t| t.naive_local())
}

pub fn format_instant(t: NaiveDateTime) -> String {
    t.format(FORMAT).to_string()
}
