use std::fmt;
use std::str::FromStr;

use chrono::{NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use super::DataError;

/// Time-of-day bin used to group heterogeneous effects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TimePeriod {
    MorningPeak,
    EveningPeak,
    OffPeak,
    Night,
}

impl TimePeriod {
    pub const ALL: [TimePeriod; 4] = [
        TimePeriod::MorningPeak,
        TimePeriod::EveningPeak,
        TimePeriod::OffPeak,
        TimePeriod::Night,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Column header used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            TimePeriod::MorningPeak => "Morning Peak",
            TimePeriod::EveningPeak => "Evening Peak",
            TimePeriod::OffPeak => "Off-peak",
            TimePeriod::Night => "Night",
        }
    }
}

impl fmt::Display for TimePeriod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for TimePeriod {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "morningpeak" => Ok(TimePeriod::MorningPeak),
            "eveningpeak" => Ok(TimePeriod::EveningPeak),
            "offpeak" => Ok(TimePeriod::OffPeak),
            "night" => Ok(TimePeriod::Night),
            _ => Err(DataError::Config(format!("unknown time period `{s}`"))),
        }
    }
}

/// Hour ranges `[start, end)` for the three named bins; everything else is
/// off-peak. A range whose end precedes its start wraps past midnight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimePeriodBins {
    pub morning_peak: (u32, u32),
    pub evening_peak: (u32, u32),
    pub night: (u32, u32),
}

impl Default for TimePeriodBins {
    fn default() -> Self {
        Self {
            morning_peak: (7, 10),
            evening_peak: (17, 20),
            night: (23, 5),
        }
    }
}

fn in_range(hour: u32, (start, end): (u32, u32)) -> bool {
    if start <= end {
        hour >= start && hour < end
    } else {
        hour >= start || hour < end
    }
}

impl TimePeriodBins {
    pub fn classify_hour(&self, hour: u32) -> TimePeriod {
        if in_range(hour, self.morning_peak) {
            TimePeriod::MorningPeak
        } else if in_range(hour, self.evening_peak) {
            TimePeriod::EveningPeak
        } else if in_range(hour, self.night) {
            TimePeriod::Night
        } else {
            TimePeriod::OffPeak
        }
    }

    pub fn classify(&self, instant: NaiveDateTime) -> TimePeriod {
        self.classify_hour(instant.hour())
    }

    /// Minutes of the day (0..1440) that fall into `period`.
    pub fn minutes_of(&self, period: TimePeriod) -> Vec<u32> {
        (0..1440).filter(|m| self.classify_hour(m / 60) == period).collect()
    }
}
