use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::timefmt::{format_instant, parse_instant};
use super::DataError;

/// Upper sanity bound on speeds, km/h.
pub const MAX_SPEED_KMH: f64 = 200.0;
/// Longest run of missing steps that is filled by interpolation.
pub const MAX_INTERPOLATED_GAP: usize = 3;

pub const CSV_HEADER: [&str; 3] = ["timestamp_iso8601", "segment_id", "speed_kmh"];

/// Speeds of one segment on a fixed-interval time axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedSeries {
    pub segment_id: String,
    pub start: NaiveDateTime,
    pub interval_min: u32,
    pub speeds: Vec<f64>,
    /// `false` inside gaps too long to interpolate; windows touching such
    /// steps are excluded downstream.
    pub usable: Vec<bool>,
}

impl SpeedSeries {
    pub fn new(segment_id: impl Into<String>, start: NaiveDateTime, interval_min: u32, speeds: Vec<f64>) -> Result<Self, DataError> {
        let segment_id = segment_id.into();
        if interval_min == 0 {
            return Err(DataError::Config("interval must be positive".into()));
        }
        if let Some((i, v)) = speeds
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=MAX_SPEED_KMH).contains(*v)))
        {
            return Err(DataError::Config(format!(
                "segment {segment_id}: speed {v} at step {i} outside [0, {MAX_SPEED_KMH}]"
            )));
        }
        let usable = vec![true; speeds.len()];
        Ok(Self {
            segment_id,
            start,
            interval_min,
            speeds,
            usable,
        })
    }

    pub fn len(&self) -> usize {
        self.speeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speeds.is_empty()
    }

    pub fn timestamp(&self, index: usize) -> NaiveDateTime {
        self.start + Duration::minutes(i64::from(self.interval_min) * index as i64)
    }

    pub fn timestamps(&self) -> impl Iterator<Item = NaiveDateTime> + '_ {
        (0..self.len()).map(|i| self.timestamp(i))
    }

    /// Index of `t` on this axis, if it lies on a step.
    pub fn index_of(&self, t: NaiveDateTime) -> Option<usize> {
        let minutes = (t - self.start).num_minutes();
        let step = i64::from(self.interval_min);
        if minutes < 0 || minutes % step != 0 || (t - self.start).num_seconds() % 60 != 0 {
            return None;
        }
        let i = (minutes / step) as usize;
        (i < self.len()).then_some(i)
    }

    /// Index of the first step at or after `t`.
    pub fn ceil_index(&self, t: NaiveDateTime) -> usize {
        let secs = (t - self.start).num_seconds();
        if secs <= 0 {
            return 0;
        }
        let step = i64::from(self.interval_min) * 60;
        ((secs + step - 1) / step) as usize
    }
}

/// One run of missing values in one segment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapReport {
    pub segment_id: String,
    pub start_index: usize,
    pub length: usize,
    /// `true` when filled by interpolation, `false` when excluded.
    pub interpolated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSpeeds {
    pub series: Vec<SpeedSeries>,
    pub gaps: Vec<GapReport>,
}

pub fn load_speed_csv(path: &Path) -> Result<LoadedSpeeds, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    read_speed_csv(file)
}

/// Parses the `timestamp_iso8601,segment_id,speed_kmh` layout. An empty
/// speed field, or a missing row, is a gap.
pub fn read_speed_csv(reader: impl Read) -> Result<LoadedSpeeds, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| DataError::Malformed { line: 1, reason: e.to_string() })?;
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(DataError::Malformed {
            line: 1,
            reason: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(NaiveDateTime, Option<f64>, u64)>> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| DataError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(DataError::Malformed {
                line,
                reason: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let ts = parse_instant(&record[0]).ok_or_else(|| DataError::Malformed {
            line,
            reason: format!("bad timestamp `{}`", &record[0]),
        })?;
        let segment = record[1].to_string();
        if segment.is_empty() {
            return Err(DataError::Malformed {
                line,
                reason: "empty segment_id".into(),
            });
        }
        let speed = if record[2].is_empty() {
            None
        } else {
            let v: f64 = record[2].parse().map_err(|_| DataError::Malformed {
                line,
                reason: format!("bad speed `{}`", &record[2]),
            })?;
            if !(v.is_finite() && (0.0..=MAX_SPEED_KMH).contains(&v)) {
                return Err(DataError::OutOfRange { line, value: v });
            }
            Some(v)
        };
        if !rows.contains_key(&segment) {
            order.push(segment.clone());
        }
        rows.entry(segment).or_default().push((ts, speed, line));
    }
    if order.is_empty() {
        return Err(DataError::Malformed {
            line: 1,
            reason: "no data rows".into(),
        });
    }

    let mut stamps: Vec<NaiveDateTime> = rows.values().flatten().map(|r| r.0).collect();
    stamps.sort();
    stamps.dedup();
    let start = stamps[0];
    let end = *stamps.last().unwrap();
    let interval_secs = stamps
        .windows(2)
        .map(|w| (w[1] - w[0]).num_seconds())
        .min()
        .unwrap_or(60);
    if interval_secs % 60 != 0 {
        return Err(DataError::Spacing(format!("interval of {interval_secs}s is not a whole number of minutes")));
    }
    for w in stamps.windows(2) {
        let d = (w[1] - w[0]).num_seconds();
        if d % interval_secs != 0 {
            return Err(DataError::Spacing(format!(
                "gap {} -> {} is not a multiple of the {}-minute interval",
                format_instant(w[0]),
                format_instant(w[1]),
                interval_secs / 60
            )));
        }
    }
    let interval_min = (interval_secs / 60) as u32;
    let len = ((end - start).num_seconds() / interval_secs) as usize + 1;

    let mut series = Vec::with_capacity(order.len());
    let mut gaps = Vec::new();
    for segment in order {
        let mut values: Vec<Option<f64>> = vec![None; len];
        for &(ts, speed, line) in &rows[&segment] {
            let i = ((ts - start).num_seconds() / interval_secs) as usize;
            if values[i].is_some() {
                return Err(DataError::Malformed {
                    line,
                    reason: format!("duplicate reading for {segment} at {}", format_instant(ts)),
                });
            }
            values[i] = speed;
        }
        let (speeds, usable, seg_gaps) = fill_gaps(&segment, &values)?;
        gaps.extend(seg_gaps);
        series.push(SpeedSeries {
            segment_id: segment,
            start,
            interval_min,
            speeds,
            usable,
        });
    }
    Ok(LoadedSpeeds { series, gaps })
}

fn fill_gaps(segment: &str, values: &[Option<f64>]) -> Result<(Vec<f64>, Vec<bool>, Vec<GapReport>), DataError> {
    let known: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    if known.is_empty() {
        return Err(DataError::Config(format!("segment {segment} has no readings")));
    }
    let mut speeds = vec![0.0; values.len()];
    let mut usable = vec![true; values.len()];
    let mut gaps = Vec::new();
    let mut i = 0;
    while i < values.len() {
        if let Some(v) = values[i] {
            speeds[i] = v;
            i += 1;
            continue;
        }
        let start = i;
        while i < values.len() && values[i].is_none() {
            i += 1;
        }
        let length = i - start;
        let left = start.checked_sub(1).map(|j| (j, values[j].unwrap()));
        let right = (i < values.len()).then(|| (i, values[i].unwrap()));
        let interpolated = left.is_some() && right.is_some() && length <= MAX_INTERPOLATED_GAP;
        for k in start..i {
            speeds[k] = match (left, right) {
                (Some((l, lv)), Some((r, rv))) => lv + (rv - lv) * (k - l) as f64 / (r - l) as f64,
                (Some((_, lv)), None) => lv,
                (None, Some((_, rv))) => rv,
                (None, None) => unreachable!(),
            };
            usable[k] = interpolated;
        }
        gaps.push(GapReport {
            segment_id: segment.to_string(),
            start_index: start,
            length,
            interpolated,
        });
    }
    Ok((speeds, usable, gaps))
}

/// Writes series sharing one time axis, time-major.
pub fn write_speed_csv(writer: impl Write, series: &[SpeedSeries]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER).map_err(DataError::csv)?;
    let len = series.iter().map(SpeedSeries::len).max().unwrap_or(0);
    for i in 0..len {
        for s in series.iter().filter(|s| i < s.len()) {
            w.write_record([format_instant(s.timestamp(i)), s.segment_id.clone(), format!("{}", s.speeds[i])])
                .map_err(DataError::csv)?;
        }
    }
    w.flush().map_err(|e| DataError::Io {
        path: "<csv writer>".into(),
        source: e,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "timestamp_iso8601,segment_id,speed_kmh\n";

    fn two_segment_csv() -> String {
        let mut s = HEADER.to_string();
        for i in 0..5 {
            let t = format!("2024-03-01T08:{:02}:00", i * 4);
            s += &format!("{t},S1,{}\n{t},S2,{}\n", 50 + i, 60 + i);
        }
        s
    }

    #[test]
    fn parses_well_formed_file() {
        let loaded = read_speed_csv(two_segment_csv().as_bytes()).unwrap();
        assert_eq!(loaded.series.len(), 2);
        assert!(loaded.series.iter().all(|s| s.len() == 5 && s.interval_min == 4));
        assert_eq!(loaded.series[1].speeds, vec![60.0, 61.0, 62.0, 63.0, 64.0]);
        assert!(loaded.gaps.is_empty());
    }

    #[test]
    fn interpolates_single_missing_value() {
        let csv = two_segment_csv().replace("2024-03-01T08:08:00,S1,52", "2024-03-01T08:08:00,S1,");
        let loaded = read_speed_csv(csv.as_bytes()).unwrap();
        assert_eq!(loaded.series[0].speeds[2], 52.0);
        assert_eq!(
            loaded.gaps,
            vec![GapReport {
                segment_id: "S1".into(),
                start_index: 2,
                length: 1,
                interpolated: true
            }]
        );
    }

    #[test]
    fn missing_rows_are_gaps_and_long_gaps_are_excluded() {
        let mut s = HEADER.to_string();
        for i in 0..10 {
            let t = format!("2024-03-01T08:{:02}:00", i * 4);
            s += &format!("{t},A,{}\n", 40 + i);
            if !(2..7).contains(&i) {
                s += &format!("{t},B,{}\n", 40 + i);
            }
        }
        let loaded = read_speed_csv(s.as_bytes()).unwrap();
        let b = &loaded.series[1];
        assert_eq!(b.len(), 10);
        assert_eq!(b.usable.iter().filter(|u| !**u).count(), 5);
        assert!(!loaded.gaps[0].interpolated);
    }

    #[test]
    fn negative_speed_names_line() {
        let csv = two_segment_csv().replace(",S2,61", ",S2,-3");
        match read_speed_csv(csv.as_bytes()) {
            Err(DataError::OutOfRange { line, value }) => {
                assert_eq!(line, 5);
                assert_eq!(value, -3.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_row_names_line() {
        let csv = format!("{HEADER}2024-03-01T08:00:00,S1,50\nnot-a-time,S1,50\n");
        assert!(matches!(read_speed_csv(csv.as_bytes()), Err(DataError::Malformed { line: 3, .. })));
    }

    #[test]
    fn irregular_spacing_is_rejected() {
        let csv = format!(
            "{HEADER}2024-03-01T08:00:00,S1,50\n2024-03-01T08:04:00,S1,50\n2024-03-01T08:09:00,S1,50\n"
        );
        assert!(matches!(read_speed_csv(csv.as_bytes()), Err(DataError::Spacing(_))));
    }

    #[test]
    fn write_then_read_round_trips() {
        let loaded = read_speed_csv(two_segment_csv().as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_speed_csv(&mut buf, &loaded.series).unwrap();
        let again = read_speed_csv(buf.as_slice()).unwrap();
        assert_eq!(again.series, loaded.series);
    }
}
