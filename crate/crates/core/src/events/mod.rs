//! Event text structurization and quantification.
//!
//! Two backends implement [`Extractor`]: the deterministic
//! [`RuleBasedExtractor`], driven by a versioned keyword [`Rubric`], and the
//! [`LlmExtractor`], which sends templated prompts to a JSON-over-HTTP
//! service. Downstream code only ever sees [`EventRecord`]s.

mod llm;
mod record;
mod rules;

pub use llm::{
    HttpTransport, LlmConfig, LlmExtractor, PromptTemplates, Transport, TransportError, API_KEY_ENV,
};
pub use record::{expected_duration_for_score, EventRecord, EventType, RawEventText, DURATION_MINUTES};
pub use rules::{PartialRecord, Rubric, RuleBasedExtractor, ScoreDefaults, ScoreRule, SegmentLookup, TypeKeywords};

use std::io::{BufRead, BufReader, Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("event {event_id}: no event-type keyword found")]
    UnclassifiableEvent { event_id: String },
    #[error("event {event_id}: no segment location found")]
    MissingLocation { event_id: String },
    #[error("event {event_id}: extraction failed after {attempts} attempts: {reason}")]
    ExtractionFailed {
        event_id: String,
        attempts: usize,
        reason: String,
    },
    #[error("event {event_id}: {reason}")]
    InvalidRecord { event_id: String, reason: String },
    #[error("unknown event type `{0}`")]
    UnknownEventType(String),
    #[error("rubric: {0}")]
    Rubric(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Turns one raw report into a validated record.
pub trait Extractor: Sync {
    fn extract(&self, raw: &RawEventText) -> Result<EventRecord, EventError>;
}

/// Runs `extractor` over `raws` with at most `max_in_flight` concurrent
/// calls. Results keep input order.
pub fn extract_all<E: Extractor + ?Sized>(
    extractor: &E,
    raws: &[RawEventText],
    max_in_flight: usize,
) -> Vec<Result<EventRecord, EventError>> {
    let workers = max_in_flight.clamp(1, raws.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<EventRecord, EventError>>>> = raws.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(raw) = raws.get(i) else { break };
                let result = extractor.extract(raw);
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

/// Writes one JSON document per line.
pub fn write_jsonl<T: Serialize>(mut writer: impl Write, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

/// Reads one JSON document per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(reader: impl Read) -> Result<Vec<T>, EventError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| EventError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EventError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Reads event records and validates every one.
pub fn read_records(reader: impl Read) -> Result<Vec<EventRecord>, EventError> {
    let records: Vec<EventRecord> = read_jsonl(reader)?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

pub fn load_records(path: &std::path::Path) -> Result<Vec<EventRecord>, EventError> {
    let f = std::fs::File::open(path).map_err(|e| EventError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    read_records(f)
}
