use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::record::{expected_duration_for_score, EventRecord, EventType, RawEventText};
use super::{EventError, Extractor};

/// Environment variable holding the bearer token for the extraction service.
pub const API_KEY_ENV: &str = "CAUSNET_LLM_API_KEY";

const STAGE1: &str = include_str!("../../assets/prompts/stage1.txt");
const STAGE2: &str = include_str!("../../assets/prompts/stage2.txt");

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("HTTP status {0}")]
    Status(u16),
    #[error("transport: {0}")]
    Other(String),
}

/// Sends one JSON request and returns the JSON reply.
pub trait Transport: Send + Sync {
    fn post_json(&self, body: &Value) -> Result<Value, TransportError>;
}

/// Blocking HTTP transport with a per-request deadline.
pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.into(),
            api_key,
        }
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, body: &Value) -> Result<Value, TransportError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(map_ureq)?;
        resp.body_mut().read_json::<Value>().map_err(map_ureq)
    }
}

fn map_ureq(e: ureq::Error) -> TransportError {
    match e {
        ureq::Error::Timeout(_) => TransportError::Timeout,
        ureq::Error::StatusCode(s) => TransportError::Status(s),
        ureq::Error::Io(io) if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) => {
            TransportError::Timeout
        }
        other => TransportError::Other(other.to_string()),
    }
}

/// Service settings. The API key is never serialized.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_ms: u64,
    pub retries: usize,
    pub max_in_flight: usize,
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/v1/chat/completions".into(),
            model: "default".into(),
            timeout_ms: 30_000,
            retries: 2,
            max_in_flight: 4,
            api_key: None,
        }
    }
}

impl LlmConfig {
    /// Fills the API key from the environment.
    pub fn with_env_key(mut self) -> Self {
        self.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        self
    }
}

/// Prompt texts with `{event_id}`, `{report_time}`, `{text}` and
/// `{structured}` placeholders.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplates {
    pub stage1: String,
    pub stage2: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            stage1: STAGE1.to_string(),
            stage2: STAGE2.to_string(),
        }
    }
}

impl PromptTemplates {
    /// Reads `stage1.txt` and `stage2.txt` from `dir`.
    pub fn load(dir: &Path) -> Result<Self, EventError> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| EventError::Io {
                path: p.display().to_string(),
                source: e,
            })
        };
        Ok(Self {
            stage1: read("stage1.txt")?,
            stage2: read("stage2.txt")?,
        })
    }

    fn render(template: &str, raw: &RawEventText, structured: &str) -> String {
        template
            .replace("{event_id}", &raw.event_id)
            .replace("{report_time}", &crate::data::timefmt::format_instant(raw.report_time))
            .replace("{text}", &raw.text)
            .replace("{structured}", structured)
    }
}

/// Two-stage extractor backed by a remote language model.
pub struct LlmExtractor {
    transport: Box<dyn Transport>,
    config: LlmConfig,
    prompts: PromptTemplates,
}

#[derive(Deserialize)]
struct Stage1Reply {
    event_type: String,
    segment_id: Option<String>,
    onset: Option<String>,
}

impl LlmExtractor {
    pub fn new(transport: Box<dyn Transport>, config: LlmConfig, prompts: PromptTemplates) -> Self {
        Self {
            transport,
            config,
            prompts,
        }
    }

    /// Extractor talking HTTP to `config.endpoint`.
    pub fn http(config: LlmConfig, prompts: PromptTemplates) -> Self {
        let transport = HttpTransport::new(
            config.endpoint.clone(),
            config.api_key.clone(),
            Duration::from_millis(config.timeout_ms),
        );
        Self::new(Box::new(transport), config, prompts)
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    fn request(&self, prompt: &str) -> Value {
        json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{ "role": "user", "content": prompt }],
        })
    }

    /// Sends `prompt` and parses the reply with `parse`, retrying on any
    /// transport or parse failure.
    fn ask<T>(&self, raw: &RawEventText, prompt: &str, parse: impl Fn(Value) -> Result<T, String>) -> Result<T, EventError> {
        let attempts = self.config.retries + 1;
        let body = self.request(prompt);
        let mut last = String::new();
        for attempt in 1..=attempts {
            let outcome = self
                .transport
                .post_json(&body)
                .map_err(|e| e.to_string())
                .and_then(|reply| reply_object(&reply))
                .and_then(&parse);
            match outcome {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!("event {}: attempt {attempt}/{attempts} failed: {e}", raw.event_id);
                    last = e;
                }
            }
        }
        Err(EventError::ExtractionFailed {
            event_id: raw.event_id.clone(),
            attempts,
            reason: last,
        })
    }
}

/// Accepts either a bare JSON object or a chat-completion envelope whose
/// message content holds one.
fn reply_object(reply: &Value) -> Result<Value, String> {
    let content = reply
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str);
    match content {
        Some(text) => {
            let start = text.find('{').ok_or("reply content has no JSON object")?;
            let end = text.rfind('}').ok_or("reply content has no JSON object")?;
            serde_json::from_str(&text[start..=end]).map_err(|e| format!("reply content: {e}"))
        }
        None if reply.is_object() => Ok(reply.clone()),
        None => Err("reply is not a JSON object".into()),
    }
}

fn clamp_score(event_id: &str, field: &str, v: Option<f64>, default: u8) -> u8 {
    let Some(v) = v.filter(|v| v.is_finite()) else {
        log::warn!("event {event_id}: `{field}` missing, using {default}");
        return default;
    };
    let c = v.round().clamp(1.0, 5.0);
    if c != v {
        log::warn!("event {event_id}: `{field}` = {v} clamped to {c}");
    }
    c as u8
}

impl Extractor for LlmExtractor {
    fn extract(&self, raw: &RawEventText) -> Result<EventRecord, EventError> {
        let prompt1 = PromptTemplates::render(&self.prompts.stage1, raw, "");
        let (event_type, segment_id, onset) = self.ask(raw, &prompt1, |v| {
            let r: Stage1Reply = serde_json::from_value(v).map_err(|e| e.to_string())?;
            let t: EventType = r.event_type.parse().map_err(|e: EventError| e.to_string())?;
            let onset = match r.onset.as_deref() {
                Some(s) => crate::data::timefmt::parse_instant(s).ok_or_else(|| format!("unparseable onset `{s}`"))?,
                None => raw.report_time,
            };
            Ok((t, r.segment_id.filter(|s| !s.trim().is_empty()), onset))
        })?;
        let segment_id = segment_id.ok_or_else(|| EventError::MissingLocation {
            event_id: raw.event_id.clone(),
        })?;

        let structured = json!({
            "event_type": event_type,
            "segment_id": segment_id,
            "onset": crate::data::timefmt::format_instant(onset),
        })
        .to_string();
        let prompt2 = PromptTemplates::render(&self.prompts.stage2, raw, &structured);
        let scores = self.ask(raw, &prompt2, |v| {
            v.as_object().cloned().ok_or_else(|| "stage 2 reply is not an object".to_string())
        })?;
        let id = raw.event_id.as_str();
        let num = |k: &str| scores.get(k).and_then(Value::as_f64);
        let duration_score = clamp_score(id, "duration_score", num("duration_score"), 2);
        let capacity = match num("capacity_reduction").filter(|c| c.is_finite()) {
            Some(c) if (0.0..=1.0).contains(&c) => c,
            Some(c) => {
                log::warn!("event {id}: `capacity_reduction` = {c} clamped");
                c.clamp(0.0, 1.0)
            }
            None => {
                log::warn!("event {id}: `capacity_reduction` missing, using 0.2");
                0.2
            }
        };
        let expected = match num("expected_duration_min").filter(|d| d.is_finite()) {
            Some(d) if d >= 0.0 => d,
            _ => expected_duration_for_score(duration_score),
        };
        let record = EventRecord {
            event_id: raw.event_id.clone(),
            event_type,
            onset,
            segment_id,
            severity: clamp_score(id, "severity", num("severity"), 2),
            danger: clamp_score(id, "danger", num("danger"), 2),
            duration_score,
            impact_scope: clamp_score(id, "impact_scope", num("impact_scope"), 2),
            capacity_reduction: capacity,
            expected_duration_min: expected,
        };
        record.validate()?;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    struct Scripted {
        replies: Mutex<Vec<Result<Value, TransportError>>>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(mut replies: Vec<Result<Value, TransportError>>) -> Self {
            replies.reverse();
            Self {
                replies: Mutex::new(replies),
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl Transport for std::sync::Arc<Scripted> {
        fn post_json(&self, _body: &Value) -> Result<Value, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.replies.lock().unwrap().pop().unwrap_or(Err(TransportError::Timeout))
        }
    }

    fn raw() -> RawEventText {
        RawEventText {
            event_id: "x1".into(),
            text: "crash on S4".into(),
            report_time: crate::data::timefmt::parse_instant("2024-03-01T08:30:00").unwrap(),
            source: "feed".into(),
        }
    }

    #[test]
    fn retries_then_clamps_out_of_range_scores() {
        let script = std::sync::Arc::new(Scripted::new(vec![
            Err(TransportError::Status(503)),
            Ok(json!({"choices": [{"message": {"content":
                "Sure: {\"event_type\": \"Accident\", \"segment_id\": \"S4\", \"onset\": \"2024-03-01T08:20:00\"}"}}]})),
            Ok(json!({"severity": 9, "danger": 0, "duration_score": 3, "impact_scope": 2.4, "capacity_reduction": 1.7})),
        ]));
        let ex = LlmExtractor::new(Box::new(script.clone()), LlmConfig::default(), PromptTemplates::default());
        let rec = ex.extract(&raw()).unwrap();
        assert_eq!(script.calls.load(Ordering::SeqCst), 3);
        assert_eq!(rec.event_type, EventType::Accident);
        assert_eq!((rec.severity, rec.danger, rec.impact_scope), (5, 1, 2));
        assert_eq!(rec.capacity_reduction, 1.0);
        assert_eq!(rec.expected_duration_min, 60.0);
        assert_eq!(crate::data::timefmt::format_instant(rec.onset), "2024-03-01T08:20:00");
    }

    #[test]
    fn unknown_type_exhausts_retries() {
        let bad = || Ok(json!({"event_type": "Weather", "segment_id": "S4"}));
        let script = std::sync::Arc::new(Scripted::new(vec![bad(), bad(), bad()]));
        let ex = LlmExtractor::new(Box::new(script.clone()), LlmConfig::default(), PromptTemplates::default());
        match ex.extract(&raw()) {
            Err(EventError::ExtractionFailed { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn prompts_fill_placeholders() {
        let p = PromptTemplates::render("{event_id}|{report_time}|{text}|{structured}", &raw(), "{}");
        assert_eq!(p, "x1|2024-03-01T08:30:00|crash on S4|{}");
    }

    fn serve(listener: TcpListener, bodies: Vec<String>) -> std::thread::JoinHandle<()> {
        std::thread::spawn(move || {
            for body in bodies {
                let (mut s, _) = listener.accept().unwrap();
                let mut buf = [0u8; 8192];
                let mut seen = Vec::new();
                // Read headers plus the declared body before replying.
                loop {
                    let n = s.read(&mut buf).unwrap();
                    seen.extend_from_slice(&buf[..n]);
                    let text = String::from_utf8_lossy(&seen).to_string();
                    if let Some(h) = text.find("\r\n\r\n") {
                        let len = text[..h]
                            .lines()
                            .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                            .unwrap_or(0);
                        if seen.len() >= h + 4 + len {
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                let resp = format!(
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    body.len(),
                    body
                );
                s.write_all(resp.as_bytes()).unwrap();
            }
        })
    }

    #[test]
    fn http_transport_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = serve(
            listener,
            vec![
                r#"{"event_type":"Hazard","segment_id":"S4","onset":"2024-03-01T08:00:00"}"#.into(),
                r#"{"severity":3,"danger":4,"duration_score":1,"impact_scope":2,"capacity_reduction":0.3,"expected_duration_min":20}"#.into(),
            ],
        );
        let config = LlmConfig {
            endpoint: format!("http://{addr}/v1"),
            timeout_ms: 5_000,
            ..LlmConfig::default()
        };
        let ex = LlmExtractor::http(config, PromptTemplates::default());
        let rec = ex.extract(&raw()).unwrap();
        handle.join().unwrap();
        assert_eq!(rec.event_type, EventType::Hazard);
        assert_eq!(rec.danger, 4);
        assert_eq!(rec.expected_duration_min, 20.0);
    }

    #[test]
    fn silent_server_times_out_three_times() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        // Accept connections and never answer.
        let _keep = std::thread::spawn(move || {
            let mut held = Vec::new();
            for s in listener.incoming().take(3) {
                held.push(s);
            }
            std::thread::sleep(Duration::from_secs(2));
        });
        let config = LlmConfig {
            endpoint: format!("http://{addr}/v1"),
            timeout_ms: 150,
            ..LlmConfig::default()
        };
        let ex = LlmExtractor::http(config, PromptTemplates::default());
        match ex.extract(&raw()) {
            Err(EventError::ExtractionFailed { attempts, reason, .. }) => {
                assert_eq!(attempts, 3);
                assert!(reason.contains("timed out"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
