//! Append-only run trace. A single log collects events from all stages;
//! timestamps are unix milliseconds, bumped when the clock ties so ordering
//! within a run is strict.

use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::Value;

use crate::types::{TraceEvent, TraceStage};

/// Version stamped on every serialized trace line.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct TraceLog {
    inner: Mutex<Inner>,
}

#[derive(Debug, Default)]
struct Inner {
    events: Vec<TraceEvent>,
    last_timestamp: u64,
}

impl TraceLog {
    pub fn new() -> Arc<Self> {
        Arc::new(TraceLog::default())
    }

    pub fn append(&self, stage: TraceStage, payload: Value) {
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        let mut inner = self.inner.lock().expect("trace lock poisoned");
        let timestamp = now.max(inner.last_timestamp + 1);
        inner.last_timestamp = timestamp;
        inner.events.push(TraceEvent { stage, timestamp, payload });
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.inner.lock().expect("trace lock poisoned").events.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("trace lock poisoned").events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One JSON object per line, each carrying the schema version.
pub fn render_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        let mut v = serde_json::to_value(e).expect("trace event serializes");
        if let Value::Object(map) = &mut v {
            map.insert("schema_version".to_string(), Value::from(SCHEMA_VERSION));
        }
        out.push_str(&serde_json::to_string(&v).expect("trace line serializes"));
        out.push('\n');
    }
    out
}

/// Inverse of [`render_jsonl`]; skips blank lines.
pub fn parse_jsonl(text: &str) -> Result<Vec<TraceEvent>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
