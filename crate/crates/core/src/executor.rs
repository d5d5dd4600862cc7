//! Batch execution. A solver gets a batch's prompts and replies with raw
//! text; this module extracts JSON rows from that text, retries with a
//! continuation prompt while fields are missing, falls back to
//! schema-complete empty rows when every attempt fails, and aggregates all
//! batches into one table in a scheduling-independent order. Also hosts the
//! JSON tool-call loop solver agents run on.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backends::{BackendError, BatchSolver, ChatBackend, ChatRequest, Role};
use crate::metrics::normalize_cell;
use crate::trace::TraceLog;
use crate::types::{fold_text, Batch, ResultTable, TraceStage};

/// Attempts per batch = `max_retries + 1`.
pub const DEFAULT_MAX_RETRIES: u32 = 2;

/// Default ceiling on concurrently executing batches.
pub const DEFAULT_WORKERS: usize = 8;

/// Default step budget for one tool-loop agent.
pub const DEFAULT_MAX_STEPS: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    /// The solver failed in a way retries cannot fix (for example auth).
    #[error("solver unavailable: {0}")]
    SolverUnavailable(String),
}

#[derive(Debug, thiserror::Error)]
pub enum ToolLoopError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("agent produced unparseable actions twice in a row: {0}")]
    MalformedAction(String),
}

/// What a solver sees for one attempt: the batch, the output keys, and
/// shared context (grouping rationale; on retries, also the continuation
/// instruction).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverRequest {
    pub batch: Batch,
    pub schema_columns: Vec<String>,
    pub shared_context: String,
}

/// Record of one solve attempt for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub batch_id: usize,
    pub attempt: u32,
    pub raw_output: String,
    pub parse_ok: bool,
    pub missing_fields: Vec<String>,
}

// ---------------------------------------------------------------------------
// JSON extraction

/// Pull JSON values out of model text. Stages, first one that yields wins:
/// the whole text as JSON, fenced code blocks, one JSON value per line, and
/// finally balanced `{...}`/`[...]` spans inside prose.
pub fn extract_json_values(text: &str) -> Vec<Value> {
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        return vec![v];
    }
    let fenced: Vec<Value> = fenced_blocks(text)
        .iter()
        .flat_map(|block| {
            let t = block.trim();
            if let Ok(v) = serde_json::from_str::<Value>(t) {
                vec![v]
            } else {
                jsonl_values(t)
            }
        })
        .collect();
    if !fenced.is_empty() {
        return fenced;
    }
    let lines = jsonl_values(text);
    if !lines.is_empty() {
        return lines;
    }
    scan_balanced(text)
}

fn fenced_blocks(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        // Skip optional language tag to end of line.
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        if let Some(end) = body.find("```") {
            out.push(body[..end].to_string());
            rest = &body[end + 3..];
        } else {
            break;
        }
    }
    out
}

fn jsonl_values(text: &str) -> Vec<Value> {
    text.lines()
        .filter_map(|line| {
            let t = line.trim();
            if t.is_empty() {
                return None;
            }
            serde_json::from_str::<Value>(t).ok()
        })
        .collect()
}

/// Balanced top-level JSON object/array spans inside arbitrary prose.
fn scan_balanced(text: &str) -> Vec<Value> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b == b'{' || b == b'[' {
            if let Some(end) = balanced_end(bytes, i) {
                if let Ok(v) = serde_json::from_str::<Value>(&text[i..end]) {
                    out.push(v);
                    i = end;
                    continue;
                }
            }
        }
        i += 1;
    }
    out
}

/// Index one past the close of the JSON value starting at `start`, tracking
/// strings and escapes.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, &b) in bytes[start..].iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' | b'[' => depth += 1,
            b'}' | b']' => {
                depth = depth.saturating_sub(1);
                if depth == 0 {
                    return Some(start + offset + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Flatten extracted values into row objects.
fn objects_from(values: Vec<Value>) -> Vec<Map<String, Value>> {
    let mut out = Vec::new();
    for v in values {
        match v {
            Value::Object(o) => out.push(o),
            Value::Array(items) => {
                for item in items {
                    if let Value::Object(o) = item {
                        out.push(o);
                    }
                }
            }
            _ => {}
        }
    }
    out
}

/// Row objects found anywhere in solver text.
pub fn extract_objects(text: &str) -> Vec<Map<String, Value>> {
    objects_from(extract_json_values(text))
}

/// String form of one JSON cell value.
pub fn json_value_to_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => n.to_string(),
        other => serde_json::to_string(other).unwrap_or_default(),
    }
}

/// Project row objects onto the schema: known keys copy over (name-folded
/// match), unknown keys drop, missing keys leave empty cells.
pub fn project_objects(objects: &[Map<String, Value>], schema_columns: &[String]) -> Vec<Vec<String>> {
    let folded: Vec<String> = schema_columns.iter().map(|c| fold_text(c)).collect();
    objects
        .iter()
        .map(|obj| {
            folded
                .iter()
                .map(|want| {
                    obj.iter()
                        .find(|(k, _)| fold_text(k) == *want)
                        .map(|(_, v)| json_value_to_cell(v))
                        .unwrap_or_default()
                })
                .collect()
        })
        .collect()
}

/// Rows parsed out of raw solver text, projected onto the schema. Never
/// fails; unusable text simply yields no rows.
pub fn extract_rows(raw: &str, schema_columns: &[String]) -> Vec<Vec<String>> {
    project_objects(&extract_objects(raw), schema_columns)
}

/// Schema keys a row object does not answer (absent or null).
fn missing_keys(obj: &Map<String, Value>, schema_columns: &[String]) -> Vec<String> {
    schema_columns
        .iter()
        .filter(|col| {
            let want = fold_text(col);
            !obj.iter().any(|(k, v)| fold_text(k) == want && !v.is_null())
        })
        .cloned()
        .collect()
}

/// Schema-complete rows for a batch nothing could solve: every cell empty
/// except key cells copied from the batch's matrix slice where column names
/// match.
pub fn fallback_rows(batch: &Batch, schema_columns: &[String]) -> Vec<Vec<String>> {
    let manifest = &batch.manifest;
    let matrix_col: Vec<Option<usize>> = schema_columns
        .iter()
        .map(|c| {
            let want = fold_text(c);
            manifest
                .matrix_columns
                .iter()
                .position(|mc| fold_text(mc) == want)
        })
        .collect();
    manifest
        .matrix_rows
        .iter()
        .map(|row| {
            matrix_col
                .iter()
                .map(|slot| slot.map(|i| row[i].clone()).unwrap_or_default())
                .collect()
        })
        .collect()
}

/// Human-readable context a batch carries into its solver calls.
pub fn batch_context(batch: &Batch) -> String {
    let mut parts = Vec::new();
    if let Some(key) = &batch.manifest.group_key {
        let display = key.replace('\u{1f}', " / ");
        parts.push(format!("these tasks share the group key {display:?}"));
    }
    if !batch.manifest.rationale.is_empty() {
        parts.push(batch.manifest.rationale.clone());
    }
    parts.join("; ")
}

fn continuation_instruction(missing: &[String]) -> String {
    format!(
        "Your previous output was invalid or incomplete. Missing fields: {}. Return only JSONL with all schema keys.",
        missing.join(", ")
    )
}

/// Row identity for best-so-far merging across attempts: the normalized
/// first-column value when present, else a unique slot per arrival.
fn row_identity(row: &[String], arrival: usize) -> String {
    let key = row.first().map(|c| normalize_cell(c)).unwrap_or_default();
    if key.is_empty() {
        format!("\u{1f}anon{arrival}")
    } else {
        key
    }
}

fn non_empty_cells(row: &[String]) -> usize {
    row.iter().filter(|c| !c.trim().is_empty()).count()
}

/// Run one batch with bounded retries.
///
/// An attempt succeeds when at least one row parses and every parsed row
/// answers every schema key. Partial attempts keep their rows (best version
/// per row identity) and trigger a continuation naming the missing fields.
/// When every attempt fails to parse, the batch degrades to [`fallback_rows`]
/// rather than vanishing from the output.
pub fn execute_batch(
    request: &SolverRequest,
    solver: &dyn BatchSolver,
    max_retries: u32,
) -> Result<(Vec<Vec<String>>, Vec<AttemptLog>), ExecError> {
    let batch = &request.batch;
    let schema_columns = &request.schema_columns;
    let mut logs = Vec::new();
    // Arrival-ordered identity -> best row seen.
    let mut order: Vec<String> = Vec::new();
    let mut best: std::collections::HashMap<String, Vec<String>> = std::collections::HashMap::new();
    let mut last_missing: Vec<String> = schema_columns.clone();
    let mut complete = false;

    for attempt in 1..=max_retries.saturating_add(1) {
        let shared_context = if attempt == 1 {
            request.shared_context.clone()
        } else {
            let mut ctx = request.shared_context.clone();
            if !ctx.is_empty() {
                ctx.push_str("\n");
            }
            ctx.push_str(&continuation_instruction(&last_missing));
            ctx
        };
        let attempt_request = SolverRequest {
            batch: batch.clone(),
            schema_columns: schema_columns.clone(),
            shared_context,
        };

        let raw = match solver.solve_batch(&attempt_request) {
            Ok(raw) => raw,
            Err(e) if e.is_transient() || matches!(e, BackendError::Malformed(_)) => {
                logs.push(AttemptLog {
                    batch_id: batch.id,
                    attempt,
                    raw_output: format!("<solver error: {e}>"),
                    parse_ok: false,
                    missing_fields: schema_columns.clone(),
                });
                last_missing = schema_columns.clone();
                continue;
            }
            Err(e) => return Err(ExecError::SolverUnavailable(e.to_string())),
        };

        let objects = extract_objects(&raw);
        if objects.is_empty() {
            logs.push(AttemptLog {
                batch_id: batch.id,
                attempt,
                raw_output: raw,
                parse_ok: false,
                missing_fields: schema_columns.clone(),
            });
            last_missing = schema_columns.clone();
            continue;
        }

        let mut attempt_missing: BTreeSet<String> = BTreeSet::new();
        for obj in &objects {
            for m in missing_keys(obj, schema_columns) {
                attempt_missing.insert(m);
            }
        }
        let rows = project_objects(&objects, schema_columns);
        for row in rows {
            let id = row_identity(&row, order.len());
            match best.get_mut(&id) {
                None => {
                    order.push(id.clone());
                    best.insert(id, row);
                }
                Some(existing) => {
                    if non_empty_cells(&row) > non_empty_cells(existing) {
                        *existing = row;
                    }
                }
            }
        }
        // Report missing fields in schema order.
        let missing: Vec<String> = schema_columns
            .iter()
            .filter(|c| attempt_missing.contains(*c))
            .cloned()
            .collect();
        logs.push(AttemptLog {
            batch_id: batch.id,
            attempt,
            raw_output: raw,
            parse_ok: true,
            missing_fields: missing.clone(),
        });
        if missing.is_empty() {
            complete = true;
            break;
        }
        last_missing = missing;
    }

    let rows: Vec<Vec<String>> = if order.is_empty() {
        fallback_rows(batch, schema_columns)
    } else {
        let _ = complete;
        order.iter().map(|id| best[id].clone()).collect()
    };
    Ok((rows, logs))
}

/// Execute every batch, at most `workers` concurrently, and aggregate rows
/// ordered by (batch id, row order within the batch). The output is
/// identical whatever the worker count; a run that produces no rows at all
/// yields a single all-empty row so downstream stages always see a table.
pub fn execute_plan(
    batches: &[Batch],
    schema_columns: &[String],
    solver: &dyn BatchSolver,
    max_retries: u32,
    workers: usize,
    trace: Option<&TraceLog>,
) -> Result<(ResultTable, Vec<AttemptLog>), ExecError> {
    type BatchOutcome = Result<(Vec<Vec<String>>, Vec<AttemptLog>), ExecError>;
    let slots: Mutex<Vec<Option<BatchOutcome>>> =
        Mutex::new((0..batches.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = workers.max(1).min(batches.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= batches.len() {
                    break;
                }
                let request = SolverRequest {
                    batch: batches[i].clone(),
                    schema_columns: schema_columns.to_vec(),
                    shared_context: batch_context(&batches[i]),
                };
                let outcome = execute_batch(&request, solver, max_retries);
                slots.lock().expect("slot lock")[i] = Some(outcome);
            });
        }
    });

    let outcomes = slots.into_inner().expect("slot lock");
    let mut all_rows: Vec<Vec<String>> = Vec::new();
    let mut all_logs: Vec<AttemptLog> = Vec::new();
    for (batch, outcome) in batches.iter().zip(outcomes) {
        let outcome = outcome.expect("every batch slot filled");
        // Emit the batch manifest and attempt summary in batch order so the
        // trace is deterministic under any scheduling.
        match outcome {
            Ok((rows, logs)) => {
                if let Some(t) = trace {
                    t.append(
                        TraceStage::Execute,
                        serde_json::json!({
                            "batch": batch.id,
                            "mode": batch.manifest.mode,
                            "group_key": batch.manifest.group_key,
                            "row_indices": batch.row_indices,
                            "rationale": batch.manifest.rationale,
                            "attempts": logs.len(),
                            "parse_ok": logs.last().map(|l| l.parse_ok),
                            "rows": rows.len(),
                        }),
                    );
                }
                all_rows.extend(rows);
                all_logs.extend(logs);
            }
            Err(e) => {
                if let Some(t) = trace {
                    t.append(
                        TraceStage::Execute,
                        serde_json::json!({
                            "batch": batch.id,
                            "mode": batch.manifest.mode,
                            "group_key": batch.manifest.group_key,
                            "row_indices": batch.row_indices,
                            "rationale": batch.manifest.rationale,
                            "fatal": e.to_string(),
                        }),
                    );
                }
                return Err(e);
            }
        }
    }

    if all_rows.is_empty() {
        all_rows.push(vec![String::new(); schema_columns.len()]);
    }
    let table = ResultTable { columns: schema_columns.to_vec(), rows: all_rows };
    Ok((table, all_logs))
}

// ---------------------------------------------------------------------------
// Tool loop

/// A tool an environment offers to agents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
}

pub trait ToolEnvironment: Send + Sync {
    fn tools(&self) -> Vec<ToolSpec>;

    fn call(&self, name: &str, arguments: &Value) -> Result<String, BackendError>;
}

fn tool_loop_system(env: &dyn ToolEnvironment) -> String {
    let mut out = String::from(
        "You work in steps with tools. Every turn, reply with exactly one JSON object and nothing else: {\"think\": \"your reasoning\", \"tools\": [{\"name\": \"tool name\", \"arguments\": {...}}]}. Tool results arrive in the next user message.\nAvailable tools:\n",
    );
    for t in env.tools() {
        out.push_str(&format!("- {}: {}\n", t.name, t.description));
    }
    out.push_str("- final_answer: finish the task; arguments: {\"answer\": \"your complete answer\"}\n");
    out.push_str("Call final_answer exactly once, when the task is done.");
    out
}

/// One action turn as parsed from the agent reply.
struct Action {
    calls: Vec<(String, Value)>,
}

fn parse_action(reply: &str) -> Option<Action> {
    for v in extract_json_values(reply) {
        let Value::Object(obj) = &v else { continue };
        let Some(Value::Array(tools)) = obj.get("tools") else { continue };
        let mut calls = Vec::new();
        for t in tools {
            let name = t.get("name").and_then(Value::as_str)?.to_string();
            let arguments = t.get("arguments").cloned().unwrap_or(Value::Null);
            calls.push((name, arguments));
        }
        return Some(Action { calls });
    }
    None
}

/// Drive one agent through the JSON action protocol until it calls
/// final_answer or the step budget runs out (then the last reply is returned
/// as a best effort). Two unparseable actions in a row abort the loop.
pub fn run_tool_loop(
    chat: &dyn ChatBackend,
    env: &dyn ToolEnvironment,
    task: &str,
    max_steps: usize,
    sampling: &Value,
) -> Result<String, ToolLoopError> {
    let mut request = ChatRequest::user(tool_loop_system(env), task.to_string());
    request.sampling = sampling.clone();
    let mut consecutive_bad = 0u32;
    let mut last_reply = String::new();

    for _step in 0..max_steps.max(1) {
        let reply = chat.chat(&request)?;
        last_reply = reply.clone();
        let Some(action) = parse_action(&reply) else {
            consecutive_bad += 1;
            if consecutive_bad >= 2 {
                return Err(ToolLoopError::MalformedAction(truncate(&reply, 200)));
            }
            request.push(Role::Assistant, reply);
            request.push(
                Role::User,
                "That reply was not a valid action. Reply with exactly one JSON object with keys \"think\" and \"tools\".",
            );
            continue;
        };
        consecutive_bad = 0;

        let mut observations = Vec::new();
        for (name, arguments) in &action.calls {
            if name == "final_answer" {
                let answer = match arguments.get("answer") {
                    Some(Value::String(s)) => s.clone(),
                    Some(other) => serde_json::to_string(other).unwrap_or_default(),
                    None => String::new(),
                };
                return Ok(answer);
            }
            let observation = match env.call(name, arguments) {
                Ok(text) => text,
                Err(e) => format!("error: {e}"),
            };
            observations.push(format!("{name} returned:\n{observation}"));
        }
        request.push(Role::Assistant, reply);
        let feedback = if observations.is_empty() {
            "No tools were called. Call a tool or final_answer.".to_string()
        } else {
            observations.join("\n\n")
        };
        request.push(Role::Tool, feedback);
    }
    Ok(last_reply)
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        s.to_string()
    } else {
        let mut end = max;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}***", &s[..end])
    }
}
