//! Experiential memory. Finished runs are committed as records (query,
//! embedding, decision, trace digest, utility). Hints distilled from those
//! records carry advice forward; before a new run, the nearest records per
//! outcome label select hints and exemplars, and a chat call projects them
//! into short task-specific guidance. Feedback after each run adjusts hint
//! scores; a periodic distillation pass clusters records, critiques the
//! hints per cluster, and merges crowded clusters down.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backends::{ChatBackend, ChatRequest};
use crate::types::Decision;

/// Neighbors retrieved per outcome label.
pub const K_NEIGHBORS: usize = 5;

/// Hints injected into one prior.
pub const K_HINTS: usize = 3;

/// Score a hint is born with.
pub const HINT_INITIAL_SCORE: i64 = 2;

/// Above this many hints, a cluster gets a merge pass.
pub const MAX_HINTS_PER_CLUSTER: usize = 3;

/// Critique operations applied per cluster per distillation.
pub const MAX_OPS_PER_CLUSTER: usize = 4;

/// Distillation runs every this many commits.
pub const DISTILL_EVERY: u64 = 5;

pub const GUIDANCE_PROMPT: &str = "You prepare guidance for an agent about to plan a wide-search task. From the accumulated hints below, write at most 3 numbered insights that apply to the new task. Be concrete about batching strategy, grouping attributes, and known pitfalls. Output only the numbered lines.";

pub const CONTRAST_PROMPT: &str = "You maintain a small set of hints for planning wide-search tasks. Below are a successful run and a failed run of similar tasks, plus the current hints for this task family. Propose operations, one per line:\nADD: <new hint>\nEDIT <n>: <replacement text>\nREMOVE <n>\nAGREE <n>\nUse at most 4 operations and touch each existing hint at most once. Hints must be short, general, and actionable.";

pub const SUCCESS_PROMPT: &str = "You maintain a small set of hints for planning wide-search tasks. Below are successful runs from one task family, plus the current hints. Distill what made them work into operations, one per line:\nADD: <new hint>\nEDIT <n>: <replacement text>\nREMOVE <n>\nAGREE <n>\nUse at most 4 operations and touch each existing hint at most once. Hints must be short, general, and actionable.";

pub const MERGE_PROMPT: &str = "These hints overlap. Rewrite them as fewer, sharper hints (one per line, plain text, no numbering). Keep every distinct lesson; drop duplicates.";

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("instance {0} was already committed in this store")]
    DoubleCommit(String),
    #[error("memory store corrupted: {file}: {detail}")]
    Corrupt { file: String, detail: String },
    #[error("memory store io: {0}")]
    Io(#[from] std::io::Error),
}

/// Compact footprint of one run, stored alongside the decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDigest {
    /// (rows, columns) of the task matrix.
    pub matrix_shape: (usize, usize),
    pub template: String,
    pub strategy_mode: String,
    pub batch_count: usize,
    pub scout_calls: usize,
    pub scout_tools: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
}

/// One committed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: usize,
    pub query_text: String,
    /// Unit-norm embedding of the query text.
    pub embedding: Vec<f32>,
    pub decision: Decision,
    pub trace_digest: TraceDigest,
    pub utility: crate::types::Utility,
}

/// A distilled piece of advice with a usefulness score and the records it
/// came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hint {
    pub id: u64,
    pub text: String,
    pub score: i64,
    pub provenance: BTreeSet<usize>,
}

/// Pointer to a committed run used as an exemplar inside a prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarRef {
    pub record_id: usize,
    pub query_text: String,
    pub decision: Decision,
}

/// What the planner receives ahead of a run: projected guidance, one
/// positive and one negative exemplar when available, and the hint ids the
/// guidance drew on (for feedback after the run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperientialPrior {
    pub guidance: String,
    pub positive_exemplar: Option<ExemplarRef>,
    pub negative_exemplar: Option<ExemplarRef>,
    pub used_hints: Vec<u64>,
}

/// Frozen view of the store. Runs read snapshots so concurrent trials of one
/// instance all see the same memory.
#[derive(Debug, Clone)]
pub struct MemorySnapshot {
    pub records: Arc<Vec<Record>>,
    pub hints: Arc<Vec<Hint>>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
struct Meta {
    next_record_id: usize,
    next_hint_id: u64,
    commits: u64,
    committed_instances: BTreeSet<String>,
}

/// The growing store. One writer at a time; readers take snapshots.
#[derive(Debug, Default)]
pub struct MemoryStore {
    records: Vec<Record>,
    hints: Vec<Hint>,
    meta: Meta,
}

fn l2(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

fn unit(mut v: Vec<f32>) -> Vec<f32> {
    let n = l2(&v);
    if n > 0.0 {
        for x in &mut v {
            *x /= n;
        }
    }
    v
}

/// Cosine similarity; embeddings in the store are unit vectors so this is a
/// dot product, but lengths are respected for safety.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na = l2(a);
    let nb = l2(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Record ids retrieved around a query, split by outcome label, each ordered
/// by descending similarity.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Neighbors {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

impl Neighbors {
    pub fn all(&self) -> BTreeSet<usize> {
        self.positive.iter().chain(self.negative.iter()).copied().collect()
    }
}

/// Top-k most similar records per label. Ties break toward the lower id.
pub fn retrieve_neighbors(snapshot: &MemorySnapshot, query: &[f32], k: usize) -> Neighbors {
    let mut scored: Vec<(usize, f32, u8)> = snapshot
        .records
        .iter()
        .map(|r| (r.id, cosine(query, &r.embedding), r.utility.label()))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    let mut out = Neighbors::default();
    for (id, _, label) in scored {
        let side = if label == 1 { &mut out.positive } else { &mut out.negative };
        if side.len() < k {
            side.push(id);
        }
        if out.positive.len() >= k && out.negative.len() >= k {
            break;
        }
    }
    out
}

/// Hints whose provenance intersects the retrieved neighbor set.
pub fn candidate_hints<'a>(snapshot: &'a MemorySnapshot, neighbors: &BTreeSet<usize>) -> Vec<&'a Hint> {
    snapshot
        .hints
        .iter()
        .filter(|h| h.provenance.iter().any(|p| neighbors.contains(p)))
        .collect()
}

/// Rank candidates by score plus neighbor overlap and keep the top k. Ties
/// prefer the higher raw score, then the lower id.
pub fn select_hints<'a>(
    candidates: &[&'a Hint],
    neighbors: &BTreeSet<usize>,
    k: usize,
) -> Vec<&'a Hint> {
    let mut scored: Vec<(&&Hint, i64)> = candidates
        .iter()
        .map(|h| {
            let overlap = h.provenance.iter().filter(|p| neighbors.contains(p)).count() as i64;
            (h, h.score + overlap)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then(b.0.score.cmp(&a.0.score))
            .then(a.0.id.cmp(&b.0.id))
    });
    scored.into_iter().take(k).map(|(h, _)| *h).collect()
}

fn exemplar_of(snapshot: &MemorySnapshot, query: &[f32], ids: &[usize]) -> Option<ExemplarRef> {
    ids.iter()
        .filter_map(|id| snapshot.records.iter().find(|r| r.id == *id))
        .map(|r| (r, cosine(query, &r.embedding)))
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal).then(b.0.id.cmp(&a.0.id)))
        .map(|(r, _)| ExemplarRef {
            record_id: r.id,
            query_text: r.query_text.clone(),
            decision: r.decision.clone(),
        })
}

/// Most similar record per neighbor set, as prior exemplars.
pub fn select_exemplars(
    snapshot: &MemorySnapshot,
    query: &[f32],
    neighbors: &Neighbors,
) -> (Option<ExemplarRef>, Option<ExemplarRef>) {
    (
        exemplar_of(snapshot, query, &neighbors.positive),
        exemplar_of(snapshot, query, &neighbors.negative),
    )
}

/// Keep only numbered insight lines, at most `max` of them. A reply with no
/// numbered lines passes through whole.
fn clip_numbered(reply: &str, max: usize) -> String {
    let numbered: Vec<&str> = reply
        .lines()
        .map(str::trim)
        .filter(|l| {
            let mut chars = l.chars();
            matches!(chars.next(), Some(c) if c.is_ascii_digit())
                && matches!(chars.next(), Some('.') | Some(')') | Some(':'))
        })
        .collect();
    if numbered.is_empty() {
        reply.trim().to_string()
    } else {
        numbered.into_iter().take(max).collect::<Vec<_>>().join("\n")
    }
}

/// Project selected hints into guidance for this query. On a backend
/// failure the raw hint texts are joined instead, so a prior is still
/// produced.
pub fn project_guidance(chat: &dyn ChatBackend, query_text: &str, hints: &[&Hint]) -> String {
    let hint_lines: Vec<String> = hints
        .iter()
        .enumerate()
        .map(|(i, h)| format!("{}. {}", i + 1, h.text))
        .collect();
    let user = format!("New task:\n{}\n\nHints:\n{}", query_text, hint_lines.join("\n"));
    match chat.chat(&ChatRequest::user(GUIDANCE_PROMPT, user)) {
        Ok(reply) => clip_numbered(&reply, K_HINTS),
        Err(_) => hint_lines.join("\n"),
    }
}

/// Assemble the full prior for a query, or None when the store has nothing
/// to offer (cold start).
pub fn build_prior(
    snapshot: &MemorySnapshot,
    chat: &dyn ChatBackend,
    query_text: &str,
    query_embedding: &[f32],
) -> Option<ExperientialPrior> {
    if snapshot.records.is_empty() {
        return None;
    }
    let neighbors = retrieve_neighbors(snapshot, query_embedding, K_NEIGHBORS);
    let neighbor_set = neighbors.all();
    let candidates = candidate_hints(snapshot, &neighbor_set);
    let selected = select_hints(&candidates, &neighbor_set, K_HINTS);
    let (positive_exemplar, negative_exemplar) = select_exemplars(snapshot, query_embedding, &neighbors);
    let guidance = if selected.is_empty() {
        String::new()
    } else {
        project_guidance(chat, query_text, &selected)
    };
    Some(ExperientialPrior {
        guidance,
        positive_exemplar,
        negative_exemplar,
        used_hints: selected.iter().map(|h| h.id).collect(),
    })
}

impl MemoryStore {
    pub fn new() -> Self {
        MemoryStore::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn hints(&self) -> &[Hint] {
        &self.hints
    }

    pub fn commit_count(&self) -> u64 {
        self.meta.commits
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot {
            records: Arc::new(self.records.clone()),
            hints: Arc::new(self.hints.clone()),
        }
    }

    /// Commit one run for an instance. A second commit for the same instance
    /// id is an error; N trials of an instance must be reduced to one best
    /// run before committing. The embedding is normalized on the way in, and
    /// feedback is applied to the hints the run's prior used. Returns the new
    /// record id and any feedback warnings.
    #[allow(clippy::too_many_arguments)]
    pub fn commit(
        &mut self,
        instance_id: &str,
        query_text: String,
        embedding: Vec<f32>,
        decision: Decision,
        trace_digest: TraceDigest,
        utility: crate::types::Utility,
        used_hints: &[u64],
    ) -> Result<(usize, Vec<String>), MemoryError> {
        if self.meta.committed_instances.contains(instance_id) {
            return Err(MemoryError::DoubleCommit(instance_id.to_string()));
        }
        let id = self.meta.next_record_id;
        self.meta.next_record_id += 1;
        self.meta.commits += 1;
        self.meta.committed_instances.insert(instance_id.to_string());
        let label = utility.label();
        self.records.push(Record {
            id,
            query_text,
            embedding: unit(embedding),
            decision,
            trace_digest,
            utility,
        });
        let warnings = self.update_hint_feedback(used_hints, label, id);
        Ok((id, warnings))
    }

    /// Reward or penalize the hints one run relied on: +2 on success, -1 on
    /// failure, provenance extended with the new record. Hints at or below
    /// zero are pruned. Stale ids produce warnings, not errors.
    pub fn update_hint_feedback(
        &mut self,
        used_hints: &[u64],
        label: u8,
        record_id: usize,
    ) -> Vec<String> {
        let mut warnings = Vec::new();
        for id in used_hints {
            match self.hints.iter_mut().find(|h| h.id == *id) {
                Some(h) => {
                    h.score += if label == 1 { 2 } else { -1 };
                    h.provenance.insert(record_id);
                }
                None => warnings.push(format!("hint {id} no longer exists; feedback dropped")),
            }
        }
        self.hints.retain(|h| h.score > 0);
        warnings
    }

    fn add_hint(&mut self, text: String, provenance: BTreeSet<usize>) -> u64 {
        let id = self.meta.next_hint_id;
        self.meta.next_hint_id += 1;
        self.hints.push(Hint { id, text, score: HINT_INITIAL_SCORE, provenance });
        id
    }

    /// Drop hints whose score has fallen to zero or below and report how
    /// many went. Feedback already prunes as it runs; this is for stores
    /// edited or imported from elsewhere.
    pub fn prune(&mut self) -> usize {
        let before = self.hints.len();
        self.hints.retain(|h| h.score > 0);
        before - self.hints.len()
    }

    // -- persistence --------------------------------------------------------

    /// Load a store from a directory. A directory without a meta file is a
    /// fresh, empty store; unreadable contents are reported with the failing
    /// file named.
    pub fn load(dir: &Path) -> Result<Self, MemoryError> {
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Ok(MemoryStore::new());
        }
        let corrupt = |file: &str, detail: String| MemoryError::Corrupt {
            file: file.to_string(),
            detail,
        };
        let meta_text = std::fs::read_to_string(&meta_path)?;
        let meta: Meta =
            serde_json::from_str(&meta_text).map_err(|e| corrupt("meta.json", e.to_string()))?;

        let mut records = Vec::new();
        let records_path = dir.join("records.jsonl");
        if records_path.exists() {
            let text = std::fs::read_to_string(&records_path)?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let r: Record = serde_json::from_str(line)
                    .map_err(|e| corrupt("records.jsonl", format!("line {}: {e}", i + 1)))?;
                records.push(r);
            }
        }

        let mut hints = Vec::new();
        let hints_path = dir.join("hints.json");
        if hints_path.exists() {
            let text = std::fs::read_to_string(&hints_path)?;
            hints = serde_json::from_str(&text).map_err(|e| corrupt("hints.json", e.to_string()))?;
        }

        Ok(MemoryStore { records, hints, meta })
    }

    /// Persist the store: records as JSONL, hints and meta as JSON. Each
    /// file is written to a temporary sibling and renamed into place, so a
    /// crash never leaves a half-written file behind the real name.
    pub fn save(&self, dir: &Path) -> Result<(), MemoryError> {
        std::fs::create_dir_all(dir)?;
        let mut records_text = String::new();
        for r in &self.records {
            records_text.push_str(&serde_json::to_string(r).expect("record serializes"));
            records_text.push('\n');
        }
        atomic_write(&dir.join("records.jsonl"), records_text.as_bytes())?;
        let hints_text = serde_json::to_string_pretty(&self.hints).expect("hints serialize");
        atomic_write(&dir.join("hints.json"), hints_text.as_bytes())?;
        let meta_text = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        atomic_write(&dir.join("meta.json"), meta_text.as_bytes())?;
        Ok(())
    }

    // -- distillation -------------------------------------------------------

    /// Cluster all records, critique each cluster's hints against its
    /// outcomes, and merge crowded clusters down to a few sharp hints.
    pub fn distill(&mut self, chat: &dyn ChatBackend) -> DistillReport {
        let mut report = DistillReport::default();
        if self.records.is_empty() {
            return report;
        }
        let clusters = cluster_records(&self.records);
        report.clusters = clusters.clone();

        for (ci, cluster) in clusters.iter().enumerate() {
            let cluster_set: BTreeSet<usize> = cluster.iter().copied().collect();
            let members: Vec<&Record> = self
                .records
                .iter()
                .filter(|r| cluster_set.contains(&r.id))
                .collect();
            let positives: Vec<&Record> =
                members.iter().copied().filter(|r| r.utility.label() == 1).collect();
            let negatives: Vec<&Record> =
                members.iter().copied().filter(|r| r.utility.label() == 0).collect();

            // Hints belonging to this cluster: assigned where their
            // provenance overlaps most (earlier cluster wins ties).
            let cluster_hints: Vec<u64> = self
                .hints
                .iter()
                .filter(|h| hint_cluster(h, &clusters) == Some(ci))
                .map(|h| h.id)
                .collect();

            if negatives.is_empty() && positives.is_empty() {
                continue;
            }
            // Failure-only clusters carry no proven pattern to distill; their
            // lesson arrives through score feedback instead.
            if positives.is_empty() {
                continue;
            }

            let prompt = if negatives.is_empty() {
                render_success_prompt(&positives, &self.hint_texts(&cluster_hints))
            } else {
                let (p, n) = contrast_pair(&positives, &negatives);
                render_contrast_prompt(p, n, &self.hint_texts(&cluster_hints))
            };
            let system = if negatives.is_empty() { SUCCESS_PROMPT } else { CONTRAST_PROMPT };
            let reply = match chat.chat(&ChatRequest::user(system, prompt)) {
                Ok(r) => r,
                Err(e) => {
                    report
                        .warnings
                        .push(format!("cluster {ci}: critique call failed: {e}"));
                    continue;
                }
            };
            let (ops, mut parse_warnings) = parse_ops(&reply);
            report.warnings.append(&mut parse_warnings);
            self.apply_ops(ops, &cluster_hints, &cluster_set, &mut report);

            // Merge pass when the cluster is crowded.
            let crowded: Vec<u64> = self
                .hints
                .iter()
                .filter(|h| hint_cluster(h, &clusters) == Some(ci))
                .map(|h| h.id)
                .collect();
            if crowded.len() > MAX_HINTS_PER_CLUSTER {
                self.merge_cluster_hints(chat, ci, &crowded, &cluster_set, &mut report);
            }
        }
        report
    }

    fn hint_texts(&self, ids: &[u64]) -> Vec<String> {
        ids.iter()
            .filter_map(|id| self.hints.iter().find(|h| h.id == *id))
            .map(|h| h.text.clone())
            .collect()
    }

    fn apply_ops(
        &mut self,
        ops: Vec<HintOp>,
        cluster_hints: &[u64],
        cluster_set: &BTreeSet<usize>,
        report: &mut DistillReport,
    ) {
        let mut touched: BTreeSet<u64> = BTreeSet::new();
        let mut applied = 0usize;
        for op in ops {
            if applied >= MAX_OPS_PER_CLUSTER {
                report
                    .warnings
                    .push("op budget exhausted; remaining operations dropped".to_string());
                break;
            }
            let resolve = |n: usize| -> Option<u64> { cluster_hints.get(n.checked_sub(1)?).copied() };
            match op {
                HintOp::Add(text) => {
                    self.add_hint(text, cluster_set.clone());
                    report.hints_added += 1;
                    applied += 1;
                }
                HintOp::Edit(n, text) => {
                    let Some(id) = resolve(n) else {
                        report.warnings.push(format!("EDIT {n}: no such hint; skipped"));
                        continue;
                    };
                    if !touched.insert(id) {
                        report.warnings.push(format!("EDIT {n}: hint already touched; skipped"));
                        continue;
                    }
                    if let Some(h) = self.hints.iter_mut().find(|h| h.id == id) {
                        h.text = text;
                        h.provenance.extend(cluster_set.iter().copied());
                        report.hints_edited += 1;
                        applied += 1;
                    }
                }
                HintOp::Remove(n) => {
                    let Some(id) = resolve(n) else {
                        report.warnings.push(format!("REMOVE {n}: no such hint; skipped"));
                        continue;
                    };
                    if !touched.insert(id) {
                        report
                            .warnings
                            .push(format!("REMOVE {n}: hint already touched; skipped"));
                        continue;
                    }
                    self.hints.retain(|h| h.id != id);
                    report.hints_removed += 1;
                    applied += 1;
                }
                HintOp::Agree(n) => {
                    let Some(id) = resolve(n) else {
                        report.warnings.push(format!("AGREE {n}: no such hint; skipped"));
                        continue;
                    };
                    if !touched.insert(id) {
                        report.warnings.push(format!("AGREE {n}: hint already touched; skipped"));
                        continue;
                    }
                    if let Some(h) = self.hints.iter_mut().find(|h| h.id == id) {
                        h.score += 1;
                        h.provenance.extend(cluster_set.iter().copied());
                        report.hints_agreed += 1;
                        applied += 1;
                    }
                }
            }
        }
    }

    fn merge_cluster_hints(
        &mut self,
        chat: &dyn ChatBackend,
        ci: usize,
        ids: &[u64],
        cluster_set: &BTreeSet<usize>,
        report: &mut DistillReport,
    ) {
        let listing = self
            .hint_texts(ids)
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{}. {}", i + 1, t))
            .collect::<Vec<_>>()
            .join("\n");
        let reply = match chat.chat(&ChatRequest::user(MERGE_PROMPT, listing)) {
            Ok(r) => r,
            Err(e) => {
                report
                    .warnings
                    .push(format!("cluster {ci}: merge call failed, hints kept: {e}"));
                return;
            }
        };
        let merged: Vec<String> = reply
            .lines()
            .map(|l| l.trim().trim_start_matches(['-', '*']).trim())
            .map(|l| strip_leading_number(l).trim().to_string())
            .filter(|l| !l.is_empty())
            .take(MAX_HINTS_PER_CLUSTER)
            .collect();
        if merged.is_empty() {
            report
                .warnings
                .push(format!("cluster {ci}: merge reply had no hints, originals kept"));
            return;
        }
        // Replace the crowded set with fresh hints that restart the score
        // ledger and inherit the whole cluster as provenance.
        self.hints.retain(|h| !ids.contains(&h.id));
        for text in merged {
            self.add_hint(text, cluster_set.clone());
            report.hints_merged += 1;
        }
    }
}

fn strip_leading_number(l: &str) -> &str {
    let rest = l.trim_start_matches(|c: char| c.is_ascii_digit());
    if rest.len() != l.len() {
        rest.trim_start_matches(['.', ')', ':'])
    } else {
        l
    }
}

/// Which cluster a hint belongs to: the one its provenance overlaps most,
/// earlier clusters winning ties. None when nothing overlaps.
fn hint_cluster(hint: &Hint, clusters: &[Vec<usize>]) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (ci, cluster) in clusters.iter().enumerate() {
        let overlap = cluster.iter().filter(|id| hint.provenance.contains(id)).count();
        if overlap == 0 {
            continue;
        }
        match best {
            Some((_, b)) if overlap <= b => {}
            _ => best = Some((ci, overlap)),
        }
    }
    best.map(|(ci, _)| ci)
}

/// Group records by mutual nearest neighbors: each record links to its most
/// similar other record (ties toward the lower id) and the undirected
/// components are the clusters, ordered by their smallest record id.
pub fn cluster_records(records: &[Record]) -> Vec<Vec<usize>> {
    if records.is_empty() {
        return Vec::new();
    }
    if records.len() == 1 {
        return vec![vec![records[0].id]];
    }
    let mut adjacency: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for r in records {
        let mut best: Option<(usize, f32)> = None;
        for other in records {
            if other.id == r.id {
                continue;
            }
            let sim = cosine(&r.embedding, &other.embedding);
            let better = match best {
                None => true,
                Some((bid, bsim)) => sim > bsim || (sim == bsim && other.id < bid),
            };
            if better {
                best = Some((other.id, sim));
            }
        }
        if let Some((nn, _)) = best {
            adjacency.entry(r.id).or_default().insert(nn);
            adjacency.entry(nn).or_default().insert(r.id);
        }
    }
    // Connected components over the undirected 1-NN graph.
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for r in records {
        if seen.contains(&r.id) {
            continue;
        }
        let mut component = Vec::new();
        let mut stack = vec![r.id];
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            component.push(id);
            if let Some(nbrs) = adjacency.get(&id) {
                for n in nbrs {
                    if !seen.contains(n) {
                        stack.push(*n);
                    }
                }
            }
        }
        component.sort_unstable();
        clusters.push(component);
    }
    clusters.sort_by_key(|c| c[0]);
    clusters
}

/// The most similar (positive, negative) pair in a mixed cluster, ties
/// resolved toward lower ids.
fn contrast_pair<'a>(positives: &[&'a Record], negatives: &[&'a Record]) -> (&'a Record, &'a Record) {
    let mut best: Option<(&Record, &Record, f32)> = None;
    for p in positives {
        for n in negatives {
            let sim = cosine(&p.embedding, &n.embedding);
            let better = match best {
                None => true,
                Some((bp, bn, bsim)) => {
                    sim > bsim
                        || (sim == bsim && (p.id < bp.id || (p.id == bp.id && n.id < bn.id)))
                }
            };
            if better {
                best = Some((p, n, sim));
            }
        }
    }
    let (p, n, _) = best.expect("both sides non-empty");
    (p, n)
}

fn record_digest(r: &Record) -> String {
    format!(
        "query: {} | strategy: {} | batches: {} | metrics: {:?} | label: {}",
        r.query_text,
        r.trace_digest.strategy_mode,
        r.trace_digest.batch_count,
        r.utility.metrics(),
        r.utility.label()
    )
}

fn render_hints_block(hints: &[String]) -> String {
    if hints.is_empty() {
        "(no hints yet)".to_string()
    } else {
        hints
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{}. {}", i + 1, t))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn render_contrast_prompt(p: &Record, n: &Record, hints: &[String]) -> String {
    format!(
        "Succeeded:\n{}\n\nFailed:\n{}\n\nCurrent hints:\n{}",
        record_digest(p),
        record_digest(n),
        render_hints_block(hints)
    )
}

fn render_success_prompt(positives: &[&Record], hints: &[String]) -> String {
    let runs = positives.iter().map(|r| record_digest(r)).collect::<Vec<_>>().join("\n");
    format!("Successful runs:\n{}\n\nCurrent hints:\n{}", runs, render_hints_block(hints))
}

/// A critique operation parsed from a distillation reply.
#[derive(Debug, Clone, PartialEq, Eq)]
enum HintOp {
    Add(String),
    Edit(usize, String),
    Remove(usize),
    Agree(usize),
}

/// Parse critique lines. Anything that is not an operation is skipped with a
/// warning so a chatty reply cannot corrupt the hint set.
fn parse_ops(reply: &str) -> (Vec<HintOp>, Vec<String>) {
    let mut ops = Vec::new();
    let mut warnings = Vec::new();
    for raw in reply.lines() {
        let line = raw.trim().trim_start_matches(['-', '*']).trim();
        if line.is_empty() {
            continue;
        }
        let upper = line.to_ascii_uppercase();
        let parsed = if let Some(rest) = upper.strip_prefix("ADD:") {
            let start = line.len() - rest.len();
            let text = line[start..].trim();
            (!text.is_empty()).then(|| HintOp::Add(text.to_string()))
        } else if upper.starts_with("EDIT ") {
            parse_indexed(line, "EDIT").and_then(|(n, text)| {
                let text = text?;
                Some(HintOp::Edit(n, text))
            })
        } else if upper.starts_with("REMOVE ") {
            parse_indexed(line, "REMOVE").map(|(n, _)| HintOp::Remove(n))
        } else if upper.starts_with("AGREE ") {
            parse_indexed(line, "AGREE").map(|(n, _)| HintOp::Agree(n))
        } else {
            None
        };
        match parsed {
            Some(op) => ops.push(op),
            None => warnings.push(format!("unparseable distill line skipped: {line:?}")),
        }
    }
    (ops, warnings)
}

/// Parse `KEYWORD <n>[: text]`, returning the 1-based index and optional
/// non-empty trailing text.
fn parse_indexed(line: &str, keyword: &str) -> Option<(usize, Option<String>)> {
    let rest = line[keyword.len()..].trim_start();
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        return None;
    }
    let n: usize = digits.parse().ok()?;
    let tail = rest[digits.len()..].trim_start();
    let text = tail.strip_prefix(':').map(|t| t.trim().to_string()).filter(|t| !t.is_empty());
    Some((n, text))
}

/// What one distillation pass did.
#[derive(Debug, Clone, Default)]
pub struct DistillReport {
    pub clusters: Vec<Vec<usize>>,
    pub hints_added: usize,
    pub hints_edited: usize,
    pub hints_removed: usize,
    pub hints_agreed: usize,
    pub hints_merged: usize,
    pub warnings: Vec<String>,
}


/// Write bytes to `path` atomically via a temporary sibling file.
fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}
