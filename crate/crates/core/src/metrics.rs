//! Table scoring. All comparisons run on normalized cells so formatting
//! differences ("1,200.50" vs "1200.5", stray punctuation, case) never count
//! as errors. Scores are plain functions of (prediction, gold); aggregation
//! over repeated runs averages per-run scores rather than re-deriving F1
//! from averaged counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::types::{LabelRule, ResultTable, ValidationError, EMPTY_SENTINELS};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("aggregate needs at least one run")]
    NoRuns,
    #[error("gold table has no column named {0:?}")]
    UnknownColumn(String),
    #[error("no markdown table found in text")]
    NoTableFound,
}

/// Canonical form of one cell: whitespace collapsed, case folded, surrounding
/// punctuation stripped, numbers reformatted, and no-value spellings mapped
/// to the empty string.
pub fn normalize_cell(cell: &str) -> String {
    let s = collapse_ws(cell);
    if s.is_empty() {
        return s;
    }
    let folded = s.to_lowercase();
    if EMPTY_SENTINELS.contains(&folded.as_str()) {
        return String::new();
    }
    if let Some(num) = canonical_number(&s) {
        return num;
    }
    let stripped = collapse_ws(s.trim_matches(is_strippable_punct));
    if stripped != s {
        // Stripping may expose a sentinel ("(N/A)") or a number ("$12").
        return normalize_cell(&stripped);
    }
    folded
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_strippable_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '\u{201c}' | '\u{201d}' | '\u{2018}' | '\u{2019}' | '\u{00ab}' | '\u{00bb}')
}

/// Shortest canonical decimal for a numeric string, thousands separators
/// removed. Returns None when `s` is not a number.
fn canonical_number(s: &str) -> Option<String> {
    let cleaned: String = s.chars().filter(|c| *c != ',').collect();
    if cleaned.is_empty() || cleaned.contains(' ') {
        return None;
    }
    // Literal words like "inf"/"nan" parse as floats; treat them as text.
    if !cleaned.chars().any(|c| c.is_ascii_digit()) {
        return None;
    }
    if let Ok(i) = cleaned.parse::<i128>() {
        return Some(i.to_string());
    }
    match cleaned.parse::<f64>() {
        Ok(f) if f.is_finite() => {
            if f == 0.0 {
                return Some("0".to_string());
            }
            Some(format!("{f}"))
        }
        _ => None,
    }
}

fn normalized_columns(t: &ResultTable) -> Vec<String> {
    t.columns.iter().map(|c| normalize_cell(c)).collect()
}

/// Map each gold column to the index of the pred column with the same
/// normalized header, if any.
fn align_columns(pred: &ResultTable, gold: &ResultTable) -> Vec<Option<usize>> {
    let pred_norm = normalized_columns(pred);
    normalized_columns(gold)
        .iter()
        .map(|g| pred_norm.iter().position(|p| p == g))
        .collect()
}

/// Pred rows projected onto gold column order, cells normalized. Columns the
/// prediction lacks contribute empty cells.
fn aligned_rows(pred: &ResultTable, gold: &ResultTable) -> Vec<Vec<String>> {
    let align = align_columns(pred, gold);
    pred.rows
        .iter()
        .map(|row| {
            align
                .iter()
                .map(|slot| slot.map(|i| normalize_cell(&row[i])).unwrap_or_default())
                .collect()
        })
        .collect()
}

fn gold_rows_normalized(gold: &ResultTable) -> Vec<Vec<String>> {
    gold.rows
        .iter()
        .map(|row| row.iter().map(|c| normalize_cell(c)).collect())
        .collect()
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn f1(p: f64, r: f64) -> f64 {
    safe_div(2.0 * p * r, p + r)
}

/// 1.0 iff the tables hold the same columns and the same rows after
/// normalization. Row and column order do not matter; multiplicity does.
pub fn success_rate(pred: &ResultTable, gold: &ResultTable) -> f64 {
    let mut pred_cols = normalized_columns(pred);
    let mut gold_cols = normalized_columns(gold);
    pred_cols.sort();
    gold_cols.sort();
    if pred_cols != gold_cols {
        return 0.0;
    }
    let mut pred_rows = aligned_rows(pred, gold);
    let mut gold_rows = gold_rows_normalized(gold);
    pred_rows.sort();
    gold_rows.sort();
    if pred_rows == gold_rows {
        1.0
    } else {
        0.0
    }
}

/// Precision/recall/F1 over whole rows, each row a normalized cell tuple in
/// gold column order. Set semantics: duplicate rows count once.
pub fn row_scores(pred: &ResultTable, gold: &ResultTable) -> (f64, f64, f64) {
    let pred_rows: std::collections::BTreeSet<Vec<String>> =
        aligned_rows(pred, gold).into_iter().collect();
    let gold_rows: std::collections::BTreeSet<Vec<String>> =
        gold_rows_normalized(gold).into_iter().collect();
    let hit = pred_rows.intersection(&gold_rows).count() as f64;
    let p = safe_div(hit, pred_rows.len() as f64);
    let r = safe_div(hit, gold_rows.len() as f64);
    (p, r, f1(p, r))
}

/// Whether item scoring pairs each cell with its column name (default) or
/// scores bare cell values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemPairing {
    #[default]
    ColumnValue,
    ValueOnly,
}

fn item_multiset(t: &ResultTable, pairing: ItemPairing) -> BTreeMap<(String, String), usize> {
    let cols = normalized_columns(t);
    let mut out: BTreeMap<(String, String), usize> = BTreeMap::new();
    for row in &t.rows {
        for (j, cell) in row.iter().enumerate() {
            let v = normalize_cell(cell);
            if v.is_empty() {
                continue;
            }
            let key = match pairing {
                ItemPairing::ColumnValue => (cols[j].clone(), v),
                ItemPairing::ValueOnly => (String::new(), v),
            };
            *out.entry(key).or_insert(0) += 1;
        }
    }
    out
}

/// Precision/recall/F1 over individual non-empty cells as a multiset.
pub fn item_scores(pred: &ResultTable, gold: &ResultTable, pairing: ItemPairing) -> (f64, f64, f64) {
    let pred_items = item_multiset(pred, pairing);
    let gold_items = item_multiset(gold, pairing);
    let mut hit = 0usize;
    let mut pred_total = 0usize;
    for (key, n) in &pred_items {
        pred_total += n;
        if let Some(m) = gold_items.get(key) {
            hit += n.min(m);
        }
    }
    let gold_total: usize = gold_items.values().sum();
    let p = safe_div(hit as f64, pred_total as f64);
    let r = safe_div(hit as f64, gold_total as f64);
    (p, r, f1(p, r))
}

/// Precision/recall/F1 over header sets.
pub fn column_scores(pred: &ResultTable, gold: &ResultTable) -> (f64, f64, f64) {
    let pred_cols: std::collections::BTreeSet<String> = normalized_columns(pred).into_iter().collect();
    let gold_cols: std::collections::BTreeSet<String> = normalized_columns(gold).into_iter().collect();
    let hit = pred_cols.intersection(&gold_cols).count() as f64;
    let p = safe_div(hit, pred_cols.len() as f64);
    let r = safe_div(hit, gold_cols.len() as f64);
    (p, r, f1(p, r))
}

/// 1.0 iff the prediction's core-entity column holds exactly the gold set of
/// values (normalized, duplicates ignored). A prediction lacking the column
/// scores 0; gold lacking it is a caller error.
pub fn ce_accuracy(
    pred: &ResultTable,
    gold: &ResultTable,
    core_entity_column: &str,
) -> Result<f64, MetricsError> {
    let gold_idx = gold
        .column_index(core_entity_column)
        .ok_or_else(|| MetricsError::UnknownColumn(core_entity_column.to_string()))?;
    let Some(pred_idx) = pred.column_index(core_entity_column) else {
        return Ok(0.0);
    };
    let pred_vals: std::collections::BTreeSet<String> = pred
        .rows
        .iter()
        .map(|r| normalize_cell(&r[pred_idx]))
        .collect();
    let gold_vals: std::collections::BTreeSet<String> = gold
        .rows
        .iter()
        .map(|r| normalize_cell(&r[gold_idx]))
        .collect();
    Ok(if pred_vals == gold_vals { 1.0 } else { 0.0 })
}

/// Knobs for [`score_table`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScoreOptions {
    #[serde(default)]
    pub item_pairing: ItemPairing,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub core_entity_column: Option<String>,
}

/// All per-run scores for one (prediction, gold) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub success_rate: f64,
    pub row_precision: f64,
    pub row_recall: f64,
    pub row_f1: f64,
    pub item_precision: f64,
    pub item_recall: f64,
    pub item_f1: f64,
    pub column_precision: f64,
    pub column_recall: f64,
    pub column_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce_accuracy: Option<f64>,
}

impl RunMetrics {
    /// Named view used for threshold rules and aggregation.
    pub fn as_map(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("success_rate".to_string(), self.success_rate);
        m.insert("row_precision".to_string(), self.row_precision);
        m.insert("row_recall".to_string(), self.row_recall);
        m.insert("row_f1".to_string(), self.row_f1);
        m.insert("item_precision".to_string(), self.item_precision);
        m.insert("item_recall".to_string(), self.item_recall);
        m.insert("item_f1".to_string(), self.item_f1);
        m.insert("column_precision".to_string(), self.column_precision);
        m.insert("column_recall".to_string(), self.column_recall);
        m.insert("column_f1".to_string(), self.column_f1);
        if let Some(ce) = self.ce_accuracy {
            m.insert("ce_accuracy".to_string(), ce);
        }
        m
    }

    pub fn zeros() -> Self {
        RunMetrics {
            success_rate: 0.0,
            row_precision: 0.0,
            row_recall: 0.0,
            row_f1: 0.0,
            item_precision: 0.0,
            item_recall: 0.0,
            item_f1: 0.0,
            column_precision: 0.0,
            column_recall: 0.0,
            column_f1: 0.0,
            ce_accuracy: None,
        }
    }
}

/// Score a prediction against gold on every metric.
pub fn score_table(
    pred: &ResultTable,
    gold: &ResultTable,
    options: &ScoreOptions,
) -> Result<RunMetrics, MetricsError> {
    let (row_p, row_r, row_f) = row_scores(pred, gold);
    let (item_p, item_r, item_f) = item_scores(pred, gold, options.item_pairing);
    let (col_p, col_r, col_f) = column_scores(pred, gold);
    let ce = match &options.core_entity_column {
        Some(col) => Some(ce_accuracy(pred, gold, col)?),
        None => None,
    };
    Ok(RunMetrics {
        success_rate: success_rate(pred, gold),
        row_precision: row_p,
        row_recall: row_r,
        row_f1: row_f,
        item_precision: item_p,
        item_recall: item_r,
        item_f1: item_f,
        column_precision: col_p,
        column_recall: col_r,
        column_f1: col_f,
        ce_accuracy: ce,
    })
}

/// Apply a joint threshold rule to one run's scores.
pub fn utility_label(metrics: &RunMetrics, rule: &LabelRule) -> Result<u8, ValidationError> {
    rule.label(&metrics.as_map())
}

/// Per-metric average and maximum over repeated runs, plus pass@N for the
/// binary metrics. F1 values are averaged per run, never recomputed from
/// averaged precision/recall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub runs: usize,
    pub avg: BTreeMap<String, f64>,
    pub max: BTreeMap<String, f64>,
    pub pass_at_n: BTreeMap<String, f64>,
}

const BINARY_METRICS: &[&str] = &["success_rate", "ce_accuracy"];

pub fn aggregate(runs: &[RunMetrics]) -> Result<AggregateMetrics, MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::NoRuns);
    }
    let maps: Vec<BTreeMap<String, f64>> = runs.iter().map(|r| r.as_map()).collect();
    let mut avg = BTreeMap::new();
    let mut max = BTreeMap::new();
    for name in maps[0].keys() {
        // A metric aggregates only when every run produced it.
        let vals: Vec<f64> = maps.iter().filter_map(|m| m.get(name).copied()).collect();
        if vals.len() != runs.len() {
            continue;
        }
        let sum: f64 = vals.iter().sum();
        avg.insert(name.clone(), sum / vals.len() as f64);
        max.insert(
            name.clone(),
            vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
    }
    let mut pass_at_n = BTreeMap::new();
    for name in BINARY_METRICS {
        if let Some(m) = max.get(*name) {
            pass_at_n.insert(name.to_string(), if *m >= 1.0 { 1.0 } else { 0.0 });
        }
    }
    Ok(AggregateMetrics { runs: runs.len(), avg, max, pass_at_n })
}

/// Parse the first pipe-delimited markdown table in `text`. Inverse of the
/// reducer's renderer: `\|` and `\\` unescape, cells are trimmed, short rows
/// pad with empty cells.
pub fn parse_markdown_table(text: &str) -> Result<ResultTable, MetricsError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut i = 0;
    while i + 1 < lines.len() {
        if looks_like_table_row(lines[i]) && looks_like_separator(lines[i + 1]) {
            let columns = split_table_row(lines[i]);
            let mut rows = Vec::new();
            let mut j = i + 2;
            while j < lines.len() && looks_like_table_row(lines[j]) {
                let mut cells = split_table_row(lines[j]);
                cells.resize(columns.len(), String::new());
                cells.truncate(columns.len());
                rows.push(cells);
                j += 1;
            }
            return Ok(ResultTable { columns, rows });
        }
        i += 1;
    }
    Err(MetricsError::NoTableFound)
}

fn looks_like_table_row(line: &str) -> bool {
    let t = line.trim();
    t.starts_with('|') && t.len() > 1
}

fn looks_like_separator(line: &str) -> bool {
    let t = line.trim();
    if !t.starts_with('|') {
        return false;
    }
    let inner: String = t.trim_matches('|').to_string();
    !inner.is_empty()
        && inner
            .chars()
            .all(|c| matches!(c, '-' | ':' | '|' | ' '))
        && inner.contains('-')
}

/// Split one `| a | b |` line into unescaped cells.
fn split_table_row(line: &str) -> Vec<String> {
    let t = line.trim();
    let t = t.strip_prefix('|').unwrap_or(t);
    let t = t.strip_suffix('|').unwrap_or(t);
    let mut cells = Vec::new();
    let mut cur = String::new();
    let mut chars = t.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next() {
                Some('|') => cur.push('|'),
                Some('\\') => cur.push('\\'),
                Some(other) => {
                    cur.push('\\');
                    cur.push(other);
                }
                None => cur.push('\\'),
            },
            '|' => {
                cells.push(cur.trim().to_string());
                cur = String::new();
            }
            _ => cur.push(c),
        }
    }
    cells.push(cur.trim().to_string());
    cells
}
