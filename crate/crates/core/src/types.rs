//! Shared data model. Constructors validate structural invariants once so
//! downstream modules can rely on them; serde encodings round-trip.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Placeholder prefix/suffix for template slots: `__0__`, `__1__`, ...
pub const PLACEHOLDER_GUARD: &str = "__";

/// Cell spellings that mean "no value". Matrix cells must not use them;
/// metric normalization maps them to the empty string.
pub(crate) const EMPTY_SENTINELS: &[&str] = &[
    "n/a", "na", "not found", "none", "null", "unknown", "-", "--", "nil",
];

/// Lowercased, whitespace-collapsed view of a header or sentinel candidate.
pub(crate) fn fold_text(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValidationError {
    #[error("query text is empty")]
    EmptyQuery,
    #[error("schema has no columns")]
    EmptySchema,
    #[error("schema column {0:?} duplicates another (case/whitespace-insensitive)")]
    DuplicateColumn(String),
    #[error("key column {0:?} is not a schema column")]
    UnknownKeyColumn(String),
    #[error("task matrix has no rows")]
    EmptyMatrix,
    #[error("task matrix row {row} has {got} cells, expected {want}")]
    RaggedMatrixRow { row: usize, got: usize, want: usize },
    #[error("task matrix cell ({row}, {col}) is empty or a no-value sentinel")]
    BlankMatrixCell { row: usize, col: usize },
    #[error("template has no placeholders")]
    NoPlaceholders,
    #[error("template placeholder __{index}__ exceeds matrix width {width}")]
    PlaceholderOutOfRange { index: usize, width: usize },
    #[error("batch size must be >= 1")]
    ZeroBatchSize,
    #[error("chunk size must be >= 1")]
    ZeroChunkSize,
    #[error("by_attr strategy needs at least one attribute")]
    MissingAttribute,
    #[error("result table row {row} has {got} cells, expected {want}")]
    RaggedTableRow { row: usize, got: usize, want: usize },
    #[error("task prompt still contains placeholder {0:?}")]
    ResidualPlaceholder(String),
    #[error("utility label thresholds are empty")]
    EmptyThresholds,
    #[error("utility threshold names metric {0:?} which the run did not produce")]
    UnknownMetric(String),
    #[error("{0} must be finite and >= 0")]
    NegativeAccounting(&'static str),
}

/// Output contract for a task: column names plus the key columns that
/// identify a row. Key columns default to the first column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<String>,
    pub key_columns: Vec<String>,
}

impl Schema {
    pub fn new(columns: Vec<String>, key_columns: Option<Vec<String>>) -> Result<Self, ValidationError> {
        if columns.is_empty() {
            return Err(ValidationError::EmptySchema);
        }
        let mut seen = BTreeSet::new();
        for c in &columns {
            if !seen.insert(fold_text(c)) {
                return Err(ValidationError::DuplicateColumn(c.clone()));
            }
        }
        let key_columns = match key_columns {
            None => vec![columns[0].clone()],
            Some(k) if k.is_empty() => vec![columns[0].clone()],
            Some(k) => {
                for kc in &k {
                    if !columns.iter().any(|c| fold_text(c) == fold_text(kc)) {
                        return Err(ValidationError::UnknownKeyColumn(kc.clone()));
                    }
                }
                k
            }
        };
        Ok(Schema { columns, key_columns })
    }

    /// Index of `name` among the columns, folded comparison.
    pub fn column_index(&self, name: &str) -> Option<usize> {
        let want = fold_text(name);
        self.columns.iter().position(|c| fold_text(c) == want)
    }
}

/// A wide-search request: free text plus the schema the answer table must fill.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub schema: Schema,
}

impl Query {
    pub fn new(text: impl Into<String>, schema: Schema) -> Result<Self, ValidationError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ValidationError::EmptyQuery);
        }
        Ok(Query { text, schema })
    }
}

/// Known inputs, one row per atomic task. Rectangular; every cell carries a
/// real value (no blanks, no "not found" spellings).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMatrix {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl TaskMatrix {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self, ValidationError> {
        if columns.is_empty() {
            return Err(ValidationError::EmptySchema);
        }
        let mut seen = BTreeSet::new();
        for c in &columns {
            if !seen.insert(fold_text(c)) {
                return Err(ValidationError::DuplicateColumn(c.clone()));
            }
        }
        if rows.is_empty() {
            return Err(ValidationError::EmptyMatrix);
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != columns.len() {
                return Err(ValidationError::RaggedMatrixRow {
                    row: i,
                    got: row.len(),
                    want: columns.len(),
                });
            }
            for (j, cell) in row.iter().enumerate() {
                let folded = fold_text(cell);
                if folded.is_empty() || EMPTY_SENTINELS.contains(&folded.as_str()) {
                    return Err(ValidationError::BlankMatrixCell { row: i, col: j });
                }
            }
        }
        Ok(TaskMatrix { columns, rows })
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        let want = fold_text(name);
        self.columns.iter().position(|c| fold_text(c) == want)
    }
}

/// Prompt text with `__i__` slots indexing matrix columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub text: String,
}

impl Template {
    pub fn new(text: impl Into<String>) -> Result<Self, ValidationError> {
        let text = text.into();
        if placeholder_indices(&text).is_empty() {
            return Err(ValidationError::NoPlaceholders);
        }
        Ok(Template { text })
    }

    /// Distinct placeholder indices appearing in the text.
    pub fn placeholders(&self) -> Vec<usize> {
        placeholder_indices(&self.text)
    }
}

/// All `i` such that `__i__` occurs in `text`, ascending and deduplicated.
pub fn placeholder_indices(text: &str) -> Vec<usize> {
    let bytes = text.as_bytes();
    let mut out = BTreeSet::new();
    let mut i = 0;
    while i + 4 <= bytes.len() {
        if &bytes[i..i + 2] == b"__" {
            let mut j = i + 2;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            if j > i + 2 && j + 2 <= bytes.len() && &bytes[j..j + 2] == b"__" {
                // Digits trailed and led by the guard: a slot.
                if let Ok(idx) = text[i + 2..j].parse::<usize>() {
                    out.insert(idx);
                }
                i = j + 2;
                continue;
            }
        }
        i += 1;
    }
    out.into_iter().collect()
}

/// How atomic tasks are grouped into solver batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BatchStrategy {
    /// One batch per task.
    PerAtom { rationale: String },
    /// Group rows sharing a value in the named matrix column(s). Multiple
    /// columns form a composite key (cells joined with a unit separator).
    ByAttr {
        attribute_index: Vec<usize>,
        attribute_name: Vec<String>,
        rationale: String,
    },
    /// Explicit row-index groups; uncovered rows are chunked by `chunk_size`
    /// (or the decision's batch size when absent).
    Open {
        groups: Vec<Vec<usize>>,
        chunk_size: Option<usize>,
        rationale: String,
    },
}

impl BatchStrategy {
    pub fn per_atom(rationale: impl Into<String>) -> Self {
        BatchStrategy::PerAtom { rationale: rationale.into() }
    }

    pub fn by_attr(
        attribute_index: Vec<usize>,
        attribute_name: Vec<String>,
        rationale: impl Into<String>,
    ) -> Result<Self, ValidationError> {
        if attribute_index.is_empty() {
            return Err(ValidationError::MissingAttribute);
        }
        Ok(BatchStrategy::ByAttr {
            attribute_index,
            attribute_name,
            rationale: rationale.into(),
        })
    }

    pub fn open(
        groups: Vec<Vec<usize>>,
        chunk_size: Option<usize>,
        rationale: impl Into<String>,
    ) -> Result<Self, ValidationError> {
        if chunk_size == Some(0) {
            return Err(ValidationError::ZeroChunkSize);
        }
        Ok(BatchStrategy::Open {
            groups,
            chunk_size,
            rationale: rationale.into(),
        })
    }

    pub fn mode(&self) -> &'static str {
        match self {
            BatchStrategy::PerAtom { .. } => "per_atom",
            BatchStrategy::ByAttr { .. } => "by_attr",
            BatchStrategy::Open { .. } => "open",
        }
    }

    pub fn rationale(&self) -> &str {
        match self {
            BatchStrategy::PerAtom { rationale } => rationale,
            BatchStrategy::ByAttr { rationale, .. } => rationale,
            BatchStrategy::Open { rationale, .. } => rationale,
        }
    }
}

/// Wire form of a strategy: what planners emit and what the canonical JSON
/// encoding uses. `attribute_index`/`attribute_name` accept a scalar or a
/// list; `mapping::normalize_strategy` resolves names against the matrix.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RawStrategy {
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_index: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_name: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

fn scalar_or_list<T: Clone + Into<serde_json::Value>>(items: &[T]) -> serde_json::Value {
    if items.len() == 1 {
        items[0].clone().into()
    } else {
        serde_json::Value::Array(items.iter().cloned().map(Into::into).collect())
    }
}

impl Serialize for BatchStrategy {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut raw = RawStrategy {
            mode: self.mode().to_string(),
            rationale: Some(self.rationale().to_string()),
            ..RawStrategy::default()
        };
        match self {
            BatchStrategy::PerAtom { .. } => {}
            BatchStrategy::ByAttr { attribute_index, attribute_name, .. } => {
                let idx: Vec<serde_json::Value> =
                    attribute_index.iter().map(|&i| serde_json::Value::from(i as u64)).collect();
                raw.attribute_index = Some(scalar_or_list(&idx));
                if !attribute_name.is_empty() {
                    let names: Vec<serde_json::Value> =
                        attribute_name.iter().map(|n| serde_json::Value::from(n.as_str())).collect();
                    raw.attribute_name = Some(scalar_or_list(&names));
                }
            }
            BatchStrategy::Open { groups, chunk_size, .. } => {
                if !groups.is_empty() {
                    raw.groups = Some(groups.clone());
                }
                raw.chunk_size = *chunk_size;
            }
        }
        raw.serialize(serializer)
    }
}

/// Accept a scalar or homogeneous list; `None` input means absent.
pub(crate) fn value_as_indices(v: &serde_json::Value) -> Option<Vec<usize>> {
    match v {
        serde_json::Value::Number(n) => n.as_u64().map(|i| vec![i as usize]),
        serde_json::Value::Array(items) => {
            let mut out = Vec::with_capacity(items.len());
            for it in items {
                out.push(it.as_u64()? as usize);
            }
            Some(out)
        }
        _ => None,
    }
}

pub(crate) fn value_as_names(v: &serde_json::Value) -> Option<Vec<String>> {
    match v {
        serde_json::Value::String(s) => Some(vec![s.clone()]),
        serde_json::Value::Array(items) => {
            let mut out = Vec::with_capacity(items.len());
            for it in items {
                out.push(it.as_str()?.to_string());
            }
            Some(out)
        }
        _ => None,
    }
}

impl<'de> Deserialize<'de> for BatchStrategy {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawStrategy::deserialize(deserializer)?;
        let rationale = raw.rationale.clone().unwrap_or_default();
        match raw.mode.as_str() {
            "per_atom" => Ok(BatchStrategy::PerAtom { rationale }),
            "by_attr" => {
                let idx = raw
                    .attribute_index
                    .as_ref()
                    .and_then(value_as_indices)
                    .ok_or_else(|| {
                        D::Error::custom("by_attr strategy needs a resolved attribute_index")
                    })?;
                let names = raw
                    .attribute_name
                    .as_ref()
                    .and_then(value_as_names)
                    .unwrap_or_default();
                BatchStrategy::by_attr(idx, names, rationale).map_err(D::Error::custom)
            }
            "open" => BatchStrategy::open(
                raw.groups.unwrap_or_default(),
                raw.chunk_size,
                rationale,
            )
            .map_err(D::Error::custom),
            other => Err(D::Error::custom(format!("unknown batch mode {other:?}"))),
        }
    }
}

/// The planner's full commitment for one task: inputs, prompt shape, and
/// batching.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub matrix: TaskMatrix,
    pub template: Template,
    pub strategy: BatchStrategy,
    pub batch_size: usize,
    pub output_schema: Schema,
}

impl Decision {
    pub fn new(
        matrix: TaskMatrix,
        template: Template,
        strategy: BatchStrategy,
        batch_size: usize,
        output_schema: Schema,
    ) -> Result<Self, ValidationError> {
        if batch_size == 0 {
            return Err(ValidationError::ZeroBatchSize);
        }
        for idx in template.placeholders() {
            if idx >= matrix.width() {
                return Err(ValidationError::PlaceholderOutOfRange {
                    index: idx,
                    width: matrix.width(),
                });
            }
        }
        Ok(Decision { matrix, template, strategy, batch_size, output_schema })
    }
}

/// One filled prompt bound to its matrix row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicTask {
    pub row_index: usize,
    pub prompt: String,
}

impl AtomicTask {
    pub fn new(row_index: usize, prompt: String) -> Result<Self, ValidationError> {
        let leftovers = placeholder_indices(&prompt);
        if let Some(i) = leftovers.first() {
            return Err(ValidationError::ResidualPlaceholder(format!("__{i}__")));
        }
        Ok(AtomicTask { row_index, prompt })
    }
}

/// Provenance a batch carries besides its tasks: how it was grouped and the
/// matrix slice it covers (used for fallback rows and solver context).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_key: Option<String>,
    pub rationale: String,
    pub matrix_columns: Vec<String>,
    pub matrix_rows: Vec<Vec<String>>,
}

/// A unit of solver work: contiguous ids, the covered matrix rows, and the
/// filled prompts for each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub id: usize,
    pub row_indices: Vec<usize>,
    pub tasks: Vec<AtomicTask>,
    pub manifest: BatchManifest,
}

/// Rectangular output table. Cells are strings; the empty string means
/// "missing".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ResultTable {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self, ValidationError> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != columns.len() {
                return Err(ValidationError::RaggedTableRow {
                    row: i,
                    got: row.len(),
                    want: columns.len(),
                });
            }
        }
        Ok(ResultTable { columns, rows })
    }

    pub fn empty(columns: Vec<String>) -> Self {
        ResultTable { columns, rows: Vec::new() }
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        let want = fold_text(name);
        self.columns.iter().position(|c| fold_text(c) == want)
    }
}

/// Joint thresholds deciding a run's binary utility label: label 1 requires
/// every named metric to reach its threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub thresholds: BTreeMap<String, f64>,
}

impl LabelRule {
    pub fn new(thresholds: BTreeMap<String, f64>) -> Result<Self, ValidationError> {
        if thresholds.is_empty() {
            return Err(ValidationError::EmptyThresholds);
        }
        Ok(LabelRule { thresholds })
    }

    /// 1 iff every thresholded metric exists and reaches its threshold.
    pub fn label(&self, metrics: &BTreeMap<String, f64>) -> Result<u8, ValidationError> {
        if self.thresholds.is_empty() {
            return Err(ValidationError::EmptyThresholds);
        }
        for (name, min) in &self.thresholds {
            let got = metrics
                .get(name)
                .ok_or_else(|| ValidationError::UnknownMetric(name.clone()))?;
            if got < min {
                return Ok(0);
            }
        }
        Ok(1)
    }
}

/// Scores and accounting for one run. The label always comes from a
/// [`LabelRule`] over the metric map, never from callers directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    metrics: BTreeMap<String, f64>,
    label: u8,
    cost: f64,
    delay: f64,
}

impl Utility {
    pub fn from_metrics(
        metrics: BTreeMap<String, f64>,
        rule: &LabelRule,
        cost: f64,
        delay: f64,
    ) -> Result<Self, ValidationError> {
        if !(cost.is_finite() && cost >= 0.0) {
            return Err(ValidationError::NegativeAccounting("cost"));
        }
        if !(delay.is_finite() && delay >= 0.0) {
            return Err(ValidationError::NegativeAccounting("delay"));
        }
        let label = rule.label(&metrics)?;
        Ok(Utility { metrics, label, cost, delay })
    }

    pub fn metrics(&self) -> &BTreeMap<String, f64> {
        &self.metrics
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }
}

/// Which phase of a run produced a trace event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStage {
    Plan,
    Execute,
    Patch,
    Error,
}

impl fmt::Display for TraceStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TraceStage::Plan => "plan",
            TraceStage::Execute => "execute",
            TraceStage::Patch => "patch",
            TraceStage::Error => "error",
        };
        f.write_str(s)
    }
}

/// One run event. `timestamp` is unix milliseconds; the trace log guarantees
/// strict ordering within a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub stage: TraceStage,
    pub timestamp: u64,
    pub payload: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema(cols: &[&str]) -> Schema {
        Schema::new(cols.iter().map(|s| s.to_string()).collect(), None).unwrap()
    }

    #[test]
    fn schema_defaults_key_to_first_column() {
        let s = schema(&["Name", "Year"]);
        assert_eq!(s.key_columns, vec!["Name".to_string()]);
    }

    #[test]
    fn schema_rejects_case_insensitive_duplicates() {
        let err = Schema::new(vec!["Name".into(), "  name ".into()], None).unwrap_err();
        assert!(matches!(err, ValidationError::DuplicateColumn(_)));
    }

    #[test]
    fn schema_rejects_unknown_key_column() {
        let err = Schema::new(vec!["Name".into()], Some(vec!["Year".into()])).unwrap_err();
        assert!(matches!(err, ValidationError::UnknownKeyColumn(_)));
    }

    #[test]
    fn matrix_rejects_blank_and_sentinel_cells() {
        let err = TaskMatrix::new(vec!["a".into()], vec![vec!["  ".into()]]).unwrap_err();
        assert!(matches!(err, ValidationError::BlankMatrixCell { .. }));
        let err = TaskMatrix::new(vec!["a".into()], vec![vec!["Not  Found".into()]]).unwrap_err();
        assert!(matches!(err, ValidationError::BlankMatrixCell { row: 0, col: 0 }));
    }

    #[test]
    fn matrix_rejects_ragged_rows() {
        let err = TaskMatrix::new(
            vec!["a".into(), "b".into()],
            vec![vec!["x".into(), "y".into()], vec!["z".into()]],
        )
        .unwrap_err();
        assert!(matches!(err, ValidationError::RaggedMatrixRow { row: 1, got: 1, want: 2 }));
    }

    #[test]
    fn placeholder_scan_finds_sorted_unique_indices() {
        assert_eq!(placeholder_indices("__1__ and __0__ and __1__"), vec![0, 1]);
        assert_eq!(placeholder_indices("no slots here"), Vec::<usize>::new());
        // Underscores without digits or unterminated guards are not slots.
        assert_eq!(placeholder_indices("____ __x__ __2"), Vec::<usize>::new());
    }

    #[test]
    fn template_requires_a_placeholder() {
        assert!(Template::new("plain").is_err());
        assert!(Template::new("find __0__").is_ok());
    }

    #[test]
    fn decision_checks_placeholders_against_matrix_width() {
        let m = TaskMatrix::new(vec!["a".into()], vec![vec!["x".into()]]).unwrap();
        let t = Template::new("__0__ vs __3__").unwrap();
        let err = Decision::new(
            m,
            t,
            BatchStrategy::per_atom(""),
            1,
            schema(&["a"]),
        )
        .unwrap_err();
        assert!(matches!(err, ValidationError::PlaceholderOutOfRange { index: 3, width: 1 }));
    }

    #[test]
    fn atomic_task_rejects_residual_placeholders() {
        assert!(AtomicTask::new(0, "find __2__".into()).is_err());
        assert!(AtomicTask::new(0, "find Acme".into()).is_ok());
    }

    #[test]
    fn strategy_json_uses_mode_tags_and_scalar_attribute() {
        let s = BatchStrategy::by_attr(vec![1], vec!["Year".into()], "group by year").unwrap();
        let json = serde_json::to_value(&s).unwrap();
        assert_eq!(json["mode"], "by_attr");
        assert_eq!(json["attribute_index"], 1);
        assert_eq!(json["attribute_name"], "Year");

        let composite = BatchStrategy::by_attr(vec![0, 1], vec![], "").unwrap();
        let json = serde_json::to_value(&composite).unwrap();
        assert_eq!(json["attribute_index"], serde_json::json!([0, 1]));
    }

    #[test]
    fn strategy_deserialize_rejects_unknown_mode() {
        let err = serde_json::from_value::<BatchStrategy>(serde_json::json!({"mode": "magic"}));
        assert!(err.is_err());
    }

    #[test]
    fn utility_label_is_joint_over_thresholds() {
        let rule = LabelRule::new(
            [("row_f1".to_string(), 0.8), ("item_f1".to_string(), 0.9)].into(),
        )
        .unwrap();
        let mut m = BTreeMap::new();
        m.insert("row_f1".to_string(), 0.85);
        m.insert("item_f1".to_string(), 0.95);
        assert_eq!(Utility::from_metrics(m.clone(), &rule, 0.0, 0.0).unwrap().label(), 1);
        m.insert("item_f1".to_string(), 0.89);
        assert_eq!(Utility::from_metrics(m.clone(), &rule, 0.0, 0.0).unwrap().label(), 0);
        m.remove("item_f1");
        assert!(matches!(
            Utility::from_metrics(m, &rule, 0.0, 0.0),
            Err(ValidationError::UnknownMetric(_))
        ));
    }

    #[test]
    fn empty_threshold_config_is_an_error() {
        assert!(LabelRule::new(BTreeMap::new()).is_err());
    }

    fn cell() -> impl Strategy<Value = String> {
        "[a-z]{1,6}"
    }

    fn arb_strategy() -> impl Strategy<Value = BatchStrategy> {
        prop_oneof![
            cell().prop_map(BatchStrategy::per_atom),
            (proptest::collection::vec(0usize..4, 1..3), cell()).prop_map(|(idx, r)| {
                let names = idx.iter().map(|i| format!("c{i}")).collect();
                BatchStrategy::by_attr(idx, names, r).unwrap()
            }),
            (
                proptest::collection::vec(proptest::collection::vec(0usize..8, 1..4), 0..3),
                proptest::option::of(1usize..5),
                cell()
            )
                .prop_map(|(g, c, r)| BatchStrategy::open(g, c, r).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn strategy_round_trips(s in arb_strategy()) {
            let json = serde_json::to_string(&s).unwrap();
            let back: BatchStrategy = serde_json::from_str(&json).unwrap();
            // Names are advisory on by_attr; everything else must survive.
            match (&s, &back) {
                (
                    BatchStrategy::ByAttr { attribute_index: a, .. },
                    BatchStrategy::ByAttr { attribute_index: b, .. },
                ) => prop_assert_eq!(a, b),
                _ => prop_assert_eq!(&s, &back),
            }
        }

        #[test]
        fn decision_round_trips(
            cols in proptest::collection::vec("[a-z]{1,4}", 1..4),
            n in 1usize..5,
            bs in 1usize..4,
        ) {
            // Make column names unique by suffixing their position.
            let cols: Vec<String> =
                cols.iter().enumerate().map(|(i, c)| format!("{c}{i}")).collect();
            let rows: Vec<Vec<String>> = (0..n)
                .map(|r| (0..cols.len()).map(|c| format!("v{r}x{c}")).collect())
                .collect();
            let matrix = TaskMatrix::new(cols.clone(), rows).unwrap();
            let template = Template::new("row __0__").unwrap();
            let schema = Schema::new(cols, None).unwrap();
            let d = Decision::new(
                matrix,
                template,
                BatchStrategy::per_atom("one each"),
                bs,
                schema,
            )
            .unwrap();
            let json = serde_json::to_string(&d).unwrap();
            let back: Decision = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(d, back);
        }

        #[test]
        fn result_table_round_trips(
            cols in proptest::collection::vec("[a-z]{1,4}", 1..4),
            n in 0usize..4,
        ) {
            let cols: Vec<String> =
                cols.iter().enumerate().map(|(i, c)| format!("{c}{i}")).collect();
            let rows: Vec<Vec<String>> = (0..n)
                .map(|r| (0..cols.len()).map(|c| format!("{r}:{c}")).collect())
                .collect();
            let t = ResultTable::new(cols, rows).unwrap();
            let json = serde_json::to_string(&t).unwrap();
            let back: ResultTable = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(t, back);
        }

        #[test]
        fn trace_event_round_trips(ts in 0u64..u64::MAX / 2) {
            let e = TraceEvent {
                stage: TraceStage::Execute,
                timestamp: ts,
                payload: serde_json::json!({"batch": 3}),
            };
            let json = serde_json::to_string(&e).unwrap();
            let back: TraceEvent = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(e, back);
        }
    }
}
