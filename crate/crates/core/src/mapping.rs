//! Template filling and batch planning. Turns a decision (matrix, template,
//! strategy, batch size) into concrete batches: one prompt per matrix row,
//! rows partitioned into batches according to the strategy, ids numbered in
//! construction order.

use std::collections::BTreeMap;

use crate::types::{
    value_as_indices, value_as_names, AtomicTask, Batch, BatchManifest, BatchStrategy, RawStrategy,
    TaskMatrix, Template, ValidationError,
};

/// Planning refuses to produce this many batches or more unless the caller
/// raises the limit. Keeps a bad strategy from turning one query into an
/// unbounded fan-out.
pub const DEFAULT_BATCH_GUARD: usize = 50;

/// Joins composite group-key cells; value chosen so it cannot collide with
/// cell text.
pub const GROUP_KEY_SEPARATOR: char = '\u{1f}';

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MappingError {
    #[error("placeholder __{index}__ exceeds row width {width}")]
    PlaceholderOutOfRange { index: usize, width: usize },
    #[error("unknown batch mode {0:?}")]
    UnknownMode(String),
    #[error("attribute {0:?} does not name a matrix column")]
    UnresolvableAttribute(String),
    #[error("attribute index {index} exceeds matrix width {width}")]
    AttributeOutOfRange { index: usize, width: usize },
    #[error("open groups reference row indices {0:?} invalidly (out of range or repeated)")]
    InvalidGroups(Vec<usize>),
    #[error("planned {count} batches, limit is {limit}")]
    BatchGuardViolation { count: usize, limit: usize },
    #[error("got {tasks} tasks for {rows} matrix rows")]
    TaskRowMismatch { tasks: usize, rows: usize },
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

/// Substitute `__i__` slots with `row[i]`. Single pass over the template, so
/// substituted cell text is never rescanned.
pub fn fill_template(template: &Template, row: &[String]) -> Result<String, MappingError> {
    let text = &template.text;
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < bytes.len() {
        if i + 4 <= bytes.len() && &bytes[i..i + 2] == b"__" {
            let mut j = i + 2;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            if j > i + 2 && j + 2 <= bytes.len() && &bytes[j..j + 2] == b"__" {
                let idx: usize = text[i + 2..j].parse().map_err(|_| {
                    MappingError::PlaceholderOutOfRange { index: usize::MAX, width: row.len() }
                })?;
                let cell = row.get(idx).ok_or(MappingError::PlaceholderOutOfRange {
                    index: idx,
                    width: row.len(),
                })?;
                out.push_str(cell);
                i = j + 2;
                continue;
            }
        }
        // Advance by one char, not one byte.
        let ch_len = text[i..].chars().next().map(char::len_utf8).unwrap_or(1);
        out.push_str(&text[i..i + ch_len]);
        i += ch_len;
    }
    Ok(out)
}

/// One task per matrix row, in row order.
pub fn instantiate_tasks(
    matrix: &TaskMatrix,
    template: &Template,
) -> Result<Vec<AtomicTask>, MappingError> {
    let mut tasks = Vec::with_capacity(matrix.len());
    for (i, row) in matrix.rows.iter().enumerate() {
        let prompt = fill_template(template, row)?;
        tasks.push(AtomicTask::new(i, prompt)?);
    }
    Ok(tasks)
}

fn fold_mode(mode: &str) -> String {
    mode.trim().to_lowercase().replace('-', "_").replace(' ', "_")
}

/// Resolve a loosely-typed strategy (as planners emit it) against the matrix:
/// mode string to enum, attribute names to column indices, group sanity.
/// Empty explicit groups are dropped.
pub fn normalize_strategy(
    raw: &RawStrategy,
    matrix: &TaskMatrix,
) -> Result<BatchStrategy, MappingError> {
    let rationale = raw.rationale.clone().unwrap_or_default();
    match fold_mode(&raw.mode).as_str() {
        "per_atom" => Ok(BatchStrategy::PerAtom { rationale }),
        "by_attr" => {
            let mut indices = raw
                .attribute_index
                .as_ref()
                .and_then(value_as_indices)
                .unwrap_or_default();
            let names = raw
                .attribute_name
                .as_ref()
                .and_then(value_as_names)
                .unwrap_or_default();
            if indices.is_empty() {
                if names.is_empty() {
                    return Err(MappingError::UnresolvableAttribute(String::new()));
                }
                for name in &names {
                    let idx = matrix
                        .column_index(name)
                        .ok_or_else(|| MappingError::UnresolvableAttribute(name.clone()))?;
                    indices.push(idx);
                }
            }
            for &idx in &indices {
                if idx >= matrix.width() {
                    return Err(MappingError::AttributeOutOfRange {
                        index: idx,
                        width: matrix.width(),
                    });
                }
            }
            let resolved_names: Vec<String> = if names.is_empty() {
                indices.iter().map(|&i| matrix.columns[i].clone()).collect()
            } else {
                names
            };
            Ok(BatchStrategy::by_attr(indices, resolved_names, rationale)?)
        }
        "open" => {
            let groups: Vec<Vec<usize>> = raw
                .groups
                .clone()
                .unwrap_or_default()
                .into_iter()
                .filter(|g| !g.is_empty())
                .collect();
            check_groups(&groups, matrix.len())?;
            Ok(BatchStrategy::open(groups, raw.chunk_size, rationale)?)
        }
        _ => Err(MappingError::UnknownMode(raw.mode.clone())),
    }
}

fn check_groups(groups: &[Vec<usize>], n: usize) -> Result<(), MappingError> {
    let mut seen = vec![false; n];
    let mut bad = Vec::new();
    for group in groups {
        for &idx in group {
            if idx >= n || seen[idx] {
                bad.push(idx);
            } else {
                seen[idx] = true;
            }
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(MappingError::InvalidGroups(bad))
    }
}

/// Partition tasks into batches under the default fan-out guard.
pub fn plan_batches(
    tasks: &[AtomicTask],
    matrix: &TaskMatrix,
    strategy: &BatchStrategy,
    batch_size: usize,
) -> Result<Vec<Batch>, MappingError> {
    plan_batches_guarded(tasks, matrix, strategy, batch_size, Some(DEFAULT_BATCH_GUARD))
}

/// Partition tasks into batches. `max_batches: None` disables the guard;
/// `Some(limit)` fails planning when the count reaches `limit`.
pub fn plan_batches_guarded(
    tasks: &[AtomicTask],
    matrix: &TaskMatrix,
    strategy: &BatchStrategy,
    batch_size: usize,
    max_batches: Option<usize>,
) -> Result<Vec<Batch>, MappingError> {
    if batch_size == 0 {
        return Err(ValidationError::ZeroBatchSize.into());
    }
    if tasks.len() != matrix.len() {
        return Err(MappingError::TaskRowMismatch { tasks: tasks.len(), rows: matrix.len() });
    }
    for (i, t) in tasks.iter().enumerate() {
        if t.row_index != i {
            return Err(MappingError::TaskRowMismatch { tasks: tasks.len(), rows: matrix.len() });
        }
    }

    // (row indices, group key) per batch, in construction order.
    let mut parts: Vec<(Vec<usize>, Option<String>)> = Vec::new();
    match strategy {
        BatchStrategy::PerAtom { .. } => {
            parts.extend((0..matrix.len()).map(|i| (vec![i], None)));
        }
        BatchStrategy::ByAttr { attribute_index, .. } => {
            for &idx in attribute_index {
                if idx >= matrix.width() {
                    return Err(MappingError::AttributeOutOfRange {
                        index: idx,
                        width: matrix.width(),
                    });
                }
            }
            let mut order: Vec<String> = Vec::new();
            let mut by_key: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for (i, row) in matrix.rows.iter().enumerate() {
                let key = attribute_index
                    .iter()
                    .map(|&c| row[c].as_str())
                    .collect::<Vec<_>>()
                    .join(&GROUP_KEY_SEPARATOR.to_string());
                if !by_key.contains_key(&key) {
                    order.push(key.clone());
                }
                by_key.entry(key).or_default().push(i);
            }
            for key in order {
                let rows = by_key.remove(&key).unwrap();
                parts.push((rows, Some(key)));
            }
        }
        BatchStrategy::Open { groups, chunk_size, .. } => {
            let groups: Vec<Vec<usize>> =
                groups.iter().filter(|g| !g.is_empty()).cloned().collect();
            check_groups(&groups, matrix.len())?;
            let mut covered = vec![false; matrix.len()];
            for group in &groups {
                for &idx in group {
                    covered[idx] = true;
                }
                parts.push((group.clone(), None));
            }
            let chunk = chunk_size.unwrap_or(batch_size);
            let uncovered: Vec<usize> =
                (0..matrix.len()).filter(|&i| !covered[i]).collect();
            for chunk_rows in uncovered.chunks(chunk) {
                parts.push((chunk_rows.to_vec(), None));
            }
        }
    }

    if let Some(limit) = max_batches {
        if parts.len() >= limit {
            return Err(MappingError::BatchGuardViolation { count: parts.len(), limit });
        }
    }

    let batches = parts
        .into_iter()
        .enumerate()
        .map(|(id, (row_indices, group_key))| {
            let batch_tasks: Vec<AtomicTask> =
                row_indices.iter().map(|&i| tasks[i].clone()).collect();
            let matrix_rows: Vec<Vec<String>> =
                row_indices.iter().map(|&i| matrix.rows[i].clone()).collect();
            Batch {
                id,
                row_indices,
                tasks: batch_tasks,
                manifest: BatchManifest {
                    mode: strategy.mode().to_string(),
                    group_key,
                    rationale: strategy.rationale().to_string(),
                    matrix_columns: matrix.columns.clone(),
                    matrix_rows,
                },
            }
        })
        .collect();
    Ok(batches)
}
