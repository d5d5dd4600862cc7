//! Reduce stage: check an aggregated table against the task matrix, plan
//! delta patches for whatever is missing, merge patch results back without
//! clobbering existing answers, and render the final table as markdown.
//!
//! Completeness is judged against matrix-expected rows only. Extra rows a
//! solver volunteered are counted but never block completion, and their
//! blank cells are left to the metrics stage.

use serde::{Deserialize, Serialize};

use crate::metrics::normalize_cell;
use crate::trace::TraceLog;
use crate::types::{
    fold_text, Decision, ResultTable, Schema, TaskMatrix, Template, TraceStage, ValidationError,
};

/// Default number of repair rounds after the first pass.
pub const DEFAULT_MAX_PATCH_ROUNDS: u32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum ReduceError {
    #[error("repair hook failed: {0}")]
    Hook(String),
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

/// A matrix-expected row that is present but has empty cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowGap {
    /// Raw key-column values from the task matrix.
    pub key: Vec<String>,
    /// Schema columns whose cells are empty for this key, in schema order.
    pub missing_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletenessReport {
    pub complete: bool,
    pub expected_rows: usize,
    pub matched_rows: usize,
    /// Table rows that match no matrix row. Informational only.
    pub extra_rows: usize,
    /// Matrix rows with no matching table row, as raw key tuples in matrix
    /// order.
    pub missing_rows: Vec<Vec<String>>,
    /// Matched rows that still have empty cells.
    pub row_gaps: Vec<RowGap>,
}

/// Key columns as (schema name, matrix column index) pairs. Key columns the
/// matrix does not carry pair with None and contribute empty key cells.
fn key_anchors(schema: &Schema, matrix: &TaskMatrix) -> Vec<(String, Option<usize>)> {
    schema
        .key_columns
        .iter()
        .map(|k| {
            let want = fold_text(k);
            let idx = matrix
                .columns
                .iter()
                .position(|c| fold_text(c) == want);
            (k.clone(), idx)
        })
        .collect()
}

fn normalized_tuple(cells: &[String]) -> Vec<String> {
    cells.iter().map(|c| normalize_cell(c)).collect()
}

/// Compare an aggregated table with the matrix it was supposed to cover.
pub fn validate(table: &ResultTable, matrix: &TaskMatrix, schema: &Schema) -> CompletenessReport {
    let anchors = key_anchors(schema, matrix);
    let anchored: Vec<(usize, String)> = anchors
        .iter()
        .enumerate()
        .filter_map(|(i, (name, idx))| idx.map(|_| (i, name.clone())))
        .collect();

    // Key-column positions in the table, by folded name.
    let table_key_cols: Vec<Option<usize>> = schema
        .key_columns
        .iter()
        .map(|k| {
            let want = fold_text(k);
            table.columns.iter().position(|c| fold_text(c) == want)
        })
        .collect();

    // Normalized anchored-key tuple for each table row.
    let table_tuples: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|row| {
            anchored
                .iter()
                .map(|(key_i, _)| {
                    table_key_cols[*key_i]
                        .and_then(|col| row.get(col))
                        .map(|c| normalize_cell(c))
                        .unwrap_or_default()
                })
                .collect()
        })
        .collect();

    let mut missing_rows = Vec::new();
    let mut row_gaps = Vec::new();
    let mut matched_rows = 0usize;
    let mut matched_table_rows = vec![false; table.rows.len()];

    for matrix_row in &matrix.rows {
        // Raw key tuple over every schema key column; unanchored columns are
        // empty (the matrix cannot supply them).
        let raw_key: Vec<String> = anchors
            .iter()
            .map(|(_, idx)| idx.map(|i| matrix_row[i].clone()).unwrap_or_default())
            .collect();
        let want: Vec<String> = anchored
            .iter()
            .map(|(key_i, _)| {
                anchors[*key_i]
                    .1
                    .map(|i| normalize_cell(&matrix_row[i]))
                    .unwrap_or_default()
            })
            .collect();

        let matches: Vec<usize> = if anchored.is_empty() {
            Vec::new()
        } else {
            table_tuples
                .iter()
                .enumerate()
                .filter(|(_, t)| **t == want)
                .map(|(i, _)| i)
                .collect()
        };
        if matches.is_empty() {
            missing_rows.push(raw_key);
            continue;
        }
        matched_rows += 1;
        for &i in &matches {
            matched_table_rows[i] = true;
        }
        // A cell counts as answered if any matching row fills it.
        let missing_columns: Vec<String> = schema
            .columns
            .iter()
            .filter(|col| {
                let want_col = fold_text(col);
                let table_col = table.columns.iter().position(|c| fold_text(c) == want_col);
                let filled = table_col.is_some_and(|ci| {
                    matches
                        .iter()
                        .any(|&ri| !normalize_cell(&table.rows[ri][ci]).is_empty())
                });
                !filled
            })
            .cloned()
            .collect();
        if !missing_columns.is_empty() {
            row_gaps.push(RowGap { key: raw_key, missing_columns });
        }
    }

    let extra_rows = matched_table_rows.iter().filter(|m| !**m).count();
    CompletenessReport {
        complete: missing_rows.is_empty() && row_gaps.is_empty(),
        expected_rows: matrix.len(),
        matched_rows,
        extra_rows,
        missing_rows,
        row_gaps,
    }
}

/// Task matrix for a repair pass: one column per schema key column, one row
/// per key tuple that is missing entirely or has empty cells. Wholly missing
/// rows come first in matrix order, then gap rows, with duplicates removed.
pub fn build_patch_matrix(
    report: &CompletenessReport,
    schema: &Schema,
) -> Result<TaskMatrix, ValidationError> {
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut seen: std::collections::BTreeSet<Vec<String>> = std::collections::BTreeSet::new();
    for key in report
        .missing_rows
        .iter()
        .chain(report.row_gaps.iter().map(|g| &g.key))
    {
        if seen.insert(normalized_tuple(key)) {
            rows.push(key.clone());
        }
    }
    TaskMatrix::new(schema.key_columns.clone(), rows)
}

/// Union of columns the repair pass must produce, in schema order: the gap
/// columns, plus every non-key column when any row is missing outright.
fn patch_columns(report: &CompletenessReport, schema: &Schema) -> Vec<String> {
    let key_folded: Vec<String> = schema.key_columns.iter().map(|k| fold_text(k)).collect();
    schema
        .columns
        .iter()
        .filter(|col| {
            let folded = fold_text(col);
            let is_key = key_folded.contains(&folded);
            let in_gaps = report
                .row_gaps
                .iter()
                .any(|g| g.missing_columns.iter().any(|m| fold_text(m) == folded));
            in_gaps || (!report.missing_rows.is_empty() && !is_key)
        })
        .cloned()
        .collect()
}

/// Prompt template for a repair pass. Placeholders bind the patch matrix's
/// key columns in order; the text asks only for the fields that are missing.
pub fn gen_patch_template(
    report: &CompletenessReport,
    schema: &Schema,
) -> Result<Template, ValidationError> {
    let wanted = patch_columns(report, schema);
    let keys: Vec<String> = schema
        .key_columns
        .iter()
        .enumerate()
        .map(|(i, k)| format!("{k} = __{i}__"))
        .collect();
    let mut reply_keys: Vec<String> = schema.key_columns.clone();
    for c in &wanted {
        if !reply_keys.iter().any(|k| fold_text(k) == fold_text(c)) {
            reply_keys.push(c.clone());
        }
    }
    let text = format!(
        "Fill in missing data for the row identified by {}. Find values for: {}. Reply with one JSON object per row using exactly these keys: {}.",
        keys.join(", "),
        wanted.join(", "),
        reply_keys.join(", ")
    );
    Template::new(&text)
}

/// Left-merge a patch table into the base: match rows on normalized key
/// tuples, fill only empty cells, never overwrite a non-empty one, and
/// append patch rows with unseen keys in patch order. Duplicate keys inside
/// the patch keep their first occurrence. Returns the merged table and any
/// warnings.
pub fn merge_patch(
    base: &ResultTable,
    patch: &ResultTable,
    schema: &Schema,
) -> (ResultTable, Vec<String>) {
    let mut warnings = Vec::new();

    let key_cols = |table: &ResultTable| -> Option<Vec<usize>> {
        schema
            .key_columns
            .iter()
            .map(|k| {
                let want = fold_text(k);
                table.columns.iter().position(|c| fold_text(c) == want)
            })
            .collect()
    };
    let Some(base_keys) = key_cols(base) else {
        warnings.push("base table lacks a key column; patch skipped".to_string());
        return (base.clone(), warnings);
    };
    let Some(patch_keys) = key_cols(patch) else {
        warnings.push("patch table lacks a key column; patch skipped".to_string());
        return (base.clone(), warnings);
    };

    let tuple_of = |row: &[String], cols: &[usize]| -> Vec<String> {
        cols.iter().map(|&c| normalize_cell(&row[c])).collect()
    };

    // Column mapping patch -> base by folded name.
    let patch_to_base: Vec<Option<usize>> = patch
        .columns
        .iter()
        .map(|pc| {
            let want = fold_text(pc);
            base.columns.iter().position(|bc| fold_text(bc) == want)
        })
        .collect();

    let mut merged = base.clone();
    let mut seen_patch_keys: std::collections::BTreeSet<Vec<String>> =
        std::collections::BTreeSet::new();

    for (pi, patch_row) in patch.rows.iter().enumerate() {
        let key = tuple_of(patch_row, &patch_keys);
        if key.iter().all(|k| k.is_empty()) {
            warnings.push(format!("patch row {pi} has an empty key; skipped"));
            continue;
        }
        if !seen_patch_keys.insert(key.clone()) {
            warnings.push(format!(
                "patch row {pi} repeats key {:?}; first occurrence wins",
                key.join(" / ")
            ));
            continue;
        }
        let targets: Vec<usize> = merged
            .rows
            .iter()
            .enumerate()
            .filter(|(_, row)| tuple_of(row, &base_keys) == key)
            .map(|(i, _)| i)
            .collect();
        if targets.is_empty() {
            // New key: append, projected onto base columns.
            let mut new_row = vec![String::new(); merged.columns.len()];
            for (pc, slot) in patch_to_base.iter().enumerate() {
                if let Some(bc) = slot {
                    new_row[*bc] = patch_row[pc].clone();
                }
            }
            merged.rows.push(new_row);
            continue;
        }
        for ti in targets {
            for (pc, slot) in patch_to_base.iter().enumerate() {
                let Some(bc) = slot else { continue };
                let incoming = &patch_row[pc];
                if normalize_cell(incoming).is_empty() {
                    continue;
                }
                if normalize_cell(&merged.rows[ti][*bc]).is_empty() {
                    merged.rows[ti][*bc] = incoming.clone();
                }
            }
        }
    }

    (merged, warnings)
}

/// How the repair loop gets fresh data: replan turns a patch matrix and
/// template into a decision, execute runs that decision to a table.
pub trait RepairHooks {
    fn replan(
        &mut self,
        patch_matrix: &TaskMatrix,
        patch_template: &Template,
        round: u32,
    ) -> Result<Decision, String>;

    fn execute(&mut self, decision: &Decision) -> Result<ResultTable, String>;
}

/// Outcome of [`reduce_loop`].
#[derive(Debug, Clone)]
pub struct ReduceOutcome {
    pub table: ResultTable,
    pub report: CompletenessReport,
    /// Patch rounds actually run.
    pub rounds: u32,
    pub warnings: Vec<String>,
}

/// Validate, then run up to `max_patch_rounds` repair passes while the table
/// is incomplete. Each round replans only the missing keys and fields and
/// merges the result back; merges never overwrite existing answers.
pub fn reduce_loop(
    table: ResultTable,
    matrix: &TaskMatrix,
    schema: &Schema,
    hooks: &mut dyn RepairHooks,
    max_patch_rounds: u32,
    trace: Option<&TraceLog>,
) -> Result<ReduceOutcome, ReduceError> {
    let mut table = table;
    let mut report = validate(&table, matrix, schema);
    let mut warnings = Vec::new();
    let mut rounds = 0u32;

    while !report.complete && rounds < max_patch_rounds {
        let round = rounds + 1;
        let patch_matrix = match build_patch_matrix(&report, schema) {
            Ok(m) => m,
            Err(e) => {
                // Keys the matrix cannot express (blank cells) are not
                // repairable; stop patching rather than crash the run.
                warnings.push(format!("patch round {round} skipped: {e}"));
                break;
            }
        };
        let patch_template = gen_patch_template(&report, schema)?;
        let decision = hooks
            .replan(&patch_matrix, &patch_template, round)
            .map_err(ReduceError::Hook)?;
        let patch_table = hooks.execute(&decision).map_err(ReduceError::Hook)?;
        let (merged, merge_warnings) = merge_patch(&table, &patch_table, schema);
        if let Some(t) = trace {
            t.append(
                TraceStage::Patch,
                serde_json::json!({
                    "round": round,
                    "missing_rows": report.missing_rows.len(),
                    "row_gaps": report.row_gaps.len(),
                    "patch_rows": patch_matrix.len(),
                    "merge_warnings": merge_warnings,
                }),
            );
        }
        warnings.extend(merge_warnings);
        table = merged;
        report = validate(&table, matrix, schema);
        rounds = round;
    }

    Ok(ReduceOutcome { table, report, rounds, warnings })
}

fn escape_md_cell(cell: &str) -> String {
    let one_line = cell.replace(['\n', '\r'], " ");
    let mut out = String::with_capacity(one_line.len());
    for ch in one_line.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '|' => out.push_str("\\|"),
            _ => out.push(ch),
        }
    }
    out
}

/// Render a table as a GitHub-style markdown table. Pipes and backslashes in
/// cells are escaped; newlines collapse to spaces.
pub fn to_markdown(table: &ResultTable) -> String {
    if table.columns.is_empty() {
        return String::new();
    }
    let mut out = String::new();
    let render_row = |cells: &[String]| -> String {
        let mut line = String::from("|");
        for c in cells {
            line.push_str(&format!(" {} |", escape_md_cell(c)));
        }
        line
    };
    out.push_str(&render_row(&table.columns));
    out.push('\n');
    out.push_str("|");
    for _ in &table.columns {
        out.push_str(" --- |");
    }
    out.push('\n');
    for row in &table.rows {
        out.push_str(&render_row(row));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::parse_markdown_table;
    use crate::types::BatchStrategy;
    use proptest::prelude::*;

    fn schema(cols: &[&str], keys: &[&str]) -> Schema {
        Schema::new(
            cols.iter().map(|s| s.to_string()).collect(),
            Some(keys.iter().map(|s| s.to_string()).collect()),
        )
        .unwrap()
    }

    fn matrix(cols: &[&str], rows: &[&[&str]]) -> TaskMatrix {
        TaskMatrix::new(
            cols.iter().map(|s| s.to_string()).collect(),
            rows.iter()
                .map(|r| r.iter().map(|s| s.to_string()).collect())
                .collect(),
        )
        .unwrap()
    }

    fn table(cols: &[&str], rows: &[&[&str]]) -> ResultTable {
        ResultTable::new(
            cols.iter().map(|s| s.to_string()).collect(),
            rows.iter()
                .map(|r| r.iter().map(|s| s.to_string()).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn complete_table_passes() {
        let m = matrix(&["company"], &[&["Acme"], &["Globex"]]);
        let s = schema(&["company", "year"], &["company"]);
        let t = table(&["company", "year"], &[&["acme", "1999"], &["Globex", "1989"]]);
        let report = validate(&t, &m, &s);
        assert!(report.complete);
        assert_eq!(report.matched_rows, 2);
        assert_eq!(report.extra_rows, 0);
    }

    #[test]
    fn extra_rows_never_block_completeness() {
        let m = matrix(&["company"], &[&["Acme"]]);
        let s = schema(&["company", "year"], &["company"]);
        let t = table(
            &["company", "year"],
            &[&["Acme", "1999"], &["Stray Corp", ""]],
        );
        let report = validate(&t, &m, &s);
        assert!(report.complete);
        assert_eq!(report.extra_rows, 1);
        assert!(report.row_gaps.is_empty());
    }

    #[test]
    fn missing_rows_and_cells_are_reported() {
        let m = matrix(&["company"], &[&["Acme"], &["Globex"], &["Initech"]]);
        let s = schema(&["company", "year", "ceo"], &["company"]);
        let t = table(
            &["company", "year", "ceo"],
            &[&["Acme", "1999", "n/a"], &["Globex", "1989", "Hank"]],
        );
        let report = validate(&t, &m, &s);
        assert!(!report.complete);
        assert_eq!(report.missing_rows, vec![vec!["Initech".to_string()]]);
        assert_eq!(report.row_gaps.len(), 1);
        assert_eq!(report.row_gaps[0].key, vec!["Acme".to_string()]);
        // The sentinel "n/a" counts as an empty cell.
        assert_eq!(report.row_gaps[0].missing_columns, vec!["ceo".to_string()]);
    }

    #[test]
    fn duplicate_rows_for_a_key_are_unioned() {
        let m = matrix(&["company"], &[&["Acme"]]);
        let s = schema(&["company", "year", "ceo"], &["company"]);
        let t = table(
            &["company", "year", "ceo"],
            &[&["Acme", "1999", ""], &["ACME", "", "Jane"]],
        );
        let report = validate(&t, &m, &s);
        assert!(report.complete, "cells filled across duplicates: {report:?}");
    }

    #[test]
    fn patch_matrix_orders_missing_rows_first_and_dedups() {
        let m = matrix(&["company"], &[&["Acme"], &["Globex"], &["Initech"]]);
        let s = schema(&["company", "year"], &["company"]);
        let t = table(&["company", "year"], &[&["Globex", ""]]);
        let report = validate(&t, &m, &s);
        let pm = build_patch_matrix(&report, &s).unwrap();
        assert_eq!(pm.columns, vec!["company".to_string()]);
        assert_eq!(
            pm.rows,
            vec![
                vec!["Acme".to_string()],
                vec!["Initech".to_string()],
                vec!["Globex".to_string()],
            ]
        );
    }

    #[test]
    fn patch_template_asks_only_for_missing_fields() {
        let m = matrix(&["company"], &[&["Acme"], &["Globex"]]);
        let s = schema(&["company", "year", "ceo", "hq"], &["company"]);
        // Globex is present and lacks only "hq".
        let t = table(
            &["company", "year", "ceo", "hq"],
            &[&["Globex", "1989", "Hank", ""]],
        );
        let report = validate(&t, &m, &s);
        let tpl = gen_patch_template(&report, &s).unwrap();
        // Acme is wholly missing, so all non-key columns are in scope.
        assert!(tpl.text.contains("__0__"));
        assert!(tpl.text.contains("year"));
        assert!(tpl.text.contains("ceo"));
        assert!(tpl.text.contains("hq"));

        // With only the gap row, just the gap column is requested.
        let t2 = table(
            &["company", "year", "ceo", "hq"],
            &[&["Acme", "1999", "Jane", "NYC"], &["Globex", "1989", "Hank", ""]],
        );
        let report2 = validate(&t2, &m, &s);
        let tpl2 = gen_patch_template(&report2, &s).unwrap();
        assert!(tpl2.text.contains("hq"));
        assert!(!tpl2.text.contains("ceo"));
        assert!(!tpl2.text.contains("year,"));
    }

    #[test]
    fn merge_fills_empty_cells_only() {
        let s = schema(&["company", "year", "ceo"], &["company"]);
        let base = table(
            &["company", "year", "ceo"],
            &[&["Acme", "1999", ""], &["Globex", "", "Hank"]],
        );
        let patch = table(
            &["company", "year", "ceo"],
            &[&["acme", "2024", "Jane"], &["GLOBEX ", "1989", "Wrong"]],
        );
        let (merged, warnings) = merge_patch(&base, &patch, &s);
        assert!(warnings.is_empty());
        // year was already set for Acme: not overwritten. ceo was empty: filled.
        assert_eq!(merged.rows[0], vec!["Acme", "1999", "Jane"]);
        assert_eq!(merged.rows[1], vec!["Globex", "1989", "Hank"]);
    }

    #[test]
    fn merge_appends_unseen_keys_in_patch_order() {
        let s = schema(&["company", "year"], &["company"]);
        let base = table(&["company", "year"], &[&["Acme", "1999"]]);
        let patch = table(&["company", "year"], &[&["New1", "1"], &["New2", "2"]]);
        let (merged, _) = merge_patch(&base, &patch, &s);
        assert_eq!(merged.rows.len(), 3);
        assert_eq!(merged.rows[1], vec!["New1", "1"]);
        assert_eq!(merged.rows[2], vec!["New2", "2"]);
    }

    #[test]
    fn duplicate_patch_keys_warn_and_first_wins() {
        let s = schema(&["company", "year"], &["company"]);
        let base = table(&["company", "year"], &[&["Acme", ""]]);
        let patch = table(&["company", "year"], &[&["Acme", "1999"], &["acme", "2024"]]);
        let (merged, warnings) = merge_patch(&base, &patch, &s);
        assert_eq!(merged.rows[0][1], "1999");
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("first occurrence wins"));
    }

    #[test]
    fn patch_columns_can_be_a_subset() {
        let s = schema(&["company", "year", "ceo"], &["company"]);
        let base = table(&["company", "year", "ceo"], &[&["Acme", "", "Jane"]]);
        let patch = table(&["company", "year"], &[&["Acme", "1999"]]);
        let (merged, _) = merge_patch(&base, &patch, &s);
        assert_eq!(merged.rows[0], vec!["Acme", "1999", "Jane"]);
    }

    struct ScriptedHooks {
        responses: Vec<ResultTable>,
        replans: Vec<(usize, u32)>,
    }

    impl RepairHooks for ScriptedHooks {
        fn replan(
            &mut self,
            patch_matrix: &TaskMatrix,
            _patch_template: &Template,
            round: u32,
        ) -> Result<Decision, String> {
            self.replans.push((patch_matrix.len(), round));
            let template = Template::new("patch __0__").unwrap();
            let schema = Schema::new(patch_matrix.columns.clone(), None).map_err(|e| e.to_string())?;
            Decision::new(
                patch_matrix.clone(),
                template,
                BatchStrategy::per_atom("delta-patch"),
                1,
                schema,
            )
            .map_err(|e| e.to_string())
        }

        fn execute(&mut self, _decision: &Decision) -> Result<ResultTable, String> {
            if self.responses.is_empty() {
                return Err("script exhausted".to_string());
            }
            Ok(self.responses.remove(0))
        }
    }

    #[test]
    fn reduce_loop_patches_until_complete() {
        let m = matrix(&["company"], &[&["Acme"], &["Globex"]]);
        let s = schema(&["company", "year"], &["company"]);
        let start = table(&["company", "year"], &[&["Acme", "1999"]]);
        let mut hooks = ScriptedHooks {
            responses: vec![table(&["company", "year"], &[&["Globex", "1989"]])],
            replans: Vec::new(),
        };
        let trace = TraceLog::new();
        let out = reduce_loop(start, &m, &s, &mut hooks, 2, Some(&trace)).unwrap();
        assert!(out.report.complete);
        assert_eq!(out.rounds, 1);
        assert_eq!(hooks.replans, vec![(1, 1)]);
        assert_eq!(out.table.rows.len(), 2);
        let events = trace.events();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].stage, TraceStage::Patch);
        assert_eq!(events[0].payload["round"], serde_json::json!(1));
    }

    #[test]
    fn reduce_loop_stops_at_round_budget() {
        let m = matrix(&["company"], &[&["Acme"]]);
        let s = schema(&["company", "year"], &["company"]);
        let start = table(&["company", "year"], &[&["Other", "1"]]);
        let useless = table(&["company", "year"], &[&["Still Wrong", "2"]]);
        let mut hooks = ScriptedHooks {
            responses: vec![useless.clone(), useless],
            replans: Vec::new(),
        };
        let out = reduce_loop(start, &m, &s, &mut hooks, 2, None).unwrap();
        assert!(!out.report.complete);
        assert_eq!(out.rounds, 2);
        assert_eq!(hooks.replans.len(), 2);
    }

    #[test]
    fn markdown_escapes_pipes_backslashes_newlines() {
        let t = table(&["a|b", "c"], &[&["x\ny", "has\\slash and | pipe"]]);
        let md = to_markdown(&t);
        assert!(md.contains("| a\\|b | c |"));
        assert!(md.contains("| x y | has\\\\slash and \\| pipe |"));
        let parsed = parse_markdown_table(&md).unwrap();
        assert_eq!(parsed.columns, vec!["a|b", "c"]);
        assert_eq!(parsed.rows[0][1], "has\\slash and | pipe");
    }

    proptest! {
        #[test]
        fn merge_never_overwrites_nonempty(
            base_year in "[a-z0-9]{1,6}",
            patch_year in "[a-z0-9]{1,6}",
        ) {
            let s = schema(&["k", "v"], &["k"]);
            let base = table(&["k", "v"], &[&["key", &base_year]]);
            let patch = table(&["k", "v"], &[&["key", &patch_year]]);
            let (merged, _) = merge_patch(&base, &patch, &s);
            prop_assert_eq!(merged.rows[0][1].clone(), base_year);
        }

        #[test]
        fn markdown_round_trips(
            cells in proptest::collection::vec("[ -~]{0,12}", 4..=4),
        ) {
            // Header cells must be distinguishable after the whitespace fold;
            // use fixed headers and fuzz the body.
            let t = table(
                &["col one", "col two"],
                &[&[cells[0].as_str(), cells[1].as_str()], &[cells[2].as_str(), cells[3].as_str()]],
            );
            let parsed = parse_markdown_table(&to_markdown(&t)).unwrap();
            prop_assert_eq!(parsed.columns.len(), 2);
            for (row, orig) in parsed.rows.iter().zip(t.rows.iter()) {
                for (got, want) in row.iter().zip(orig.iter()) {
                    // Leading/trailing spaces are not preserved by the cell
                    // syntax; inner content must be.
                    let flat = want.replace(['\n', '\r'], " ");
                    prop_assert_eq!(got.trim(), flat.trim());
                }
            }
        }
    }
}
