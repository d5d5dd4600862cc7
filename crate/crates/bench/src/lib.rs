//! Fixture builders shared by the benchmark targets. Everything is seeded,
//! so successive benchmark runs measure the same workload.

use std::sync::Arc;

use widemap_core::backends::MockEmbedder;
use widemap_core::memory::{MemoryStore, TraceDigest};
use widemap_core::simenv::{generate_world, World, WorldConfig};
use widemap_core::types::{
    BatchStrategy, Decision, LabelRule, ResultTable, Schema, TaskMatrix, Template, Utility,
};

/// A mid-size world: enough rows for batching and scoring to do real work.
pub fn demo_world(entities: usize) -> Arc<World> {
    Arc::new(generate_world(&WorldConfig { seed: 97, entities, attributes: 4 }))
}

/// A matrix of `n` rows with a low-cardinality second column, the shape
/// grouped batching exists for.
pub fn demo_matrix(n: usize) -> TaskMatrix {
    let rows = (0..n)
        .map(|i| vec![format!("entity-{i}"), format!("group-{}", i % 7)])
        .collect();
    TaskMatrix::new(vec!["entity".into(), "grp".into()], rows).unwrap()
}

/// A square-ish table pair where the prediction gets most rows right.
pub fn demo_tables(rows: usize) -> (ResultTable, ResultTable) {
    let columns: Vec<String> =
        ["name", "sector", "founded", "city", "lead"].iter().map(|s| s.to_string()).collect();
    let make_row = |i: usize, miss: bool| -> Vec<String> {
        vec![
            format!("company {i}"),
            format!("sector {}", i % 6),
            format!("{}", 1980 + (i % 40)),
            if miss { String::new() } else { format!("city {}", i % 9) },
            format!("lead {i}"),
        ]
    };
    let gold_rows: Vec<Vec<String>> = (0..rows).map(|i| make_row(i, false)).collect();
    let pred_rows: Vec<Vec<String>> = (0..rows).map(|i| make_row(i, i % 10 == 0)).collect();
    (
        ResultTable::new(columns.clone(), pred_rows).unwrap(),
        ResultTable::new(columns, gold_rows).unwrap(),
    )
}

/// A populated memory store: `records` committed runs with hash-derived
/// embeddings, a third of them failures.
pub fn demo_store(records: usize) -> MemoryStore {
    let embedder = MockEmbedder::new(3);
    let rule = LabelRule::new([("item_f1".to_string(), 0.7)].into_iter().collect()).unwrap();
    let mut store = MemoryStore::new();
    for i in 0..records {
        let matrix =
            TaskMatrix::new(vec!["entity".into()], vec![vec![format!("thing-{i}")]]).unwrap();
        let template = Template::new("Find data for __0__").unwrap();
        let schema = Schema::new(vec!["entity".into(), "value".into()], None).unwrap();
        let decision =
            Decision::new(matrix, template, BatchStrategy::per_atom("bench"), 1, schema).unwrap();
        let digest = TraceDigest {
            matrix_shape: (1, 1),
            template: "Find data for __0__".into(),
            strategy_mode: "per_atom".into(),
            batch_count: 1,
            scout_calls: 0,
            scout_tools: vec![],
            metrics: Default::default(),
        };
        let f1 = if i % 3 == 0 { 0.0 } else { 1.0 };
        let utility = Utility::from_metrics(
            [("item_f1".to_string(), f1)].into_iter().collect(),
            &rule,
            1.0,
            1.0,
        )
        .unwrap();
        let text = format!("find the suppliers of part number {i}");
        let embedding = widemap_core::backends::embed_unit(&embedder, &text).unwrap();
        store
            .commit(&format!("bench-{i}"), text, embedding, decision, digest, utility, &[])
            .unwrap();
    }
    store
}
