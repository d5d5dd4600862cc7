//! Hot-path benchmarks: planning, scoring, retrieval, and a whole run
//! against the simulated corpus.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use widemap_bench::{demo_matrix, demo_store, demo_tables, demo_world};
use widemap_core::backends::{embed_unit, FailingChat, MockEmbedder};
use widemap_core::engine::{run_task, Components, EngineConfig};
use widemap_core::mapping::{instantiate_tasks, plan_batches_guarded};
use widemap_core::memory::build_prior;
use widemap_core::metrics::{parse_markdown_table, score_table, ScoreOptions};
use widemap_core::reducer::to_markdown;
use widemap_core::simenv::{ScriptedPlanner, ScriptedSolver, SimCoach, SimEnv};
use widemap_core::types::{BatchStrategy, Template};

fn bench_planning(c: &mut Criterion) {
    let mut group = c.benchmark_group("plan_batches");
    let template = Template::new("look up __0__ in __1__").unwrap();
    for n in [64usize, 512] {
        let matrix = demo_matrix(n);
        let tasks = instantiate_tasks(&matrix, &template).unwrap();
        for (name, strategy) in [
            ("per_atom", BatchStrategy::per_atom("bench")),
            ("by_attr", BatchStrategy::by_attr(vec![1], vec![], "bench").unwrap()),
            ("open_chunked", BatchStrategy::open(vec![], Some(8), "bench").unwrap()),
        ] {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| {
                    plan_batches_guarded(black_box(&tasks), &matrix, &strategy, 8, None).unwrap()
                })
            });
        }
    }
    group.finish();
}

fn bench_scoring(c: &mut Criterion) {
    let mut group = c.benchmark_group("score_table");
    for rows in [50usize, 400] {
        let (pred, gold) = demo_tables(rows);
        group.bench_with_input(BenchmarkId::from_parameter(rows), &rows, |b, _| {
            b.iter(|| score_table(black_box(&pred), &gold, &ScoreOptions::default()).unwrap())
        });
    }
    let (pred, _) = demo_tables(200);
    let markdown = to_markdown(&pred);
    group.bench_function("parse_markdown_200", |b| {
        b.iter(|| parse_markdown_table(black_box(&markdown)).unwrap())
    });
    group.finish();
}

fn bench_retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("memory_prior");
    let embedder = MockEmbedder::new(3);
    let query = "find the suppliers of part number 999";
    let embedding = embed_unit(&embedder, query).unwrap();
    for records in [100usize, 1000] {
        let store = demo_store(records);
        let snapshot = store.snapshot();
        group.bench_with_input(BenchmarkId::from_parameter(records), &records, |b, _| {
            b.iter(|| build_prior(black_box(&snapshot), &FailingChat, query, &embedding))
        });
    }
    group.finish();
}

fn bench_whole_run(c: &mut Criterion) {
    let world = demo_world(30);
    let config = EngineConfig::default();
    let gold = world.gold_table();
    let query = world.query();
    c.bench_function("run_task_sim_30_entities", |b| {
        b.iter(|| {
            let parts = Components {
                planner: Arc::new(ScriptedPlanner::new(world.clone())),
                solver: Arc::new(ScriptedSolver::new(world.clone())),
                env: Arc::new(SimEnv::new(world.clone())),
                chat: Arc::new(SimCoach),
                embedder: Arc::new(MockEmbedder::new(0)),
            };
            run_task(black_box(&query), &parts, &config, None, Some(&gold)).unwrap()
        })
    });
}

criterion_group!(benches, bench_planning, bench_scoring, bench_retrieval, bench_whole_run);
criterion_main!(benches);
