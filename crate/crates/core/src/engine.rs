//! Run orchestration. One task run scouts the environment, recalls a prior
//! from memory, plans, maps the matrix into batches, executes them, repairs
//! gaps, and scores the final table. Instances run N trials against one
//! frozen memory snapshot and commit only the best trial; benchmarks stream
//! instances through a growing store with periodic distillation.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;

use crate::backends::{
    embed_unit, summarize_decision, BackendError, BatchSolver, ChatBackend, Embedder, PlanError,
    Planner,
};
use crate::executor::{execute_plan, ExecError, ToolEnvironment};
use crate::mapping::{instantiate_tasks, plan_batches_guarded, MappingError, DEFAULT_BATCH_GUARD};
use crate::memory::{
    build_prior, ExperientialPrior, MemorySnapshot, MemoryStore, TraceDigest, DISTILL_EVERY,
};
use crate::metrics::{
    aggregate, score_table, AggregateMetrics, MetricsError, RunMetrics, ScoreOptions,
};
use crate::reducer::{
    reduce_loop, to_markdown, CompletenessReport, RepairHooks, DEFAULT_MAX_PATCH_ROUNDS,
};
use crate::trace::TraceLog;
use crate::types::{
    BatchStrategy, Decision, LabelRule, Query, ResultTable, Schema, TaskMatrix, Template,
    TraceStage, Utility, ValidationError,
};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Reduce(#[from] crate::reducer::ReduceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Tunables for one engine. Defaults match the module constants.
#[derive(Debug, Clone, Serialize)]
pub struct EngineConfig {
    /// Concurrent batch workers.
    pub workers: usize,
    /// Solver retries per batch beyond the first attempt.
    pub max_retries: u32,
    /// Batch-count guard; None disables it.
    pub max_batches: Option<usize>,
    /// Repair rounds after the first pass.
    pub max_patch_rounds: u32,
    /// Scouting searches before planning.
    pub scout_calls: usize,
    /// Thresholds deciding a run's binary outcome label.
    pub label_rule: LabelRule,
    /// Scoring options for gold comparison.
    pub score_options: ScoreOptions,
    /// Distill memory every this many commits; 0 disables distillation.
    pub distill_every: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let label_rule = LabelRule::new(
            [("item_f1".to_string(), 0.7)].into_iter().collect(),
        )
        .expect("default rule is non-empty");
        EngineConfig {
            workers: crate::executor::DEFAULT_WORKERS,
            max_retries: crate::executor::DEFAULT_MAX_RETRIES,
            max_batches: Some(DEFAULT_BATCH_GUARD),
            max_patch_rounds: DEFAULT_MAX_PATCH_ROUNDS,
            scout_calls: 3,
            label_rule,
            score_options: ScoreOptions::default(),
            distill_every: DISTILL_EVERY,
        }
    }
}

/// The pluggable backends one engine drives.
#[derive(Clone)]
pub struct Components {
    pub planner: Arc<dyn Planner>,
    pub solver: Arc<dyn BatchSolver>,
    pub env: Arc<dyn ToolEnvironment>,
    pub chat: Arc<dyn ChatBackend>,
    pub embedder: Arc<dyn Embedder>,
}

/// Everything one finished run produced. Committing it to memory is the
/// caller's decision; running a task never mutates the store.
#[derive(Debug, Clone)]
pub struct TaskRun {
    pub decision: Decision,
    pub table: ResultTable,
    pub markdown: String,
    pub report: CompletenessReport,
    pub patch_rounds: u32,
    pub warnings: Vec<String>,
    pub metrics: RunMetrics,
    pub utility: Utility,
    pub prior: Option<ExperientialPrior>,
    pub digest: TraceDigest,
    pub embedding: Vec<f32>,
    pub trace: Arc<TraceLog>,
}

/// Deterministic scouting probes derived from the query.
fn scout_probes(query: &Query, max: usize) -> Vec<String> {
    let mut probes = vec![
        query.text.clone(),
        query.schema.columns.join(" "),
        query.schema.key_columns.join(" "),
    ];
    probes.truncate(max);
    probes
}

struct EngineHooks<'a> {
    solver: &'a dyn BatchSolver,
    config: &'a EngineConfig,
    trace: Arc<TraceLog>,
    schema: Schema,
    /// Solver calls spent in patch passes.
    patch_calls: usize,
}

impl RepairHooks for EngineHooks<'_> {
    fn replan(
        &mut self,
        patch_matrix: &TaskMatrix,
        patch_template: &Template,
        round: u32,
    ) -> Result<Decision, String> {
        Decision::new(
            patch_matrix.clone(),
            patch_template.clone(),
            BatchStrategy::per_atom(format!("delta-patch round {round}")),
            1,
            self.schema.clone(),
        )
        .map_err(|e| e.to_string())
    }

    fn execute(&mut self, decision: &Decision) -> Result<ResultTable, String> {
        let tasks =
            instantiate_tasks(&decision.matrix, &decision.template).map_err(|e| e.to_string())?;
        let batches = plan_batches_guarded(
            &tasks,
            &decision.matrix,
            &decision.strategy,
            decision.batch_size,
            self.config.max_batches,
        )
        .map_err(|e| e.to_string())?;
        let (table, logs) = execute_plan(
            &batches,
            &decision.output_schema.columns,
            self.solver,
            self.config.max_retries,
            self.config.workers,
            Some(&self.trace),
        )
        .map_err(|e| e.to_string())?;
        self.patch_calls += logs.len();
        Ok(table)
    }
}

/// Run one task end to end. With a memory snapshot, a prior is recalled and
/// handed to the planner; the snapshot is read-only and nothing is
/// committed. With a gold table the run is scored, otherwise metrics are
/// zero (and the label defaults to 0).
pub fn run_task(
    query: &Query,
    parts: &Components,
    config: &EngineConfig,
    memory: Option<&MemorySnapshot>,
    gold: Option<&ResultTable>,
) -> Result<TaskRun, EngineError> {
    let trace = TraceLog::new();

    let mut observations = Vec::new();
    let mut scout_tools: BTreeSet<String> = BTreeSet::new();
    let probes = scout_probes(query, config.scout_calls);
    for probe in &probes {
        scout_tools.insert("search".to_string());
        match parts.env.call("search", &json!({ "query": probe })) {
            Ok(obs) => observations.push(obs),
            Err(e) => observations.push(format!("search failed: {e}")),
        }
    }
    let scout_calls = probes.len();

    let embedding = embed_unit(parts.embedder.as_ref(), &query.text)?;
    let prior = memory
        .and_then(|snap| build_prior(snap, parts.chat.as_ref(), &query.text, &embedding));

    let decision = parts.planner.plan(query, &observations, prior.as_ref())?;
    let tasks = instantiate_tasks(&decision.matrix, &decision.template)?;
    let batches = plan_batches_guarded(
        &tasks,
        &decision.matrix,
        &decision.strategy,
        decision.batch_size,
        config.max_batches,
    )?;

    trace.append(
        TraceStage::Plan,
        json!({
            "decision": summarize_decision(&decision),
            "strategy_mode": decision.strategy.mode(),
            "batch_count": batches.len(),
            "scout_calls": scout_calls,
            "prior": prior.as_ref().map(|p| json!({
                "used_hints": p.used_hints,
                "guidance": p.guidance,
            })),
        }),
    );

    let (table, logs) = execute_plan(
        &batches,
        &decision.output_schema.columns,
        parts.solver.as_ref(),
        config.max_retries,
        config.workers,
        Some(&trace),
    )?;

    let mut hooks = EngineHooks {
        solver: parts.solver.as_ref(),
        config,
        trace: trace.clone(),
        schema: decision.output_schema.clone(),
        patch_calls: 0,
    };
    let outcome = reduce_loop(
        table,
        &decision.matrix,
        &decision.output_schema,
        &mut hooks,
        config.max_patch_rounds,
        Some(&trace),
    )?;
    let markdown = to_markdown(&outcome.table);

    let metrics = match gold {
        Some(g) => score_table(&outcome.table, g, &config.score_options)?,
        None => RunMetrics::zeros(),
    };
    // Cost counts every solver and scout call; delay counts sequential
    // passes (the map pass plus each patch round).
    let cost = (scout_calls + logs.len() + hooks.patch_calls) as f64;
    let delay = 1.0 + f64::from(outcome.rounds);
    let utility = Utility::from_metrics(metrics.as_map(), &config.label_rule, cost, delay)?;

    let digest = TraceDigest {
        matrix_shape: (decision.matrix.len(), decision.matrix.width()),
        template: decision.template.text.clone(),
        strategy_mode: decision.strategy.mode().to_string(),
        batch_count: batches.len(),
        scout_calls,
        scout_tools: scout_tools.into_iter().collect(),
        metrics: metrics.as_map(),
    };

    Ok(TaskRun {
        decision,
        table: outcome.table,
        markdown,
        report: outcome.report,
        patch_rounds: outcome.rounds,
        warnings: outcome.warnings,
        metrics,
        utility,
        prior,
        digest,
        embedding,
        trace,
    })
}

/// One instance's trials and what was committed.
#[derive(Debug)]
pub struct InstanceOutcome {
    pub instance_id: String,
    pub runs: Vec<Result<TaskRun, String>>,
    /// Index of the best completed trial, if any trial completed.
    pub best_trial: Option<usize>,
    pub committed_record: Option<usize>,
    pub distilled: bool,
    pub warnings: Vec<String>,
}

/// Run `trials` independent trials against one frozen snapshot of the store
/// and commit the best one (highest item F1; ties go to the earliest trial).
/// A trial that errors is recorded and never committed; if every trial
/// errors, nothing is committed. Label-0 runs do commit: failures are
/// memories too.
pub fn run_instance(
    instance_id: &str,
    query: &Query,
    parts: &Components,
    config: &EngineConfig,
    store: &mut MemoryStore,
    gold: Option<&ResultTable>,
    trials: usize,
) -> InstanceOutcome {
    let snapshot = store.snapshot();
    let mut runs: Vec<Result<TaskRun, String>> = Vec::new();
    for _ in 0..trials.max(1) {
        runs.push(
            run_task(query, parts, config, Some(&snapshot), gold).map_err(|e| e.to_string()),
        );
    }

    let best_trial = runs
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.as_ref().ok().map(|run| (i, run.metrics.item_f1)))
        .max_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.0.cmp(&a.0))
        })
        .map(|(i, _)| i);

    let mut committed_record = None;
    let mut distilled = false;
    let mut warnings = Vec::new();
    if let Some(i) = best_trial {
        let run = runs[i].as_ref().expect("best trial completed");
        let used_hints = run
            .prior
            .as_ref()
            .map(|p| p.used_hints.clone())
            .unwrap_or_default();
        match store.commit(
            instance_id,
            query.text.clone(),
            run.embedding.clone(),
            run.decision.clone(),
            run.digest.clone(),
            run.utility.clone(),
            &used_hints,
        ) {
            Ok((rid, mut w)) => {
                committed_record = Some(rid);
                warnings.append(&mut w);
                if config.distill_every > 0 && store.commit_count() % config.distill_every == 0 {
                    let report = store.distill(parts.chat.as_ref());
                    warnings.extend(report.warnings);
                    distilled = true;
                }
            }
            Err(e) => warnings.push(e.to_string()),
        }
    }

    InstanceOutcome {
        instance_id: instance_id.to_string(),
        runs,
        best_trial,
        committed_record,
        distilled,
        warnings,
    }
}

/// One benchmark task: an id (the double-commit key), its query, and the
/// reference table when known.
#[derive(Debug, Clone)]
pub struct BenchInstance {
    pub id: String,
    pub query: Query,
    pub gold: Option<ResultTable>,
}

/// Per-instance benchmark row.
#[derive(Debug, Clone, Serialize)]
pub struct InstanceReport {
    pub id: String,
    pub committed_record: Option<usize>,
    pub strategy_mode: Option<String>,
    pub label: Option<u8>,
    pub cost: Option<f64>,
    pub metrics: Option<RunMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub instances: Vec<InstanceReport>,
    pub aggregate: Option<AggregateMetrics>,
}

/// Run instances sequentially through a shared, growing memory store. Each
/// instance gets its own components (environments are usually
/// instance-specific); an instance that fails outright is recorded and the
/// benchmark moves on.
pub fn run_benchmark(
    instances: &[BenchInstance],
    mut components_for: impl FnMut(&BenchInstance) -> Components,
    config: &EngineConfig,
    store: &mut MemoryStore,
    trials: usize,
) -> BenchReport {
    let mut reports = Vec::new();
    let mut scored: Vec<RunMetrics> = Vec::new();
    for inst in instances {
        let parts = components_for(inst);
        let outcome =
            run_instance(&inst.id, &inst.query, &parts, config, store, inst.gold.as_ref(), trials);
        match outcome.best_trial.and_then(|i| outcome.runs[i].as_ref().ok()) {
            Some(run) => {
                scored.push(run.metrics.clone());
                reports.push(InstanceReport {
                    id: inst.id.clone(),
                    committed_record: outcome.committed_record,
                    strategy_mode: Some(run.decision.strategy.mode().to_string()),
                    label: Some(run.utility.label()),
                    cost: Some(run.utility.cost()),
                    metrics: Some(run.metrics.clone()),
                    error: None,
                });
            }
            None => {
                let error = outcome
                    .runs
                    .iter()
                    .find_map(|r| r.as_ref().err().cloned())
                    .unwrap_or_else(|| "no trials ran".to_string());
                reports.push(InstanceReport {
                    id: inst.id.clone(),
                    committed_record: None,
                    strategy_mode: None,
                    label: None,
                    cost: None,
                    metrics: None,
                    error: Some(error),
                });
            }
        }
    }
    let aggregate = aggregate(&scored).ok();
    BenchReport { instances: reports, aggregate }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::{
        generate_world, ScriptedPlanner, ScriptedSolver, SimCoach, SimEnv, World, WorldConfig,
    };
    use crate::backends::MockEmbedder;

    fn world(seed: u64) -> Arc<World> {
        Arc::new(generate_world(&WorldConfig { seed, entities: 16, attributes: 4 }))
    }

    fn sim_components(w: &Arc<World>) -> Components {
        Components {
            planner: Arc::new(ScriptedPlanner::new(w.clone())),
            solver: Arc::new(ScriptedSolver::new(w.clone())),
            env: Arc::new(SimEnv::new(w.clone())),
            chat: Arc::new(SimCoach),
            embedder: Arc::new(MockEmbedder::new(5)),
        }
    }

    #[test]
    fn run_task_recovers_the_gold_table() {
        let w = world(3);
        let parts = sim_components(&w);
        let config = EngineConfig::default();
        let gold = w.gold_table();
        let run = run_task(&w.query(), &parts, &config, None, Some(&gold)).unwrap();
        assert!(run.report.complete, "{:?}", run.report);
        assert_eq!(run.metrics.item_f1, 1.0);
        assert_eq!(run.metrics.success_rate, 1.0);
        assert_eq!(run.utility.label(), 1);
        assert_eq!(run.patch_rounds, 0);
        assert!(run.markdown.starts_with("| entity |"));
        // Scouting happened and went into the digest.
        assert_eq!(run.digest.scout_calls, 3);
        assert_eq!(run.digest.scout_tools, vec!["search".to_string()]);
        assert_eq!(run.digest.strategy_mode, "per_atom");
    }

    #[test]
    fn plan_event_precedes_every_execute_event() {
        let w = world(4);
        let parts = sim_components(&w);
        let config = EngineConfig::default();
        let run = run_task(&w.query(), &parts, &config, None, None).unwrap();
        let events = run.trace.events();
        assert!(!events.is_empty());
        assert_eq!(events[0].stage, TraceStage::Plan);
        assert_eq!(
            events.iter().filter(|e| e.stage == TraceStage::Plan).count(),
            1
        );
        assert!(events[1..].iter().all(|e| e.stage != TraceStage::Plan));
        // Without gold, the run scores zero and labels 0.
        assert_eq!(run.utility.label(), 0);
    }

    #[test]
    fn withheld_columns_are_patched_in_by_the_reduce_loop() {
        let w = world(5);
        let mut parts = sim_components(&w);
        parts.solver = Arc::new(
            ScriptedSolver::new(w.clone()).with_omitted_columns(vec!["city".to_string()]),
        );
        let config = EngineConfig::default();
        let gold = w.gold_table();
        let run = run_task(&w.query(), &parts, &config, None, Some(&gold)).unwrap();
        assert!(run.report.complete, "patch pass should fill the withheld column");
        assert_eq!(run.patch_rounds, 1);
        assert_eq!(run.metrics.item_f1, 1.0);
        let events = run.trace.events();
        assert!(events.iter().any(|e| e.stage == TraceStage::Patch));
    }

    #[test]
    fn batch_guard_aborts_oversized_plans() {
        let w = Arc::new(generate_world(&WorldConfig { seed: 6, entities: 60, attributes: 3 }));
        let parts = sim_components(&w);
        let config = EngineConfig::default();
        let err = run_task(&w.query(), &parts, &config, None, None).unwrap_err();
        assert!(matches!(err, EngineError::Mapping(_)), "{err}");

        let relaxed = EngineConfig { max_batches: None, ..EngineConfig::default() };
        assert!(run_task(&w.query(), &parts, &relaxed, None, None).is_ok());
    }

    #[test]
    fn instance_commits_best_trial_once() {
        let w = world(7);
        let parts = sim_components(&w);
        let config = EngineConfig::default();
        let mut store = MemoryStore::new();
        let gold = w.gold_table();
        let outcome =
            run_instance("inst-a", &w.query(), &parts, &config, &mut store, Some(&gold), 2);
        assert_eq!(outcome.best_trial, Some(0), "tie on f1 goes to the first trial");
        assert_eq!(outcome.committed_record, Some(0));
        assert_eq!(store.commit_count(), 1);

        // A second commit for the same instance is refused but not fatal.
        let again =
            run_instance("inst-a", &w.query(), &parts, &config, &mut store, Some(&gold), 1);
        assert_eq!(again.committed_record, None);
        assert!(again.warnings.iter().any(|w| w.contains("already committed")));
    }

    #[test]
    fn goldless_runs_commit_with_label_zero() {
        let w = world(8);
        let parts = sim_components(&w);
        let config = EngineConfig::default();
        let mut store = MemoryStore::new();
        let outcome = run_instance("inst-b", &w.query(), &parts, &config, &mut store, None, 1);
        assert_eq!(outcome.committed_record, Some(0));
        assert_eq!(store.records()[0].utility.label(), 0);
    }

    #[test]
    fn benchmark_memory_cuts_cost_after_first_instance() {
        let worlds: Vec<Arc<World>> = (0..4).map(|i| world(20 + i)).collect();
        let instances: Vec<BenchInstance> = worlds
            .iter()
            .enumerate()
            .map(|(i, w)| BenchInstance {
                id: format!("sim-{i}"),
                query: w.query(),
                gold: Some(w.gold_table()),
            })
            .collect();
        let config = EngineConfig { distill_every: 1, ..EngineConfig::default() };
        let mut store = MemoryStore::new();
        let by_id: std::collections::HashMap<String, Arc<World>> = instances
            .iter()
            .zip(&worlds)
            .map(|(inst, w)| (inst.id.clone(), w.clone()))
            .collect();
        let report = run_benchmark(
            &instances,
            |inst| sim_components(&by_id[&inst.id]),
            &config,
            &mut store,
            1,
        );

        assert_eq!(report.instances.len(), 4);
        assert!(report.instances.iter().all(|r| r.error.is_none()));
        assert_eq!(store.commit_count(), 4);
        // First instance runs cold and wasteful; the distilled hint flips
        // every later instance to grouped batching at under half the cost.
        assert_eq!(report.instances[0].strategy_mode.as_deref(), Some("per_atom"));
        let cold_cost = report.instances[0].cost.unwrap();
        for r in &report.instances[1..] {
            assert_eq!(r.strategy_mode.as_deref(), Some("by_attr"), "{:?}", r.id);
            assert!(r.cost.unwrap() <= cold_cost / 2.0, "{:?}", r.cost);
        }
        let agg = report.aggregate.unwrap();
        assert_eq!(agg.runs, 4);
        assert_eq!(agg.avg["item_f1"], 1.0);
    }

    #[test]
    fn benchmark_records_failures_and_continues() {
        let good = world(30);
        let over = Arc::new(generate_world(&WorldConfig { seed: 31, entities: 60, attributes: 3 }));
        let instances = vec![
            BenchInstance { id: "too-big".into(), query: over.query(), gold: None },
            BenchInstance { id: "fine".into(), query: good.query(), gold: Some(good.gold_table()) },
        ];
        let config = EngineConfig::default();
        let mut store = MemoryStore::new();
        let report = run_benchmark(
            &instances,
            |inst| {
                if inst.id == "too-big" {
                    sim_components(&over)
                } else {
                    sim_components(&good)
                }
            },
            &config,
            &mut store,
            1,
        );
        assert!(report.instances[0].error.is_some());
        assert!(report.instances[1].error.is_none());
        assert_eq!(store.commit_count(), 1);
        assert_eq!(report.aggregate.as_ref().unwrap().runs, 1);
    }
}
