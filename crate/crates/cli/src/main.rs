//! widemap: run wide-search tasks against the simulated corpus, score the
//! resulting tables, and inspect or maintain the experiential memory store.
//!
//! Subcommands:
//!   run     execute instances from a query file and write run artifacts
//!   eval    score predicted tables against a gold table
//!   memory  inspect records, list hints, force a distillation pass, prune
//!   simenv  generate fixture worlds and ready-to-run instance files
//!
//! Exit codes: 0 success, 2 usage, 3 evaluation input, 4 memory store
//! corruption, 1 anything else fatal.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use widemap_core::backends::{
    ChatBackend, ChatPlanner, HttpChat, HttpChatConfig, HttpEmbedder, HttpEmbedderConfig,
    MockEmbedder, RetryPolicy, ToolLoopSolver,
};
use widemap_core::engine::{run_instance, Components, EngineConfig, InstanceReport};
use widemap_core::memory::{MemoryError, MemoryStore};
use widemap_core::metrics::{
    aggregate, parse_markdown_table, score_table, ItemPairing, RunMetrics, ScoreOptions,
};
use widemap_core::reducer::to_markdown;
use widemap_core::simenv::{
    generate_world, ScriptedPlanner, ScriptedSolver, SimCoach, SimEnv, World, WorldConfig,
};
use widemap_core::trace::{render_jsonl, TraceLog};
use widemap_core::types::{LabelRule, Query, TraceStage};

#[derive(Parser)]
#[command(
    name = "widemap",
    version,
    about = "Wide-search execution engine: plan, batch, solve, reduce, remember"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the instances in a query file and write run artifacts.
    Run(RunArgs),
    /// Score a predicted table (or a directory of runs) against a gold table.
    Eval(EvalArgs),
    /// Inspect or maintain a memory store directory.
    Memory {
        #[command(subcommand)]
        action: MemoryAction,
    },
    /// Generate simulated worlds and instance files.
    Simenv {
        #[command(subcommand)]
        action: SimenvAction,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Instance file: one JSON object, or one per line (JSONL).
    #[arg(long)]
    query_file: PathBuf,
    /// TOML config file; omitted fields fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Memory store directory; loaded before and saved after each instance.
    #[arg(long)]
    memory: Option<PathBuf>,
    /// Independent trials per instance; the best one is kept.
    #[arg(long)]
    trials: Option<usize>,
    /// Directory that receives one subdirectory of artifacts per instance.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("input").required(true).args(["pred", "runs_dir"])))]
struct EvalArgs {
    /// Markdown file holding the predicted table.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Markdown file holding the gold table.
    #[arg(long)]
    gold: PathBuf,
    /// Directory of run subdirectories; every answer.md inside is scored.
    #[arg(long)]
    runs_dir: Option<PathBuf>,
    /// Also score exact-match accuracy of this column's value set.
    #[arg(long)]
    core_entity: Option<String>,
    /// Pair items by bare cell value instead of (column, value).
    #[arg(long)]
    value_only: bool,
}

#[derive(Subcommand)]
enum MemoryAction {
    /// One line per committed record.
    Inspect {
        #[arg(long)]
        dir: PathBuf,
    },
    /// One line per hint with score and provenance.
    Hints {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Force a distillation pass now and save the store.
    Distill {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Drop hints whose score has fallen to zero or below.
    Prune {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum SimenvAction {
    /// Write world.json, gold tables, and a ready-to-run instance.json.
    Generate {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        entities: usize,
        #[arg(long, default_value_t = 4)]
        attrs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit a multi-instance JSONL file, one world per seed.
    Bench {
        /// Comma-separated world seeds.
        #[arg(long, default_value = "20,21,22")]
        seeds: String,
        #[arg(long, default_value_t = 20)]
        entities: usize,
        #[arg(long, default_value_t = 4)]
        attrs: usize,
        /// Transport-fault percentage injected into every instance.
        #[arg(long, default_value_t = 0)]
        fault_percent: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
enum Failure {
    Usage(String),
    EvalInput(String),
    Corrupt(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::EvalInput(_) => 3,
            Failure::Corrupt(_) => 4,
            Failure::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::EvalInput(m) | Failure::Corrupt(m) | Failure::Other(m) => m,
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Memory { action } => cmd_memory(action),
        Command::Simenv { action } => cmd_simenv(action),
    };
    if let Err(failure) = result {
        eprintln!("error: {}", failure.message());
        std::process::exit(failure.code());
    }
}

// -- configuration -----------------------------------------------------------

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    engine: EngineSection,
    backend: BackendSection,
    run: RunSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EngineSection {
    workers: usize,
    max_retries: u32,
    /// Batch-count guard; 0 disables it.
    max_batches: usize,
    max_patch_rounds: u32,
    scout_calls: usize,
    /// Distill after every this many commits; 0 disables distillation.
    distill_every: u64,
    /// Metric thresholds that must all hold for a run to count as good.
    label_rule: BTreeMap<String, f64>,
    score: ScoreOptions,
}

impl Default for EngineSection {
    fn default() -> Self {
        let d = EngineConfig::default();
        EngineSection {
            workers: d.workers,
            max_retries: d.max_retries,
            max_batches: d.max_batches.unwrap_or(0),
            max_patch_rounds: d.max_patch_rounds,
            scout_calls: d.scout_calls,
            distill_every: d.distill_every,
            label_rule: [("item_f1".to_string(), 0.7)].into(),
            score: ScoreOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BackendSection {
    kind: BackendKind,
    /// Transport-fault percentage for the simulated environment.
    fault_percent: u64,
    /// Seed of the deterministic mock embedder.
    embed_seed: u64,
    http: Option<HttpSection>,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection { kind: BackendKind::Sim, fault_percent: 0, embed_seed: 0, http: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum BackendKind {
    Sim,
    Http,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct HttpSection {
    chat_endpoint: String,
    chat_model: String,
    embed_endpoint: String,
    embed_model: String,
    embed_dimension: usize,
    #[serde(default)]
    api_key_env: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunSection {
    out_dir: PathBuf,
    trials: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { out_dir: PathBuf::from("runs"), trials: 1 }
    }
}

/// Load the config file (when given), then apply WIDEMAP_* environment
/// overrides. Precedence: command-line flags > environment > file > defaults.
fn load_config(path: Option<&Path>) -> Result<FileConfig, Failure> {
    let mut config = match path {
        None => FileConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?
        }
    };
    apply_env_overrides(&mut config)?;
    Ok(config)
}

fn env_parse<T: std::str::FromStr>(name: &str) -> Result<Option<T>, Failure> {
    match std::env::var(name) {
        Err(_) => Ok(None),
        Ok(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{name}: cannot parse {raw:?}"))),
    }
}

fn apply_env_overrides(config: &mut FileConfig) -> Result<(), Failure> {
    if let Some(v) = env_parse("WIDEMAP_WORKERS")? {
        config.engine.workers = v;
    }
    if let Some(v) = env_parse("WIDEMAP_MAX_RETRIES")? {
        config.engine.max_retries = v;
    }
    if let Some(v) = env_parse("WIDEMAP_MAX_BATCHES")? {
        config.engine.max_batches = v;
    }
    if let Some(v) = env_parse("WIDEMAP_MAX_PATCH_ROUNDS")? {
        config.engine.max_patch_rounds = v;
    }
    if let Some(v) = env_parse("WIDEMAP_SCOUT_CALLS")? {
        config.engine.scout_calls = v;
    }
    if let Some(v) = env_parse("WIDEMAP_DISTILL_EVERY")? {
        config.engine.distill_every = v;
    }
    if let Some(v) = env_parse::<String>("WIDEMAP_BACKEND")? {
        config.backend.kind = match v.as_str() {
            "sim" => BackendKind::Sim,
            "http" => BackendKind::Http,
            other => {
                return Err(Failure::Usage(format!(
                    "WIDEMAP_BACKEND: expected sim or http, got {other:?}"
                )))
            }
        };
    }
    if let Some(v) = env_parse("WIDEMAP_FAULT_PERCENT")? {
        config.backend.fault_percent = v;
    }
    if let Some(v) = env_parse::<String>("WIDEMAP_OUT_DIR")? {
        config.run.out_dir = PathBuf::from(v);
    }
    if let Some(v) = env_parse("WIDEMAP_TRIALS")? {
        config.run.trials = v;
    }
    Ok(())
}

fn engine_config(config: &FileConfig) -> Result<EngineConfig, Failure> {
    let label_rule = LabelRule::new(config.engine.label_rule.clone())
        .map_err(|e| Failure::Usage(format!("engine.label_rule: {e}")))?;
    Ok(EngineConfig {
        workers: config.engine.workers.max(1),
        max_retries: config.engine.max_retries,
        max_batches: match config.engine.max_batches {
            0 => None,
            n => Some(n),
        },
        max_patch_rounds: config.engine.max_patch_rounds,
        scout_calls: config.engine.scout_calls,
        label_rule,
        score_options: config.engine.score.clone(),
        distill_every: config.engine.distill_every,
    })
}

// -- instances and components ------------------------------------------------

/// One runnable instance: a world to generate and optional overrides. The
/// gold table and default query come from the world itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceSpec {
    id: String,
    world: WorldConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fault_percent: Option<u64>,
    /// Query text override; the world's schema always applies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query: Option<String>,
}

/// Accept a single JSON object or one object per line.
fn read_instances(path: &Path) -> Result<Vec<InstanceSpec>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("query file {}: {e}", path.display())))?;
    if let Ok(single) = serde_json::from_str::<InstanceSpec>(&text) {
        return Ok(vec![single]);
    }
    let mut specs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let spec: InstanceSpec = serde_json::from_str(line).map_err(|e| {
            Failure::Usage(format!("query file {} line {}: {e}", path.display(), i + 1))
        })?;
        specs.push(spec);
    }
    if specs.is_empty() {
        return Err(Failure::Usage(format!(
            "query file {} holds no instances",
            path.display()
        )));
    }
    Ok(specs)
}

fn chat_backend(config: &FileConfig) -> Result<Arc<dyn ChatBackend>, Failure> {
    match config.backend.kind {
        BackendKind::Sim => Ok(Arc::new(SimCoach)),
        BackendKind::Http => {
            let http = http_section(config)?;
            let chat = HttpChat::new(HttpChatConfig {
                endpoint: http.chat_endpoint.clone(),
                model: http.chat_model.clone(),
                api_key_env: http.api_key_env.clone(),
                timeout_ms: 30_000,
                max_concurrency: 4,
                retry: RetryPolicy::default(),
            })
            .map_err(|e| Failure::Other(format!("chat backend: {e}")))?;
            Ok(Arc::new(chat))
        }
    }
}

fn http_section(config: &FileConfig) -> Result<&HttpSection, Failure> {
    config.backend.http.as_ref().ok_or_else(|| {
        Failure::Usage("backend.kind is \"http\" but [backend.http] is missing".to_string())
    })
}

fn components_for(world: Arc<World>, fault: u64, config: &FileConfig) -> Result<Components, Failure> {
    let env = Arc::new(SimEnv::with_fault_percent(world.clone(), fault));
    match config.backend.kind {
        BackendKind::Sim => Ok(Components {
            planner: Arc::new(ScriptedPlanner::new(world.clone())),
            solver: Arc::new(ScriptedSolver::new(world)),
            env,
            chat: Arc::new(SimCoach),
            embedder: Arc::new(MockEmbedder::new(config.backend.embed_seed)),
        }),
        BackendKind::Http => {
            let http = http_section(config)?;
            let chat = chat_backend(config)?;
            let embedder = HttpEmbedder::new(HttpEmbedderConfig {
                endpoint: http.embed_endpoint.clone(),
                model: http.embed_model.clone(),
                api_key_env: http.api_key_env.clone(),
                timeout_ms: 30_000,
                dimension: http.embed_dimension,
                retry: RetryPolicy::default(),
            })
            .map_err(|e| Failure::Other(format!("embedding backend: {e}")))?;
            Ok(Components {
                planner: Arc::new(ChatPlanner::new(chat.clone())),
                solver: Arc::new(ToolLoopSolver::new(chat.clone(), env.clone())),
                env,
                chat,
                embedder: Arc::new(embedder),
            })
        }
    }
}

// -- run ----------------------------------------------------------------------

fn write_file(path: &Path, content: &str) -> Result<(), Failure> {
    std::fs::write(path, content)
        .map_err(|e| Failure::Other(format!("writing {}: {e}", path.display())))
}

fn with_final_newline(mut s: String) -> String {
    if !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

fn pretty(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable artifact");
    s.push('\n');
    s
}

fn load_store(dir: &Path) -> Result<MemoryStore, Failure> {
    MemoryStore::load(dir).map_err(memory_failure)
}

fn memory_failure(e: MemoryError) -> Failure {
    match e {
        MemoryError::Corrupt { .. } => Failure::Corrupt(e.to_string()),
        other => Failure::Other(other.to_string()),
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let config = load_config(args.config.as_deref())?;
    let engine = engine_config(&config)?;
    let trials = args.trials.unwrap_or(config.run.trials).max(1);
    let out_dir = args.out.clone().unwrap_or_else(|| config.run.out_dir.clone());

    let specs = read_instances(&args.query_file)?;
    let mut store = match &args.memory {
        Some(dir) => load_store(dir)?,
        None => MemoryStore::new(),
    };

    let mut rows: Vec<InstanceReport> = Vec::new();
    let mut scored: Vec<RunMetrics> = Vec::new();
    let mut failed = 0usize;

    for (n, spec) in specs.iter().enumerate() {
        let world = Arc::new(generate_world(&spec.world));
        let gold = world.gold_table();
        let query = match &spec.query {
            Some(text) => Query::new(text.clone(), world.schema())
                .map_err(|e| Failure::Usage(format!("instance {}: {e}", spec.id)))?,
            None => world.query(),
        };
        let fault = spec.fault_percent.unwrap_or(config.backend.fault_percent);
        let parts = components_for(world, fault, &config)?;

        let outcome = run_instance(&spec.id, &query, &parts, &engine, &mut store, Some(&gold), trials);
        if let Some(dir) = &args.memory {
            store.save(dir).map_err(memory_failure)?;
        }
        for warning in &outcome.warnings {
            log::warn!("{}: {warning}", spec.id);
        }

        let run_dir = out_dir.join(&spec.id);
        std::fs::create_dir_all(&run_dir)
            .map_err(|e| Failure::Other(format!("creating {}: {e}", run_dir.display())))?;

        match outcome.best_trial {
            Some(best) => {
                let run = outcome.runs[best].as_ref().expect("best trial completed");
                let completed: Vec<RunMetrics> = outcome
                    .runs
                    .iter()
                    .filter_map(|r| r.as_ref().ok().map(|t| t.metrics.clone()))
                    .collect();
                write_file(&run_dir.join("trace.jsonl"), &render_jsonl(&run.trace.events()))?;
                write_file(&run_dir.join("answer.md"), &with_final_newline(run.markdown.clone()))?;
                write_file(&run_dir.join("decision.json"), &pretty(&run.decision))?;
                let metrics_doc = json!({
                    "trials": trials,
                    "completed": completed.len(),
                    "best_trial": best,
                    "label": run.utility.label(),
                    "cost": run.utility.cost(),
                    "delay": run.utility.delay(),
                    "best": run.metrics,
                    "aggregate": aggregate(&completed).ok(),
                });
                write_file(&run_dir.join("metrics.json"), &pretty(&metrics_doc))?;

                if n > 0 {
                    println!();
                }
                print!("{}", with_final_newline(run.markdown.clone()));

                scored.push(run.metrics.clone());
                rows.push(InstanceReport {
                    id: spec.id.clone(),
                    committed_record: outcome.committed_record,
                    strategy_mode: Some(run.decision.strategy.mode().to_string()),
                    label: Some(run.utility.label()),
                    cost: Some(run.utility.cost()),
                    metrics: Some(run.metrics.clone()),
                    error: None,
                });
            }
            None => {
                failed += 1;
                let error = outcome
                    .runs
                    .iter()
                    .find_map(|r| r.as_ref().err().cloned())
                    .unwrap_or_else(|| "no trials ran".to_string());
                // Even a failed instance leaves a trace behind.
                let trace = TraceLog::new();
                trace.append(TraceStage::Error, json!({ "error": error }));
                write_file(&run_dir.join("trace.jsonl"), &render_jsonl(&trace.events()))?;
                log::error!("{}: {error}", spec.id);
                rows.push(InstanceReport {
                    id: spec.id.clone(),
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

    if specs.len() > 1 {
        let report = json!({
            "instances": rows,
            "aggregate": aggregate(&scored).ok(),
        });
        write_file(&out_dir.join("report.json"), &pretty(&report))?;
    }

    if failed > 0 {
        return Err(Failure::Other(format!(
            "{failed} of {} instances failed",
            specs.len()
        )));
    }
    Ok(())
}

// -- eval ----------------------------------------------------------------------

fn read_table(path: &Path) -> Result<widemap_core::ResultTable, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::EvalInput(format!("{}: {e}", path.display())))?;
    parse_markdown_table(&text).map_err(|e| Failure::EvalInput(format!("{}: {e}", path.display())))
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let gold = read_table(&args.gold)?;
    let options = ScoreOptions {
        item_pairing: if args.value_only { ItemPairing::ValueOnly } else { ItemPairing::ColumnValue },
        core_entity_column: args.core_entity.clone(),
    };

    if let Some(pred_path) = &args.pred {
        let pred = read_table(pred_path)?;
        let metrics = score_table(&pred, &gold, &options)
            .map_err(|e| Failure::EvalInput(e.to_string()))?;
        print!("{}", pretty(&metrics));
        return Ok(());
    }

    let dir = args.runs_dir.as_ref().expect("clap enforces one input");
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Failure::EvalInput(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.join("answer.md").is_file())
        .collect();
    entries.sort();

    let mut runs = Vec::new();
    for entry in &entries {
        let pred = read_table(&entry.join("answer.md"))?;
        let metrics = score_table(&pred, &gold, &options)
            .map_err(|e| Failure::EvalInput(format!("{}: {e}", entry.display())))?;
        runs.push(metrics);
    }
    if runs.is_empty() {
        return Err(Failure::EvalInput(format!(
            "{}: no run subdirectory holds an answer.md",
            dir.display()
        )));
    }
    let report = aggregate(&runs).map_err(|e| Failure::EvalInput(e.to_string()))?;
    print!("{}", pretty(&report));
    Ok(())
}

// -- memory ---------------------------------------------------------------------

fn cmd_memory(action: MemoryAction) -> Result<(), Failure> {
    match action {
        MemoryAction::Inspect { dir } => {
            let store = load_store(&dir)?;
            for record in store.records() {
                let item_f1 = record
                    .utility
                    .metrics()
                    .get("item_f1")
                    .copied()
                    .unwrap_or(0.0);
                println!(
                    "record {} label={} strategy={} batches={} item_f1={:.4} query={:?}",
                    record.id,
                    record.utility.label(),
                    record.decision.strategy.mode(),
                    record.trace_digest.batch_count,
                    item_f1,
                    record.query_text,
                );
            }
        }
        MemoryAction::Hints { dir } => {
            let store = load_store(&dir)?;
            for hint in store.hints() {
                let provenance: Vec<usize> = hint.provenance.iter().copied().collect();
                println!(
                    "hint {} score={} provenance={:?} {}",
                    hint.id, hint.score, provenance, hint.text
                );
            }
        }
        MemoryAction::Distill { dir, config } => {
            let config = load_config(config.as_deref())?;
            let chat = chat_backend(&config)?;
            let mut store = load_store(&dir)?;
            let report = store.distill(chat.as_ref());
            store.save(&dir).map_err(memory_failure)?;
            for warning in &report.warnings {
                log::warn!("{warning}");
            }
            println!(
                "clusters={} added={} edited={} removed={} agreed={} merged={}",
                report.clusters.len(),
                report.hints_added,
                report.hints_edited,
                report.hints_removed,
                report.hints_agreed,
                report.hints_merged,
            );
        }
        MemoryAction::Prune { dir } => {
            let mut store = load_store(&dir)?;
            let removed = store.prune();
            store.save(&dir).map_err(memory_failure)?;
            println!("pruned {removed} hints");
        }
    }
    Ok(())
}

// -- simenv ----------------------------------------------------------------------

fn cmd_simenv(action: SimenvAction) -> Result<(), Failure> {
    match action {
        SimenvAction::Generate { seed, entities, attrs, out } => {
            if entities == 0 {
                return Err(Failure::Usage("--entities must be at least 1".to_string()));
            }
            if attrs == 0 {
                return Err(Failure::Usage("--attrs must be at least 1".to_string()));
            }
            let world_config = WorldConfig { seed, entities, attributes: attrs };
            let world = generate_world(&world_config);
            std::fs::create_dir_all(&out)
                .map_err(|e| Failure::Other(format!("creating {}: {e}", out.display())))?;
            write_file(&out.join("world.json"), &pretty(&world))?;
            write_file(&out.join("gold.md"), &with_final_newline(to_markdown(&world.gold_table())))?;
            write_file(&out.join("gold.json"), &pretty(&world.gold_table()))?;
            let instance = InstanceSpec {
                id: format!("world-{seed}"),
                world: world_config,
                fault_percent: None,
                query: None,
            };
            let line = serde_json::to_string(&instance).expect("instance serializes");
            write_file(&out.join("instance.json"), &with_final_newline(line))?;
            log::info!("wrote world {} to {}", seed, out.display());
        }
        SimenvAction::Bench { seeds, entities, attrs, fault_percent, out } => {
            if entities == 0 {
                return Err(Failure::Usage("--entities must be at least 1".to_string()));
            }
            if attrs == 0 {
                return Err(Failure::Usage("--attrs must be at least 1".to_string()));
            }
            let mut parsed = Vec::new();
            for part in seeds.split(',') {
                let part = part.trim();
                if part.is_empty() {
                    continue;
                }
                let seed: u64 = part
                    .parse()
                    .map_err(|_| Failure::Usage(format!("--seeds: cannot parse {part:?}")))?;
                parsed.push(seed);
            }
            if parsed.is_empty() {
                return Err(Failure::Usage("--seeds holds no seeds".to_string()));
            }
            let mut text = String::new();
            for seed in parsed {
                let instance = InstanceSpec {
                    id: format!("world-{seed}"),
                    world: WorldConfig { seed, entities, attributes: attrs },
                    fault_percent: if fault_percent > 0 { Some(fault_percent) } else { None },
                    query: None,
                };
                let line = serde_json::to_string(&instance).expect("instance serializes");
                writeln!(text, "{line}").expect("string write");
            }
            match out {
                Some(path) => write_file(&path, &text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}
