//! Deterministic simulated research environment. A seeded world of entities
//! and attributes backs a search/crawl tool environment, a scripted solver
//! that answers from the facts (with configurable failures and omissions),
//! and a scripted planner. Everything is a pure function of the seed, so
//! end-to-end runs are reproducible and cheap.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::{fnv1a_64, BackendError, BatchSolver, Planner, PlanError};
use crate::executor::{SolverRequest, ToolEnvironment, ToolSpec};
use crate::types::{
    fold_text, BatchStrategy, Decision, Query, ResultTable, Schema, TaskMatrix, Template,
};
use crate::memory::ExperientialPrior;

/// The grouping attribute draws from this pool, so a world with at least
/// twice this many entities always batches into groups at least half the
/// size of the entity count.
pub const SECTORS: &[&str] = &["energy", "retail", "transport", "finance", "health", "media"];

const NAME_FIRST: &[&str] = &[
    "Aldor", "Bex", "Cinder", "Dal", "Ever", "Fenn", "Gale", "Harrow", "Iris", "Juno", "Koda",
    "Lumen", "Mira", "Nock", "Orel", "Pavo", "Quill", "Rime", "Sable", "Tarn", "Umber", "Vesta",
    "Wren", "Yarrow",
];
const NAME_SECOND: &[&str] = &[
    "Works", "Labs", "Group", "Forge", "Systems", "Holdings", "Lines", "Guild", "Union", "Yards",
    "Mills", "Partners", "Collective", "Depot", "Foundry", "Exchange",
];
const CITIES: &[&str] = &[
    "Arlen", "Brindle", "Corvane", "Dunmore", "Eastvale", "Farrow", "Gilden", "Hollis", "Ives",
    "Jarrah", "Kestrel Bay", "Larkspur",
];
const GIVEN: &[&str] = &[
    "Ada", "Bram", "Cleo", "Dorian", "Edith", "Felix", "Greta", "Hugo", "Ines", "Jasper",
];
const SURNAME: &[&str] = &[
    "Abern", "Blackwood", "Crane", "Delacroix", "Ellery", "Fontaine", "Granger", "Hale",
];
const PRODUCTS: &[&str] = &[
    "turbine", "ledger", "carriage", "lens", "tonic", "relay", "loom", "beacon", "press", "valve",
];
const FILLER: &[&str] = &[
    "quarterly", "regional", "archive", "founded", "notable", "operations", "report", "district",
    "charter", "annual", "survey", "review",
];

/// Attribute slots in order; the first is always the low-cardinality sector.
const ATTR_NAMES: &[&str] = &["sector", "founded", "city", "lead", "product"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    /// Values aligned with the world's attribute names.
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub attribute_names: Vec<String>,
    pub entities: Vec<Entity>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub entities: usize,
    pub attributes: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig { seed: 7, entities: 20, attributes: 4 }
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.random_range(0..pool.len())]
}

/// Generate a world. Identical configs yield identical worlds.
pub fn generate_world(config: &WorldConfig) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_attrs = config.attributes.max(1);
    let attribute_names: Vec<String> = (0..n_attrs)
        .map(|i| {
            ATTR_NAMES
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("field{i}"))
        })
        .collect();

    let mut names: BTreeSet<String> = BTreeSet::new();
    let mut entities = Vec::new();
    while entities.len() < config.entities.max(1) {
        let name = format!("{} {}", pick(&mut rng, NAME_FIRST), pick(&mut rng, NAME_SECOND));
        let name = if names.contains(&name) {
            format!("{} {}", name, entities.len())
        } else {
            name
        };
        if !names.insert(name.clone()) {
            continue;
        }
        let values: Vec<String> = attribute_names
            .iter()
            .map(|attr| match attr.as_str() {
                "sector" => pick(&mut rng, SECTORS).to_string(),
                "founded" => rng.random_range(1900..2024).to_string(),
                "city" => pick(&mut rng, CITIES).to_string(),
                "lead" => format!("{} {}", pick(&mut rng, GIVEN), pick(&mut rng, SURNAME)),
                "product" => pick(&mut rng, PRODUCTS).to_string(),
                _ => format!("{}-{}", pick(&mut rng, FILLER), rng.random_range(100..1000)),
            })
            .collect();
        entities.push(Entity { name, values });
    }
    World { seed: config.seed, attribute_names, entities }
}

impl World {
    /// Output columns for this world's task: the entity plus every attribute.
    pub fn schema_columns(&self) -> Vec<String> {
        let mut cols = vec!["entity".to_string()];
        cols.extend(self.attribute_names.iter().cloned());
        cols
    }

    pub fn schema(&self) -> Schema {
        Schema::new(self.schema_columns(), Some(vec!["entity".to_string()]))
            .expect("world schema is valid")
    }

    /// The wide-search query this world poses.
    pub fn query(&self) -> Query {
        let text = format!(
            "For each of the {} listed organizations, report {}.",
            self.entities.len(),
            self.attribute_names.join(", ")
        );
        Query::new(text, self.schema()).expect("world query is valid")
    }

    /// The reference answer table.
    pub fn gold_table(&self) -> ResultTable {
        let rows = self
            .entities
            .iter()
            .map(|e| {
                let mut row = vec![e.name.clone()];
                row.extend(e.values.iter().cloned());
                row
            })
            .collect();
        ResultTable::new(self.schema_columns(), rows).expect("gold rows are rectangular")
    }

    pub fn entity_by_name(&self, name: &str) -> Option<&Entity> {
        let want = fold_text(name);
        self.entities.iter().find(|e| fold_text(&e.name) == want)
    }

    fn attribute_value(&self, entity: &Entity, column: &str) -> Option<String> {
        let want = fold_text(column);
        if want == "entity" {
            return Some(entity.name.clone());
        }
        self.attribute_names
            .iter()
            .position(|a| fold_text(a) == want)
            .map(|i| entity.values[i].clone())
    }
}

fn page_url(name: &str) -> String {
    let slug: String = fold_text(name)
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { '-' })
        .collect();
    format!("sim://org/{slug}")
}

fn page_text(world: &World, e: &Entity, rng: &mut ChaCha8Rng) -> String {
    let mut facts = vec![format!("ENTITY {}", e.name)];
    for (attr, value) in world.attribute_names.iter().zip(&e.values) {
        facts.push(format!("{attr}: {value}"));
    }
    let filler = format!(
        "The {} {} for {} mentions the {} {}.",
        pick(rng, FILLER),
        pick(rng, FILLER),
        e.name,
        pick(rng, FILLER),
        pick(rng, PRODUCTS),
    );
    format!("{}\n{}", facts.join(" | "), filler)
}

/// Tool environment over a world: `search` ranks pages by token overlap,
/// `crawl` fetches one page. A seeded slice of crawls fails with a transport
/// error so retry paths get exercised.
pub struct SimEnv {
    world: Arc<World>,
    pages: BTreeMap<String, String>,
    tokens: BTreeMap<String, BTreeSet<String>>,
    fault_percent: u64,
    calls: Mutex<Vec<(String, Value)>>,
}

fn tokenize(text: &str) -> BTreeSet<String> {
    fold_text(text)
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

impl SimEnv {
    pub fn new(world: Arc<World>) -> Self {
        Self::with_fault_percent(world, 0)
    }

    /// `fault_percent` of urls (chosen by a seeded hash, stable per world)
    /// fail to crawl.
    pub fn with_fault_percent(world: Arc<World>, fault_percent: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(world.seed ^ 0x5157);
        let mut pages = BTreeMap::new();
        for e in &world.entities {
            pages.insert(page_url(&e.name), page_text(&world, e, &mut rng));
        }
        for i in 0..3 {
            let text = format!(
                "{} {} {} {}",
                pick(&mut rng, FILLER),
                pick(&mut rng, FILLER),
                pick(&mut rng, FILLER),
                pick(&mut rng, FILLER),
            );
            pages.insert(format!("sim://note/{i}"), text);
        }
        let tokens = pages
            .iter()
            .map(|(url, text)| (url.clone(), tokenize(text)))
            .collect();
        SimEnv { world, pages, tokens, fault_percent, calls: Mutex::new(Vec::new()) }
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    /// Tool invocations seen so far, in call order.
    pub fn calls(&self) -> Vec<(String, Value)> {
        self.calls.lock().expect("call log").clone()
    }

    fn search(&self, query: &str) -> String {
        let q = tokenize(query);
        let mut scored: Vec<(usize, &String)> = self
            .tokens
            .iter()
            .map(|(url, toks)| (q.intersection(toks).count(), url))
            .filter(|(s, _)| *s > 0)
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
        if scored.is_empty() {
            return "no results".to_string();
        }
        scored
            .iter()
            .take(5)
            .map(|(_, url)| {
                let text = &self.pages[*url];
                let head: String = text.chars().take(90).collect();
                format!("{url} | {head}")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn crawl(&self, url: &str) -> Result<String, BackendError> {
        if self.fault_percent > 0 && fnv1a_64(self.world.seed, url.as_bytes()) % 100 < self.fault_percent {
            return Err(BackendError::Transport(format!("simulated fetch failure for {url}")));
        }
        Ok(self
            .pages
            .get(url)
            .cloned()
            .unwrap_or_else(|| format!("no page found at {url}")))
    }
}

impl ToolEnvironment for SimEnv {
    fn tools(&self) -> Vec<ToolSpec> {
        vec![
            ToolSpec {
                name: "search".into(),
                description: "rank pages by keyword match; arguments: {\"query\": \"words\"}".into(),
            },
            ToolSpec {
                name: "crawl".into(),
                description: "fetch one page by url; arguments: {\"url\": \"sim://...\"}".into(),
            },
        ]
    }

    fn call(&self, name: &str, arguments: &Value) -> Result<String, BackendError> {
        self.calls
            .lock()
            .expect("call log")
            .push((name.to_string(), arguments.clone()));
        match name {
            "search" => {
                let q = arguments
                    .get("query")
                    .and_then(Value::as_str)
                    .unwrap_or_default();
                Ok(self.search(q))
            }
            "crawl" => {
                let url = arguments.get("url").and_then(Value::as_str).unwrap_or_default();
                self.crawl(url)
            }
            other => Ok(format!("unknown tool {other}")),
        }
    }
}

// ---------------------------------------------------------------------------
// Scripted solver

/// Answers batches straight from the world's facts. Failure attempts and
/// withheld columns are configurable so executor retries and reduce-stage
/// patching can be driven deterministically.
pub struct ScriptedSolver {
    world: Arc<World>,
    /// Per-attempt switch: `true` at index i means attempt i+1 for any batch
    /// returns garbage.
    failure_schedule: Vec<bool>,
    /// Columns withheld until the batch rationale marks a delta-patch pass.
    omit_columns: Vec<String>,
    attempts: Mutex<HashMap<usize, u32>>,
}

impl ScriptedSolver {
    pub fn new(world: Arc<World>) -> Self {
        ScriptedSolver {
            world,
            failure_schedule: Vec::new(),
            omit_columns: Vec::new(),
            attempts: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_failure_schedule(mut self, schedule: Vec<bool>) -> Self {
        self.failure_schedule = schedule;
        self
    }

    pub fn with_omitted_columns(mut self, columns: Vec<String>) -> Self {
        self.omit_columns = columns;
        self
    }

    /// Attempts seen per batch id.
    pub fn attempt_counts(&self) -> HashMap<usize, u32> {
        self.attempts.lock().expect("attempt counts").clone()
    }

    /// Total solver calls.
    pub fn total_calls(&self) -> u32 {
        self.attempts.lock().expect("attempt counts").values().sum()
    }
}

impl BatchSolver for ScriptedSolver {
    fn solve_batch(&self, request: &SolverRequest) -> Result<String, BackendError> {
        let attempt = {
            let mut counts = self.attempts.lock().expect("attempt counts");
            let n = counts.entry(request.batch.id).or_insert(0);
            *n += 1;
            *n
        };
        if self
            .failure_schedule
            .get((attempt - 1) as usize)
            .copied()
            .unwrap_or(false)
        {
            return Ok(format!(
                "static interference, attempt {attempt} of batch {} produced nothing",
                request.batch.id
            ));
        }

        let manifest = &request.batch.manifest;
        let is_patch = manifest.rationale.contains("delta-patch");
        let entity_col = manifest
            .matrix_columns
            .iter()
            .position(|c| fold_text(c) == "entity")
            .unwrap_or(0);

        let mut lines = Vec::new();
        for row in &manifest.matrix_rows {
            let entity = self.world.entity_by_name(&row[entity_col]);
            let mut obj = serde_json::Map::new();
            for col in &request.schema_columns {
                let withheld = !is_patch
                    && self
                        .omit_columns
                        .iter()
                        .any(|o| fold_text(o) == fold_text(col));
                if withheld {
                    continue;
                }
                let value = match &entity {
                    Some(e) => self
                        .world
                        .attribute_value(e, col)
                        .unwrap_or_default(),
                    None => {
                        if fold_text(col) == "entity" {
                            row[entity_col].clone()
                        } else {
                            String::new()
                        }
                    }
                };
                obj.insert(col.clone(), Value::String(value));
            }
            lines.push(serde_json::to_string(&Value::Object(obj)).expect("row serializes"));
        }
        Ok(lines.join("\n"))
    }
}

// ---------------------------------------------------------------------------
// Scripted coach

/// Deterministic stand-in for the chat backend the memory layer talks to.
/// Guidance requests echo the hints back (so whatever the hints recommend
/// reaches the planner verbatim), critique requests always propose the
/// grouping lesson this environment is built to teach, and merge requests
/// keep the first lines.
pub struct SimCoach;

/// The lesson the coach distills; names `by_attr` and the sector column so
/// [`ScriptedPlanner`] acts on it.
pub const COACH_LESSON: &str = "use by_attr on the sector column so entities sharing a sector are answered in one call";

impl crate::backends::ChatBackend for SimCoach {
    fn chat(&self, request: &crate::backends::ChatRequest) -> Result<String, BackendError> {
        use crate::memory::{CONTRAST_PROMPT, GUIDANCE_PROMPT, MERGE_PROMPT, SUCCESS_PROMPT};
        let system = request.system.as_str();
        let user = request
            .messages
            .last()
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        if system == GUIDANCE_PROMPT {
            let hints = user
                .split("Hints:")
                .nth(1)
                .unwrap_or_default()
                .trim()
                .to_string();
            return Ok(hints);
        }
        if system == CONTRAST_PROMPT || system == SUCCESS_PROMPT {
            let hints_block = user.split("Current hints:").nth(1).unwrap_or_default();
            if hints_block.contains("by_attr") {
                return Ok("AGREE 1".to_string());
            }
            return Ok(format!("ADD: {COACH_LESSON}"));
        }
        if system == MERGE_PROMPT {
            let kept: Vec<&str> = user
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .take(crate::memory::MAX_HINTS_PER_CLUSTER)
                .collect();
            return Ok(kept.join("\n"));
        }
        Ok(String::new())
    }

    fn name(&self) -> &str {
        "sim-coach"
    }
}

// ---------------------------------------------------------------------------
// Scripted planner

/// Plans from the world directly. The default plan is deliberately wasteful
/// (one task per batch); guidance that names `by_attr` and a matrix column
/// switches it to grouped batching on that column.
pub struct ScriptedPlanner {
    pub world: Arc<World>,
}

impl ScriptedPlanner {
    pub fn new(world: Arc<World>) -> Self {
        ScriptedPlanner { world }
    }

    fn matrix(&self) -> TaskMatrix {
        let sector_col = self
            .world
            .attribute_names
            .iter()
            .position(|a| a == "sector");
        let mut columns = vec!["entity".to_string()];
        if sector_col.is_some() {
            columns.push("sector".to_string());
        }
        let rows = self
            .world
            .entities
            .iter()
            .map(|e| {
                let mut row = vec![e.name.clone()];
                if let Some(si) = sector_col {
                    row.push(e.values[si].clone());
                }
                row
            })
            .collect();
        TaskMatrix::new(columns, rows).expect("world matrix is valid")
    }
}

impl Planner for ScriptedPlanner {
    fn plan(
        &self,
        query: &Query,
        _observations: &[String],
        prior: Option<&ExperientialPrior>,
    ) -> Result<Decision, PlanError> {
        let matrix = self.matrix();
        let template = Template::new(format!(
            "Report {} for the organization __0__.",
            query.schema.columns.join(", ")
        ))
        .map_err(|e| PlanError::Unparseable(e.to_string()))?;

        let mut strategy = BatchStrategy::per_atom("one task per call");
        if let Some(p) = prior {
            let guidance = fold_text(&p.guidance);
            if guidance.contains("by_attr") {
                if let Some(idx) = matrix
                    .columns
                    .iter()
                    .position(|c| guidance.contains(&fold_text(c)) && fold_text(c) != "entity")
                {
                    strategy = BatchStrategy::by_attr(
                        vec![idx],
                        vec![matrix.columns[idx].clone()],
                        "guidance suggested grouping by a shared attribute",
                    )
                    .map_err(|e| PlanError::Unparseable(e.to_string()))?;
                }
            }
        }

        Decision::new(matrix, template, strategy, 1, query.schema.clone())
            .map_err(|e| PlanError::Unparseable(e.to_string()))
    }
}
