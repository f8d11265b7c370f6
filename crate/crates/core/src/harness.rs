//! Batch runs: dataset loading, linking, SQL generation and evaluation reports.
//!
//! Run outputs are append-only JSON lines keyed by `question_id`. A rerun
//! skips questions that already have a successful row, so interrupted runs
//! can be resumed. Reports are derived from run outputs and contain no
//! timestamps or paths, so regenerating them from the same inputs yields
//! identical bytes.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{IdColumnRule, SchemaGraph};
use crate::llm::{
    render_generation_prompt, CompletionBackend, LlmEndpointExtractor, LlmPathSelector,
    MeteredBackend, TokenUsage, DEFAULT_GENERATION_TEMPERATURE, DEFAULT_LINK_TEMPERATURE,
};
use crate::metrics::{
    aggregate, execution_match_with, CorpusSummary, Difficulty, EvalRecord, ExecOptions,
    MetricsError,
};
use crate::pathfinder::{link, LinkResult, ModePreset};
use crate::schema::{ingest_schema_document, ingest_sqlite, Schema, SchemaError};
use crate::sql::{
    extract_generated_sql, extract_tables, render_filtered_schema, render_join_path, render_schema,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("no schemas found under {0} for any dataset row")]
    NoSchemasFound(String),
    #[error("schema error for {db_id}: {source}")]
    Schema {
        db_id: String,
        #[source]
        source: SchemaError,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub db_id: String,
    pub text: String,
    pub evidence: Option<String>,
    pub gold_sql: Option<String>,
    pub difficulty: Difficulty,
}

/// One database: its schema, the (augmented) graph, and the SQLite file if any.
#[derive(Debug, Clone)]
pub struct Database {
    pub schema: Schema,
    pub graph: SchemaGraph,
    pub sqlite_path: Option<PathBuf>,
    pub warnings: Vec<String>,
}

/// Loads `<root>/<db_id>/<db_id>.sqlite`, falling back to `<root>/<db_id>/schema.json`.
pub fn load_database(
    root: &Path,
    db_id: &str,
    rule: IdColumnRule,
) -> Result<Option<Database>, HarnessError> {
    let dir = root.join(db_id);
    let sqlite = dir.join(format!("{db_id}.sqlite"));
    let doc = dir.join("schema.json");
    let schema_err = |source| HarnessError::Schema {
        db_id: db_id.to_string(),
        source,
    };
    let (mut schema, sqlite_path, warnings) = if sqlite.is_file() {
        let ingested = ingest_sqlite(&sqlite).map_err(schema_err)?;
        (ingested.schema, Some(sqlite), ingested.warnings)
    } else if doc.is_file() {
        (
            ingest_schema_document(&doc).map_err(schema_err)?,
            None,
            Vec::new(),
        )
    } else {
        return Ok(None);
    };
    schema.database_id = db_id.to_string();
    let graph = SchemaGraph::build_augmented(&schema, rule);
    Ok(Some(Database {
        schema,
        graph,
        sqlite_path,
        warnings,
    }))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub questions: Vec<Question>,
    pub databases: BTreeMap<String, Database>,
    pub diagnostics: Vec<String>,
}

impl Dataset {
    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.question_id == id)
    }
}

fn field_string(row: &serde_json::Map<String, serde_json::Value>, key: &str) -> Option<String> {
    match row.get(key)? {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Reads a dataset JSON array (`question_id`, `db_id`, `question`, `evidence`,
/// `SQL`, `difficulty`) and the schemas it references. Rows whose database is
/// missing are skipped with a diagnostic. With `require_sql`, a row without
/// `SQL` is a parse error.
pub fn ingest_dataset(
    path: &Path,
    schema_root: &Path,
    require_sql: bool,
    rule: IdColumnRule,
) -> Result<Dataset, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let rows: Vec<serde_json::Value> = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Parse(format!("{}: {e}", path.display())))?;

    let mut questions = Vec::new();
    let mut databases: BTreeMap<String, Database> = BTreeMap::new();
    let mut missing: HashSet<String> = HashSet::new();
    let mut diagnostics = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let obj = row
            .as_object()
            .ok_or_else(|| HarnessError::Parse(format!("row {i} is not an object")))?;
        let required = |key: &str| {
            field_string(obj, key)
                .ok_or_else(|| HarnessError::Parse(format!("row {i}: missing field `{key}`")))
        };
        let question_id = required("question_id")?;
        let db_id = required("db_id")?;
        let text = required("question")?;
        let gold_sql = field_string(obj, "SQL");
        if require_sql && gold_sql.is_none() {
            return Err(HarnessError::Parse(format!(
                "row {i} (question_id {question_id}): missing field `SQL`"
            )));
        }
        let evidence = field_string(obj, "evidence").filter(|e| !e.trim().is_empty());
        let difficulty = field_string(obj, "difficulty")
            .map(|d| d.parse().unwrap_or_default())
            .unwrap_or_default();

        if !databases.contains_key(&db_id) && !missing.contains(&db_id) {
            match load_database(schema_root, &db_id, rule)? {
                Some(db) => {
                    for w in &db.warnings {
                        diagnostics.push(format!("{db_id}: {w}"));
                    }
                    databases.insert(db_id.clone(), db);
                }
                None => {
                    missing.insert(db_id.clone());
                }
            }
        }
        if missing.contains(&db_id) {
            diagnostics.push(format!(
                "row {i} (question_id {question_id}): no schema for database '{db_id}'; skipped"
            ));
            continue;
        }
        questions.push(Question {
            question_id,
            db_id,
            text,
            evidence,
            gold_sql,
            difficulty,
        });
    }
    if questions.is_empty() && !rows.is_empty() {
        return Err(HarnessError::NoSchemasFound(
            schema_root.display().to_string(),
        ));
    }
    Ok(Dataset {
        questions,
        databases,
        diagnostics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStage {
    LinkOnly,
    LinkAndGenerate,
    Evaluate,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: ModePreset,
    pub linker_model: String,
    pub generator_model: Option<String>,
    pub link_temperature: f64,
    pub generation_temperature: f64,
    pub cache_path: Option<PathBuf>,
    pub run_stage: RunStage,
    pub workers: usize,
    /// Extra endpoint-extraction attempts after an unparseable reply.
    pub endpoint_retries: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: ModePreset::Mode7,
            linker_model: "google/gemini-2.5-flash-preview".to_string(),
            generator_model: None,
            link_temperature: DEFAULT_LINK_TEMPERATURE,
            generation_temperature: DEFAULT_GENERATION_TEMPERATURE,
            cache_path: None,
            run_stage: RunStage::LinkOnly,
            workers: 4,
            endpoint_retries: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self, prior_output: Option<&Path>) -> Result<(), HarnessError> {
        match self.run_stage {
            RunStage::Evaluate if !prior_output.is_some_and(Path::is_file) => Err(
                HarnessError::Config("evaluation requires the output file of a prior run".into()),
            ),
            RunStage::LinkAndGenerate if self.generator_model.is_none() => Err(
                HarnessError::Config("generation requires a generator model".into()),
            ),
            _ if self.workers == 0 => {
                Err(HarnessError::Config("workers must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GenerationStatus {
    Ok,
    GenerationFailed,
}

/// One line of a run output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub question_id: String,
    pub db_id: String,
    /// `mode1`..`mode7`, or `baseline` for full-schema generation.
    pub mode: String,
    pub question: String,
    #[serde(default)]
    pub evidence: Option<String>,
    #[serde(default)]
    pub predicted_tables: Option<BTreeSet<String>>,
    #[serde(default)]
    pub link: Option<LinkResult>,
    #[serde(default)]
    pub linked_schema: Option<String>,
    #[serde(default)]
    pub join_path: Option<String>,
    #[serde(default)]
    pub link_calls: usize,
    #[serde(default)]
    pub link_usage: Option<TokenUsage>,
    #[serde(default)]
    pub generation_status: Option<GenerationStatus>,
    #[serde(default)]
    pub predicted_sql: Option<String>,
    #[serde(default)]
    pub generation_reply: Option<String>,
    #[serde(default)]
    pub generation_usage: Option<TokenUsage>,
    #[serde(default)]
    pub error: Option<String>,
}

impl RunRow {
    fn new(
        question_id: &str,
        db_id: &str,
        mode: &str,
        question: &str,
        evidence: Option<&str>,
    ) -> Self {
        Self {
            question_id: question_id.to_string(),
            db_id: db_id.to_string(),
            mode: mode.to_string(),
            question: question.to_string(),
            evidence: evidence.map(str::to_string),
            predicted_tables: None,
            link: None,
            linked_schema: None,
            join_path: None,
            link_calls: 0,
            link_usage: None,
            generation_status: None,
            predicted_sql: None,
            generation_reply: None,
            generation_usage: None,
            error: None,
        }
    }

    pub fn is_failed(&self) -> bool {
        self.error.is_some() || self.generation_status == Some(GenerationStatus::GenerationFailed)
    }
}

/// Reads a run file, keeping the last row per question in first-seen order.
/// An unparseable final line (an interrupted write) is ignored.
pub fn read_run_rows(path: &Path) -> Result<Vec<RunRow>, HarnessError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let lines: Vec<String> = reader
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io_err(path))?;
    let mut order: Vec<String> = Vec::new();
    let mut latest: HashMap<String, RunRow> = HashMap::new();
    let last_index = lines.iter().rposition(|l| !l.trim().is_empty());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunRow>(line) {
            Ok(row) => {
                if !latest.contains_key(&row.question_id) {
                    order.push(row.question_id.clone());
                }
                latest.insert(row.question_id.clone(), row);
            }
            Err(e) if Some(i) == last_index => {
                log::warn!("{}: ignoring truncated final line: {e}", path.display());
            }
            Err(e) => {
                return Err(HarnessError::Parse(format!(
                    "{} line {}: {e}",
                    path.display(),
                    i + 1
                )));
            }
        }
    }
    Ok(order
        .into_iter()
        .filter_map(|id| latest.remove(&id))
        .collect())
}

struct RowWriter {
    file: File,
    path: PathBuf,
}

impl RowWriter {
    fn open(path: &Path) -> Result<Self, HarnessError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    fn write(&mut self, row: &RunRow) -> Result<(), HarnessError> {
        let line = serde_json::to_string(row).expect("run row serializes");
        writeln!(self.file, "{line}").map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunStats {
    pub total: usize,
    pub skipped: usize,
    pub processed: usize,
    pub failed: usize,
}

/// Processes `items` on a pool of `workers` threads, writing results in input
/// order through a single writer.
fn process_in_order<T: Sync>(
    items: &[T],
    workers: usize,
    out: &mut RowWriter,
    stats: &mut RunStats,
    work: impl Fn(&T) -> RunRow + Sync,
) -> Result<(), HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    for chunk in items.chunks(workers.max(1)) {
        let rows: Vec<RunRow> = pool.install(|| chunk.par_iter().map(&work).collect());
        for row in rows {
            stats.processed += 1;
            if row.is_failed() {
                stats.failed += 1;
            }
            out.write(&row)?;
        }
    }
    Ok(())
}

/// Links one question; errors are recorded in the row rather than returned.
pub fn link_question(
    question: &Question,
    db: &Database,
    config: &RunConfig,
    backend: &dyn CompletionBackend,
) -> RunRow {
    let mut row = RunRow::new(
        &question.question_id,
        &question.db_id,
        config.mode.name(),
        &question.text,
        question.evidence.as_deref(),
    );
    let metered = MeteredBackend::new(backend);
    let extractor = LlmEndpointExtractor {
        backend: &metered,
        model: config.linker_model.clone(),
        temperature: config.link_temperature,
        retries: config.endpoint_retries,
    };
    let selector = LlmPathSelector {
        backend: &metered,
        model: config.linker_model.clone(),
        temperature: config.link_temperature,
    };
    let result = link(
        &question.text,
        question.evidence.as_deref(),
        &db.schema,
        &db.graph,
        &config.mode.config(),
        &extractor,
        &selector,
    );
    row.link_calls = metered.calls();
    row.link_usage = metered.usage();
    match result {
        Ok(result) => {
            match render_filtered_schema(
                &db.schema,
                &result.chosen_tables,
                &result.induced_fk_edges,
            ) {
                Ok(text) => row.linked_schema = Some(text),
                Err(e) => row.error = Some(e.to_string()),
            }
            row.join_path = Some(render_join_path(&result));
            row.predicted_tables = Some(result.chosen_tables.clone());
            row.link = Some(result);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Links every question not already linked successfully in `out`.
pub fn run_linking(
    dataset: &Dataset,
    config: &RunConfig,
    backend: &dyn CompletionBackend,
    out: &Path,
) -> Result<RunStats, HarnessError> {
    let done: HashSet<String> = read_run_rows(out)?
        .into_iter()
        .filter(|r| r.error.is_none())
        .map(|r| r.question_id)
        .collect();
    let pending: Vec<&Question> = dataset
        .questions
        .iter()
        .filter(|q| !done.contains(&q.question_id))
        .collect();
    let mut stats = RunStats {
        total: dataset.questions.len(),
        skipped: dataset.questions.len() - pending.len(),
        ..RunStats::default()
    };
    let mut writer = RowWriter::open(out)?;
    process_in_order(&pending, config.workers, &mut writer, &mut stats, |q| {
        let db = &dataset.databases[&q.db_id];
        link_question(q, db, config, backend)
    })?;
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    pub model: String,
    pub temperature: f64,
    pub workers: usize,
    /// Full schemas by database id; when set, the baseline prompt is used
    /// with the complete schema instead of the linked sub-schema.
    pub baseline_schemas: Option<BTreeMap<String, Schema>>,
}

impl GenerationConfig {
    pub fn linked(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            temperature: DEFAULT_GENERATION_TEMPERATURE,
            workers: 4,
            baseline_schemas: None,
        }
    }
}

fn generate_row(
    row: &RunRow,
    config: &GenerationConfig,
    backend: &dyn CompletionBackend,
) -> RunRow {
    let mut out = row.clone();
    out.generation_reply = None;
    out.generation_usage = None;
    out.predicted_sql = None;
    let request = match &config.baseline_schemas {
        Some(schemas) => {
            out.mode = "baseline".to_string();
            out.error = None;
            let Some(schema) = schemas.get(&row.db_id) else {
                out.generation_status = Some(GenerationStatus::GenerationFailed);
                out.error = Some(format!("no schema for database '{}'", row.db_id));
                return out;
            };
            out.predicted_tables = Some(schema.tables().iter().map(|t| t.name.clone()).collect());
            render_generation_prompt(
                &row.question,
                row.evidence.as_deref(),
                &render_schema(schema),
                None,
                &config.model,
                config.temperature,
            )
        }
        None => {
            if row.error.is_some() {
                out.generation_status = Some(GenerationStatus::GenerationFailed);
                return out;
            }
            let (Some(schema_text), Some(join_path)) = (&row.linked_schema, &row.join_path) else {
                out.generation_status = Some(GenerationStatus::GenerationFailed);
                out.error = Some("link row has no linked schema".into());
                return out;
            };
            render_generation_prompt(
                &row.question,
                row.evidence.as_deref(),
                schema_text,
                Some(join_path),
                &config.model,
                config.temperature,
            )
        }
    };
    let request = match request {
        Ok(r) => r,
        Err(e) => {
            out.generation_status = Some(GenerationStatus::GenerationFailed);
            out.error = Some(e.to_string());
            return out;
        }
    };
    match backend.complete(&request) {
        Ok(c) => {
            out.generation_usage = c.usage;
            out.predicted_sql = extract_generated_sql(&c.text);
            out.generation_status = Some(if out.predicted_sql.is_some() {
                GenerationStatus::Ok
            } else {
                GenerationStatus::GenerationFailed
            });
            out.generation_reply = Some(c.text);
        }
        Err(e) => {
            out.generation_status = Some(GenerationStatus::GenerationFailed);
            out.error = Some(e.to_string());
        }
    }
    out
}

/// Generates SQL for every row of a link output not already generated in `out`.
pub fn run_generation(
    link_output: &Path,
    config: &GenerationConfig,
    backend: &dyn CompletionBackend,
    out: &Path,
) -> Result<RunStats, HarnessError> {
    if !link_output.is_file() {
        return Err(HarnessError::Config(format!(
            "link output {} not found",
            link_output.display()
        )));
    }
    let inputs = read_run_rows(link_output)?;
    let done: HashSet<String> = read_run_rows(out)?
        .into_iter()
        .filter(|r| r.generation_status == Some(GenerationStatus::Ok))
        .map(|r| r.question_id)
        .collect();
    let pending: Vec<&RunRow> = inputs
        .iter()
        .filter(|r| !done.contains(&r.question_id))
        .collect();
    let mut stats = RunStats {
        total: inputs.len(),
        skipped: inputs.len() - pending.len(),
        ..RunStats::default()
    };
    let mut writer = RowWriter::open(out)?;
    process_in_order(&pending, config.workers, &mut writer, &mut stats, |row| {
        generate_row(row, config, backend)
    })?;
    Ok(stats)
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub exec: bool,
    pub exec_options: ExecOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            exec: true,
            exec_options: ExecOptions::default(),
        }
    }
}

/// Per-question report line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuestionOutcome {
    pub question_id: String,
    pub db_id: String,
    pub difficulty: Difficulty,
    pub record: Option<EvalRecord>,
    pub exec_match: Option<bool>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecGroup {
    pub evaluated: usize,
    pub matched: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionSummary {
    pub overall: ExecGroup,
    pub by_difficulty: BTreeMap<Difficulty, ExecGroup>,
    pub gold_execution_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub questions: usize,
    pub evaluated: usize,
    pub missing_rows: Vec<String>,
    pub extraction_failed: Vec<String>,
    pub failed_rows: Vec<String>,
    pub schema: Option<CorpusSummary>,
    pub execution: Option<ExecutionSummary>,
    pub diagnostics: Vec<String>,
    #[serde(skip)]
    pub outcomes: Vec<QuestionOutcome>,
}

fn exec_group<'a>(items: impl Iterator<Item = &'a bool>) -> ExecGroup {
    let (mut evaluated, mut matched) = (0, 0);
    for &m in items {
        evaluated += 1;
        matched += m as usize;
    }
    ExecGroup {
        evaluated,
        matched,
        accuracy: if evaluated == 0 {
            0.0
        } else {
            matched as f64 / evaluated as f64
        },
    }
}

/// Scores a run output against the dataset's gold SQL.
pub fn evaluate_run(
    run_output: &Path,
    dataset: &Dataset,
    options: &EvalOptions,
) -> Result<EvaluationReport, HarnessError> {
    let rows: HashMap<String, RunRow> = read_run_rows(run_output)?
        .into_iter()
        .map(|r| (r.question_id.clone(), r))
        .collect();
    let outcomes: Vec<(QuestionOutcome, Option<String>, bool)> = dataset
        .questions
        .par_iter()
        .map(|q| {
            let mut outcome = QuestionOutcome {
                question_id: q.question_id.clone(),
                db_id: q.db_id.clone(),
                difficulty: q.difficulty,
                record: None,
                exec_match: None,
                note: None,
            };
            let Some(row) = rows.get(&q.question_id) else {
                outcome.note = Some("missing from run output".into());
                return (outcome, None, false);
            };
            let db = &dataset.databases[&q.db_id];
            let Some(gold_sql) = q.gold_sql.as_deref() else {
                outcome.note = Some("no gold SQL".into());
                return (outcome, None, true);
            };
            let predicted = row.predicted_tables.clone().unwrap_or_default();
            match extract_tables(gold_sql, &db.schema) {
                Ok(refs) if !refs.tables.is_empty() => {
                    outcome.record = EvalRecord::new(
                        q.question_id.clone(),
                        refs.tables,
                        predicted,
                        q.difficulty,
                    )
                    .ok();
                }
                Ok(refs) => {
                    outcome.note = Some(format!(
                        "EXTRACTION_FAILED: no schema table among {:?}",
                        refs.unresolved
                    ));
                }
                Err(e) => outcome.note = Some(format!("EXTRACTION_FAILED: {e}")),
            }
            let mut diagnostic = None;
            if options.exec && row.generation_status.is_some() {
                match (&row.predicted_sql, &db.sqlite_path) {
                    (_, None) => {
                        diagnostic =
                            Some(format!("{}: no SQLite file for execution", q.question_id))
                    }
                    (None, Some(_)) => outcome.exec_match = Some(false),
                    (Some(sql), Some(path)) => {
                        match execution_match_with(sql, gold_sql, path, options.exec_options) {
                            Ok(m) => outcome.exec_match = Some(m),
                            Err(MetricsError::GoldExecutionFailed(e)) => {
                                diagnostic =
                                    Some(format!("{}: GOLD_EXECUTION_FAILED: {e}", q.question_id));
                            }
                            Err(e) => diagnostic = Some(format!("{}: {e}", q.question_id)),
                        }
                    }
                }
            }
            (outcome, diagnostic, true)
        })
        .collect();

    let mut report = EvaluationReport {
        questions: dataset.questions.len(),
        evaluated: 0,
        missing_rows: Vec::new(),
        extraction_failed: Vec::new(),
        failed_rows: Vec::new(),
        schema: None,
        execution: None,
        diagnostics: dataset.diagnostics.clone(),
        outcomes: Vec::new(),
    };
    let mut gold_failed = 0;
    for (outcome, diagnostic, present) in outcomes {
        if !present {
            report.missing_rows.push(outcome.question_id.clone());
        } else if outcome.record.is_none() {
            report.extraction_failed.push(outcome.question_id.clone());
        } else {
            report.evaluated += 1;
        }
        if rows
            .get(&outcome.question_id)
            .is_some_and(RunRow::is_failed)
        {
            report.failed_rows.push(outcome.question_id.clone());
        }
        if let Some(d) = diagnostic {
            if d.contains("GOLD_EXECUTION_FAILED") {
                gold_failed += 1;
            }
            report.diagnostics.push(d);
        }
        report.outcomes.push(outcome);
    }
    let records: Vec<EvalRecord> = report
        .outcomes
        .iter()
        .filter_map(|o| o.record.clone())
        .collect();
    report.schema = aggregate(&records).ok();

    let exec: Vec<(Difficulty, bool)> = report
        .outcomes
        .iter()
        .filter_map(|o| o.exec_match.map(|m| (o.difficulty, m)))
        .collect();
    if !exec.is_empty() || gold_failed > 0 {
        let mut groups: BTreeMap<Difficulty, Vec<bool>> = BTreeMap::new();
        for (d, m) in &exec {
            groups.entry(*d).or_default().push(*m);
        }
        report.execution = Some(ExecutionSummary {
            overall: exec_group(exec.iter().map(|(_, m)| m)),
            by_difficulty: groups
                .iter()
                .map(|(d, v)| (*d, exec_group(v.iter())))
                .collect(),
            gold_execution_failed: gold_failed,
        });
    }
    Ok(report)
}

fn join_tables(tables: &BTreeSet<String>) -> String {
    tables
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(";")
}

/// Writes `summary.json` and `per_question.csv` into `dir`.
pub fn write_report(report: &EvaluationReport, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let summary_path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(&summary_path, json + "\n").map_err(io_err(&summary_path))?;

    let csv_path = dir.join("per_question.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record([
        "question_id",
        "db_id",
        "difficulty",
        "gold_tables",
        "predicted_tables",
        "precision",
        "recall",
        "f1",
        "f6",
        "exact_match",
        "exec_match",
    ])?;
    let fmt = |v: f64| format!("{v:.4}");
    for o in &report.outcomes {
        let exec = o.exec_match.map(|m| m.to_string()).unwrap_or_default();
        match &o.record {
            Some(r) => w.write_record([
                o.question_id.as_str(),
                &o.db_id,
                o.difficulty.as_str(),
                &join_tables(&r.gold_tables),
                &join_tables(&r.predicted_tables),
                &fmt(r.metrics.precision),
                &fmt(r.metrics.recall),
                &fmt(r.metrics.f1),
                &fmt(r.metrics.f6),
                &r.metrics.exact_match.to_string(),
                &exec,
            ])?,
            None => w.write_record([
                o.question_id.as_str(),
                &o.db_id,
                o.difficulty.as_str(),
                "",
                "",
                "",
                "",
                "",
                "",
                "",
                &exec,
            ])?,
        }
    }
    w.flush().map_err(io_err(&csv_path))?;
    Ok(())
}

/// Evaluates a run and writes the report files.
pub fn run_evaluation(
    run_output: &Path,
    dataset: &Dataset,
    options: &EvalOptions,
    report_dir: &Path,
) -> Result<EvaluationReport, HarnessError> {
    let report = evaluate_run(run_output, dataset, options)?;
    write_report(&report, report_dir)?;
    Ok(report)
}

/// One row of the mode comparison grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: ModePreset,
    pub label: &'static str,
    pub summary: Option<CorpusSummary>,
    pub failed_rows: usize,
}

/// Links the dataset under each mode into `<out_dir>/<mode>.jsonl`, scores
/// each at schema level, and writes `sweep.csv` / `sweep.json`.
pub fn run_sweep(
    dataset: &Dataset,
    base: &RunConfig,
    modes: &[ModePreset],
    backend: &dyn CompletionBackend,
    out_dir: &Path,
) -> Result<Vec<SweepRow>, HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut grid = Vec::new();
    for &mode in modes {
        let config = RunConfig {
            mode,
            ..base.clone()
        };
        let run_path = out_dir.join(format!("{}.jsonl", mode.name()));
        run_linking(dataset, &config, backend, &run_path)?;
        let report = run_evaluation(
            &run_path,
            dataset,
            &EvalOptions {
                exec: false,
                ..EvalOptions::default()
            },
            &out_dir.join(mode.name()),
        )?;
        grid.push(SweepRow {
            mode,
            label: mode.label(),
            summary: report.schema,
            failed_rows: report.failed_rows.len(),
        });
    }

    let json_path = out_dir.join("sweep.json");
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&grid).expect("grid serializes") + "\n",
    )
    .map_err(io_err(&json_path))?;
    let mut w = csv::Writer::from_path(out_dir.join("sweep.csv"))?;
    w.write_record(["mode", "label", "emr", "precision", "recall", "f1", "f6"])?;
    for row in &grid {
        let cells: Vec<String> = match &row.summary {
            Some(s) => [
                s.overall.exact_match_rate,
                s.overall.precision,
                s.overall.recall,
                s.overall.f1,
                s.overall.f6,
            ]
            .iter()
            .map(|v| format!("{:.2}", v * 100.0))
            .collect(),
            None => vec![String::new(); 5],
        };
        let mut record = vec![row.mode.name().to_string(), row.label.to_string()];
        record.extend(cells);
        w.write_record(&record)?;
    }
    w.flush().map_err(io_err(out_dir))?;
    Ok(grid)
}
