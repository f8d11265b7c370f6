//! Schema-level linking metrics and execution-result comparison.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_STATEMENT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("gold table set is empty")]
    EmptyGold,
    #[error("no records to aggregate")]
    EmptyInput,
    #[error("gold SQL failed to execute: {0}")]
    GoldExecutionFailed(String),
    #[error("cannot open database {path}: {message}")]
    Database { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemaMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f6: f64,
    pub exact_match: bool,
}

/// Set-form F-beta: `(1+b²)|P∩G| / (b²|G| + |P|)`.
pub fn f_beta_from_counts(intersection: usize, gold: usize, predicted: usize, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * gold as f64 + predicted as f64;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * intersection as f64 / denom
    }
}

/// Rate-form F-beta: `(1+b²)PR / (b²P + R)`, zero when both rates are zero.
pub fn f_beta_from_rates(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

fn lower_set<'a>(items: impl IntoIterator<Item = &'a str>) -> BTreeSet<String> {
    items.into_iter().map(|s| s.trim().to_lowercase()).collect()
}

/// Precision, recall, F1, F6 and exact match of a predicted table set
/// against the gold set. Names compare case-insensitively; an empty
/// prediction scores precision 0.
pub fn schema_metrics<'a, 'b>(
    predicted: impl IntoIterator<Item = &'a str>,
    gold: impl IntoIterator<Item = &'b str>,
) -> Result<SchemaMetrics, MetricsError> {
    let p = lower_set(predicted);
    let g = lower_set(gold);
    if g.is_empty() {
        return Err(MetricsError::EmptyGold);
    }
    let hit = p.intersection(&g).count();
    Ok(SchemaMetrics {
        precision: if p.is_empty() {
            0.0
        } else {
            hit as f64 / p.len() as f64
        },
        recall: hit as f64 / g.len() as f64,
        f1: f_beta_from_counts(hit, g.len(), p.len(), 1.0),
        f6: f_beta_from_counts(hit, g.len(), p.len(), 6.0),
        exact_match: p == g,
    })
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Simple,
    Moderate,
    Challenging,
    #[default]
    Unknown,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Simple => "simple",
            Difficulty::Moderate => "moderate",
            Difficulty::Challenging => "challenging",
            Difficulty::Unknown => "unknown",
        }
    }
}

impl FromStr for Difficulty {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_lowercase().as_str() {
            "simple" => Difficulty::Simple,
            "moderate" => Difficulty::Moderate,
            "challenging" => Difficulty::Challenging,
            _ => Difficulty::Unknown,
        })
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub gold_tables: BTreeSet<String>,
    pub predicted_tables: BTreeSet<String>,
    pub metrics: SchemaMetrics,
    pub difficulty: Difficulty,
}

impl EvalRecord {
    pub fn new(
        question_id: impl Into<String>,
        gold_tables: BTreeSet<String>,
        predicted_tables: BTreeSet<String>,
        difficulty: Difficulty,
    ) -> Result<Self, MetricsError> {
        let metrics = schema_metrics(
            predicted_tables.iter().map(String::as_str),
            gold_tables.iter().map(String::as_str),
        )?;
        Ok(Self {
            question_id: question_id.into(),
            gold_tables,
            predicted_tables,
            metrics,
            difficulty,
        })
    }

    /// Whether the stored metrics equal a fresh recomputation.
    pub fn is_consistent(&self) -> bool {
        schema_metrics(
            self.predicted_tables.iter().map(String::as_str),
            self.gold_tables.iter().map(String::as_str),
        )
        .is_ok_and(|m| m == self.metrics)
    }
}

/// Metric means over a group of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub exact_match_rate: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f6: f64,
    /// F1 and F6 recomputed from the averaged precision and recall.
    pub cross_check_f1: f64,
    pub cross_check_f6: f64,
}

/// Pooled counts over all records: `sum|P∩G| / sum|P|` and `sum|P∩G| / sum|G|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroSummary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f6: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub overall: MetricSummary,
    pub micro: MicroSummary,
    pub by_difficulty: BTreeMap<Difficulty, MetricSummary>,
}

fn summarize(records: &[&EvalRecord]) -> MetricSummary {
    let n = records.len() as f64;
    let mean =
        |f: fn(&SchemaMetrics) -> f64| records.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
    let precision = mean(|m| m.precision);
    let recall = mean(|m| m.recall);
    MetricSummary {
        count: records.len(),
        exact_match_rate: records.iter().filter(|r| r.metrics.exact_match).count() as f64 / n,
        precision,
        recall,
        f1: mean(|m| m.f1),
        f6: mean(|m| m.f6),
        cross_check_f1: f_beta_from_rates(precision, recall, 1.0),
        cross_check_f6: f_beta_from_rates(precision, recall, 6.0),
    }
}

/// Macro-averaged corpus metrics, with a pooled (micro) view and a
/// per-difficulty breakdown.
pub fn aggregate(records: &[EvalRecord]) -> Result<CorpusSummary, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let all: Vec<&EvalRecord> = records.iter().collect();
    let mut groups: BTreeMap<Difficulty, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.difficulty).or_default().push(r);
    }

    let (mut hit, mut pred, mut gold) = (0usize, 0usize, 0usize);
    for r in records {
        let p = lower_set(r.predicted_tables.iter().map(String::as_str));
        let g = lower_set(r.gold_tables.iter().map(String::as_str));
        hit += p.intersection(&g).count();
        pred += p.len();
        gold += g.len();
    }
    let micro = MicroSummary {
        precision: if pred == 0 {
            0.0
        } else {
            hit as f64 / pred as f64
        },
        recall: if gold == 0 {
            0.0
        } else {
            hit as f64 / gold as f64
        },
        f1: f_beta_from_counts(hit, gold, pred, 1.0),
        f6: f_beta_from_counts(hit, gold, pred, 6.0),
    };

    Ok(CorpusSummary {
        overall: summarize(&all),
        micro,
        by_difficulty: groups.iter().map(|(d, rs)| (*d, summarize(rs))).collect(),
    })
}

/// A result cell normalized for comparison. Integral reals compare equal to
/// integers; other reals compare by bit pattern.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Cell {
    Null,
    Int(i64),
    Real(u64),
    Text(String),
    Blob(Vec<u8>),
}

impl Cell {
    fn from_ref(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Cell::Null,
            ValueRef::Integer(i) => Cell::Int(i),
            ValueRef::Real(f) => {
                if f.fract() == 0.0 && f.abs() < 9.0e15 {
                    Cell::Int(f as i64)
                } else {
                    Cell::Real(f.to_bits())
                }
            }
            ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
        }
    }
}

fn run_query(
    conn: &Connection,
    sql: &str,
    timeout: Duration,
) -> Result<HashMap<Vec<Cell>, usize>, String> {
    let deadline = Instant::now() + timeout;
    conn.progress_handler(10_000, Some(move || Instant::now() > deadline))
        .map_err(|e| e.to_string())?;
    let result = (|| {
        let mut stmt = conn.prepare(sql).map_err(|e| e.to_string())?;
        let width = stmt.column_count();
        let mut rows = stmt.query([]).map_err(|e| e.to_string())?;
        let mut counts: HashMap<Vec<Cell>, usize> = HashMap::new();
        while let Some(row) = rows.next().map_err(|e| e.to_string())? {
            let cells = (0..width)
                .map(|i| row.get_ref(i).map(Cell::from_ref))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            *counts.entry(cells).or_default() += 1;
        }
        Ok(counts)
    })();
    let _ = conn.progress_handler(0, None::<fn() -> bool>);
    result.map_err(|e: String| {
        if Instant::now() > deadline {
            format!("timed out after {timeout:?}")
        } else {
            e
        }
    })
}

/// Options for [`execution_match_with`].
#[derive(Debug, Clone, Copy)]
pub struct ExecOptions {
    pub timeout: Duration,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_STATEMENT_TIMEOUT,
        }
    }
}

/// True iff both queries return the same multiset of rows, ignoring order.
/// A failing or timed-out predicted query is a non-match; a failing gold
/// query is an error.
pub fn execution_match(
    predicted_sql: &str,
    gold_sql: &str,
    database: &Path,
) -> Result<bool, MetricsError> {
    execution_match_with(predicted_sql, gold_sql, database, ExecOptions::default())
}

pub fn execution_match_with(
    predicted_sql: &str,
    gold_sql: &str,
    database: &Path,
    options: ExecOptions,
) -> Result<bool, MetricsError> {
    let conn = Connection::open_with_flags(
        database,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(|e| MetricsError::Database {
        path: database.display().to_string(),
        message: e.to_string(),
    })?;
    let gold =
        run_query(&conn, gold_sql, options.timeout).map_err(MetricsError::GoldExecutionFailed)?;
    match run_query(&conn, predicted_sql, options.timeout) {
        Ok(pred) => Ok(pred == gold),
        Err(e) => {
            log::debug!("predicted SQL failed: {e}");
            Ok(false)
        }
    }
}
