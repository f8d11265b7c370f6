use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use schema_linker::harness::{
    ingest_dataset, load_database, run_evaluation, run_generation, run_linking, run_sweep,
    EvalOptions, GenerationConfig, RunConfig, RunStage, RunStats,
};
use schema_linker::llm::{
    CompletionBackend, HttpBackend, ReplayCache, DEFAULT_GENERATION_TEMPERATURE,
};
use schema_linker::{IdColumnRule, ModePreset};

/// Schema linking and evaluation for text-to-SQL datasets.
#[derive(Parser)]
#[command(name = "schema-linker", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Link every dataset question to a set of tables.
    Link(LinkArgs),
    /// Generate SQL from a link output.
    Generate(GenerateArgs),
    /// Score a run output against gold SQL.
    Evaluate(EvaluateArgs),
    /// Link under several modes and compare schema-level metrics.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct BackendArgs {
    /// JSONL completion cache.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Serve completions from the cache only; a novel request is an error.
    #[arg(long, conflicts_with = "record", requires = "cache")]
    replay: bool,
    /// Forward cache misses to the endpoint and append them to the cache.
    #[arg(long, requires = "cache")]
    record: bool,
    /// Concurrent requests allowed against the endpoint.
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

#[derive(Args)]
struct DatasetArgs {
    /// Dataset JSON array.
    #[arg(long)]
    dataset: PathBuf,
    /// Directory containing `<db_id>/<db_id>.sqlite` or `<db_id>/schema.json`.
    #[arg(long)]
    schemas: PathBuf,
    /// Treat any column whose name contains "id" as an id column.
    #[arg(long)]
    substring_id_rule: bool,
}

impl DatasetArgs {
    fn rule(&self) -> IdColumnRule {
        if self.substring_id_rule {
            IdColumnRule::Substring
        } else {
            IdColumnRule::TokenBoundary
        }
    }
}

#[derive(Args)]
struct LinkArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// mode1..mode7, or a label such as force-union.
    #[arg(long, default_value = "mode7")]
    mode: ModePreset,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "google/gemini-2.5-flash-preview")]
    model: String,
    #[arg(long, default_value_t = schema_linker::llm::DEFAULT_LINK_TEMPERATURE)]
    temperature: f64,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct GenerateArgs {
    /// Link output to generate from.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = DEFAULT_GENERATION_TEMPERATURE)]
    temperature: f64,
    /// Use the full schema instead of the linked sub-schema.
    #[arg(long, requires = "schemas")]
    baseline: bool,
    /// Schema directory, needed for --baseline.
    #[arg(long)]
    schemas: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run output to score.
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    data: DatasetArgs,
    /// Compare execution results of predicted and gold SQL.
    #[arg(long, overrides_with = "no_exec")]
    exec: bool,
    #[arg(long)]
    no_exec: bool,
    #[arg(long)]
    report_dir: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Comma-separated modes, or `all`.
    #[arg(long, default_value = "all")]
    modes: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "google/gemini-2.5-flash-preview")]
    model: String,
    #[command(flatten)]
    backend: BackendArgs,
}

fn make_backend(args: &BackendArgs) -> Result<Box<dyn CompletionBackend>> {
    let http = || -> Result<HttpBackend> {
        Ok(HttpBackend::from_env()
            .context("configuring the completion endpoint")?
            .with_inflight_limit(args.workers.max(1)))
    };
    Ok(match &args.cache {
        Some(path) if args.record => Box::new(ReplayCache::record(path, Box::new(http()?))?),
        Some(path) => Box::new(ReplayCache::replay(path)?),
        None => Box::new(http()?),
    })
}

fn parse_modes(spec: &str) -> Result<Vec<ModePreset>> {
    if spec.trim().eq_ignore_ascii_case("all") {
        return Ok(ModePreset::ALL.to_vec());
    }
    spec.split(',')
        .map(|m| {
            m.trim()
                .parse::<ModePreset>()
                .map_err(|e| anyhow::anyhow!("{e}"))
        })
        .collect()
}

fn report_stats(what: &str, stats: &RunStats) -> ExitCode {
    println!(
        "{what}: {} questions, {} already done, {} processed, {} failed",
        stats.total, stats.skipped, stats.processed, stats.failed
    );
    if stats.failed > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

fn load(data: &DatasetArgs, require_sql: bool) -> Result<schema_linker::harness::Dataset> {
    let dataset = ingest_dataset(&data.dataset, &data.schemas, require_sql, data.rule())?;
    for d in &dataset.diagnostics {
        log::warn!("{d}");
    }
    Ok(dataset)
}

fn cmd_link(args: LinkArgs) -> Result<ExitCode> {
    let dataset = load(&args.data, false)?;
    let config = RunConfig {
        mode: args.mode,
        linker_model: args.model,
        link_temperature: args.temperature,
        cache_path: args.backend.cache.clone(),
        run_stage: RunStage::LinkOnly,
        workers: args.backend.workers,
        ..RunConfig::default()
    };
    config.validate(None)?;
    let backend = make_backend(&args.backend)?;
    let stats = run_linking(&dataset, &config, backend.as_ref(), &args.out)?;
    Ok(report_stats("link", &stats))
}

fn baseline_schemas(root: &Path, input: &Path) -> Result<BTreeMap<String, schema_linker::Schema>> {
    let mut schemas = BTreeMap::new();
    for row in schema_linker::harness::read_run_rows(input)? {
        if schemas.contains_key(&row.db_id) {
            continue;
        }
        match load_database(root, &row.db_id, IdColumnRule::default())? {
            Some(db) => {
                schemas.insert(row.db_id.clone(), db.schema);
            }
            None => log::warn!("no schema for database '{}'", row.db_id),
        }
    }
    if schemas.is_empty() {
        bail!("no schemas found under {}", root.display());
    }
    Ok(schemas)
}

fn cmd_generate(args: GenerateArgs) -> Result<ExitCode> {
    let mut config = GenerationConfig::linked(args.model);
    config.temperature = args.temperature;
    config.workers = args.backend.workers.max(1);
    if args.baseline {
        let root = args.schemas.as_deref().expect("clap enforces --schemas");
        config.baseline_schemas = Some(baseline_schemas(root, &args.input)?);
    }
    let backend = make_backend(&args.backend)?;
    let stats = run_generation(&args.input, &config, backend.as_ref(), &args.out)?;
    Ok(report_stats("generate", &stats))
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let dataset = load(&args.data, true)?;
    let options = EvalOptions {
        exec: !args.no_exec,
        ..EvalOptions::default()
    };
    let report = run_evaluation(&args.input, &dataset, &options, &args.report_dir)?;
    if let Some(s) = &report.schema {
        let o = &s.overall;
        println!(
            "schema: n={} EMR={} P={} R={} F1={} F6={}",
            o.count,
            pct(o.exact_match_rate),
            pct(o.precision),
            pct(o.recall),
            pct(o.f1),
            pct(o.f6)
        );
    }
    if let Some(e) = &report.execution {
        println!(
            "execution: {}/{} = {}",
            e.overall.matched,
            e.overall.evaluated,
            pct(e.overall.accuracy)
        );
    }
    if !report.extraction_failed.is_empty() {
        println!(
            "gold extraction failed: {}",
            report.extraction_failed.join(", ")
        );
    }
    if !report.missing_rows.is_empty() {
        println!(
            "missing from run output: {}",
            report.missing_rows.join(", ")
        );
    }
    println!("report written to {}", args.report_dir.display());
    let partial = !report.extraction_failed.is_empty() || !report.missing_rows.is_empty();
    Ok(if partial {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode> {
    let dataset = load(&args.data, true)?;
    let modes = parse_modes(&args.modes)?;
    let base = RunConfig {
        linker_model: args.model,
        workers: args.backend.workers,
        ..RunConfig::default()
    };
    let backend = make_backend(&args.backend)?;
    let grid = run_sweep(&dataset, &base, &modes, backend.as_ref(), &args.out_dir)?;
    println!(
        "{:<7} {:<14} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "mode", "label", "EMR", "P", "R", "F1", "F6"
    );
    let mut failures = 0;
    for row in &grid {
        failures += row.failed_rows;
        match &row.summary {
            Some(s) => {
                let o = &s.overall;
                println!(
                    "{:<7} {:<14} {:>7} {:>7} {:>7} {:>7} {:>7}",
                    row.mode.name(),
                    row.label,
                    pct(o.exact_match_rate),
                    pct(o.precision),
                    pct(o.recall),
                    pct(o.f1),
                    pct(o.f6)
                );
            }
            None => println!(
                "{:<7} {:<14} (no scored questions)",
                row.mode.name(),
                row.label
            ),
        }
    }
    Ok(if failures > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Link(a) => cmd_link(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
