//! Prompt rendering, reply parsing and completion backends with a
//! record/replay cache.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex, OnceLock, RwLock};
use std::thread;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pathfinder::{EndpointOracle, PathSelector, SelectionRequest, SelectorError};
use crate::schema::Schema;
use crate::sql::render_schema;

pub const DEFAULT_LINK_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_GENERATION_TEMPERATURE: f64 = 0.3;
pub const API_URL_ENV: &str = "SCHEMA_LINKER_API_URL";
pub const API_KEY_ENV: &str = "SCHEMA_LINKER_API_KEY";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("backend error: {0}")]
    Backend(String),
    #[error("cache miss: no recorded reply for request {0}")]
    CacheMiss(String),
    #[error("cache file {path} line {line}: {message}")]
    CacheCorrupt {
        path: String,
        line: usize,
        message: String,
    },
    #[error("cache io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("placeholder {{{0}}} left unbound")]
    UnboundPlaceholder(String),
    #[error("missing configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplyError {
    #[error("no parseable answer in reply")]
    NoParse,
    #[error("no known table left after filtering")]
    EmptyAfterFiltering,
    #[error("path id {id} outside 1..={max}")]
    OutOfRange { id: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PromptId {
    SrcDst,
    PathSelect,
    SqlGenLinked,
    SqlGenBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: PromptId,
    pub system_text: &'static str,
}

pub const SRC_DST_PROMPT: PromptTemplate = PromptTemplate {
    id: PromptId::SrcDst,
    system_text: "ROLE & OBJECTIVE
You are a senior data engineer who analyses SQL schemas and maps user questions precisely to source tables (filtering) and destination tables (final result columns).

TASK
Identify:
- Source table(s) (src): contain columns used in filters/conditions.
- Destination table(s) (dst): contain columns returned in the answer.

INSTRUCTIONS
1. Internally inspect every table to determine
   - which tables participate in filtering, and
   - which tables supply the requested output columns.
   Briefly justify your choice internally but do not include that justification in the final answer.
2. Output exactly one line in the following format:
   src=TableA,TableB, dst=TableC,TableD",
};

pub const PATH_SELECT_PROMPT: PromptTemplate = PromptTemplate {
    id: PromptId::PathSelect,
    system_text: "ROLE & OBJECTIVE
You are a database expert tasked with selecting the optimal join path to answer user questions using a provided SQL schema.

TASK
Choose the single most appropriate join path from a list of candidates that correctly connects the relevant tables.

INSTRUCTIONS
1. Internally inspect each path to determine:
   - whether it connects all necessary tables,
   - whether joins are complete and valid,
   - and whether it satisfies the intent of the question.
   Briefly justify your decision internally but do not include any reasoning in the final output.
2. Output one line in the following format:
   Final Answer: path_id: <ID>",
};

pub const SQL_GEN_LINKED_PROMPT: PromptTemplate = PromptTemplate {
    id: PromptId::SqlGenLinked,
    system_text: "ROLE & OBJECTIVE
You are an expert in SQLite query generation. Your task is to generate a valid query to answer a user question based on the given schema and join path.

INPUTS
- Schema: {schema}
- Join Path: {join_path_string}
- Question Context: {evidence_string}

INSTRUCTIONS
1. Use the provided schema and join path to construct a valid SQLite query.
2. Ensure the query correctly answers the user's question.
3. Format the query clearly and confirm it adheres to SQLite syntax.",
};

pub const SQL_GEN_BASELINE_PROMPT: PromptTemplate = PromptTemplate {
    id: PromptId::SqlGenBaseline,
    system_text: "ROLE & OBJECTIVE
You are an expert in SQLite query generation. Your task is to produce a valid query that answers a user's question using the provided schema.

INPUTS
- Schema: {schema}
- Question Context: {evidence_string}

INSTRUCTIONS
1. Generate a correct SQLite query that answers the user question.
2. Ensure the query is syntactically valid and aligns with the schema.
3. Format the query clearly and cleanly.",
};

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").unwrap())
}

impl PromptTemplate {
    pub fn placeholders(&self) -> Vec<&'static str> {
        placeholder_re()
            .captures_iter(self.system_text)
            .map(|c| c.get(1).unwrap().as_str())
            .collect()
    }

    /// Substitutes `{name}` placeholders in one pass; bound values are not rescanned.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, LlmError> {
        let mut out = String::with_capacity(self.system_text.len());
        let mut last = 0;
        for cap in placeholder_re().captures_iter(self.system_text) {
            let whole = cap.get(0).unwrap();
            let name = cap.get(1).unwrap().as_str();
            let value = bindings
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| LlmError::UnboundPlaceholder(name.to_string()))?;
            out.push_str(&self.system_text[last..whole.start()]);
            out.push_str(value);
            last = whole.end();
        }
        out.push_str(&self.system_text[last..]);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_name: String,
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
}

impl CompletionRequest {
    /// Stable hex SHA-256 over model, system text, user text and temperature,
    /// with CRLF normalized to LF.
    pub fn digest(&self) -> String {
        let normalize = |s: &str| s.replace("\r\n", "\n");
        let canonical = serde_json::to_string(&(
            &self.model_name,
            normalize(&self.system_text),
            normalize(&self.user_text),
            self.temperature,
        ))
        .expect("tuple serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

fn non_empty(evidence: Option<&str>) -> Option<&str> {
    evidence.map(str::trim).filter(|e| !e.is_empty())
}

pub fn render_src_dst_prompt(
    question: &str,
    schema: &Schema,
    evidence: Option<&str>,
    model_name: &str,
    temperature: f64,
) -> CompletionRequest {
    let mut user = format!(
        "Schema:\n{}\n\nQuestion: {}\n",
        render_schema(schema),
        question.trim()
    );
    if let Some(e) = non_empty(evidence) {
        user.push_str(&format!("Evidence: {e}\n"));
    }
    CompletionRequest {
        model_name: model_name.to_string(),
        system_text: SRC_DST_PROMPT.system_text.to_string(),
        user_text: user,
        temperature,
    }
}

pub fn render_path_select_prompt(
    question: &str,
    evidence: Option<&str>,
    listing: &str,
    model_name: &str,
    temperature: f64,
) -> CompletionRequest {
    let mut user = format!("Question: {}\n", question.trim());
    if let Some(e) = non_empty(evidence) {
        user.push_str(&format!("Evidence: {e}\n"));
    }
    user.push_str("\nCandidate join paths:\n");
    user.push_str(listing);
    CompletionRequest {
        model_name: model_name.to_string(),
        system_text: PATH_SELECT_PROMPT.system_text.to_string(),
        user_text: user,
        temperature,
    }
}

/// SQL generation request. `join_path` selects the linked template; `None`
/// renders the baseline template.
pub fn render_generation_prompt(
    question: &str,
    evidence: Option<&str>,
    schema_text: &str,
    join_path: Option<&str>,
    model_name: &str,
    temperature: f64,
) -> Result<CompletionRequest, LlmError> {
    let evidence = non_empty(evidence).unwrap_or("None");
    let schema_value = format!("\n{schema_text}\n");
    let system_text = match join_path {
        Some(jp) => SQL_GEN_LINKED_PROMPT.render(&[
            ("schema", &schema_value),
            ("join_path_string", jp),
            ("evidence_string", evidence),
        ])?,
        None => SQL_GEN_BASELINE_PROMPT
            .render(&[("schema", &schema_value), ("evidence_string", evidence)])?,
    };
    Ok(CompletionRequest {
        model_name: model_name.to_string(),
        system_text,
        user_text: format!("Question: {}\n", question.trim()),
        temperature,
    })
}

/// Rough token count (4 characters per token) for prompt-size diagnostics.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// Source and destination tables extracted for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointExtraction {
    pub sources: Vec<String>,
    pub destinations: Vec<String>,
    pub raw_reply: String,
    pub warnings: Vec<String>,
    /// Set when parsing failed and every table was used as both source and destination.
    pub degraded: bool,
}

/// Renders endpoint lists in the reply format the extraction prompt asks for.
pub fn format_src_dst(sources: &[String], destinations: &[String]) -> String {
    format!("src={}, dst={}", sources.join(","), destinations.join(","))
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(src|dst)\s*=").unwrap())
}

/// Marker kind, marker start and value start for each `src=`/`dst=` on a line.
fn markers(line: &str) -> Vec<(bool, usize, usize)> {
    marker_re()
        .captures_iter(line)
        .map(|c| {
            let m = c.get(0).unwrap();
            (c[1].eq_ignore_ascii_case("src"), m.start(), m.end())
        })
        .collect()
}

fn value_after(line: &str, marks: &[(bool, usize, usize)], is_src: bool) -> Option<String> {
    let pos = marks.iter().rposition(|m| m.0 == is_src)?;
    let start = marks[pos].2;
    let end = marks.get(pos + 1).map_or(line.len(), |m| m.1);
    Some(line[start..end].to_string())
}

fn split_names(list: &str) -> Vec<String> {
    const STRIP: &[char] = &[
        '"', '\'', '`', '[', ']', '*', '.', ';', ' ', '\t', '(', ')', '{', '}',
    ];
    list.split(',')
        .map(|n| n.trim_matches(STRIP).to_string())
        .filter(|n| !n.is_empty())
        .collect()
}

/// Parses a `src=...`, `dst=...` reply against the schema.
///
/// The last line carrying both markers wins; a `src=` line directly followed
/// (or preceded) by a `dst=` line also counts. Names resolve ignoring case,
/// duplicates are dropped keeping first occurrence, and unknown names are
/// dropped with a warning.
pub fn parse_src_dst_reply(reply: &str, schema: &Schema) -> Result<EndpointExtraction, ReplyError> {
    let lines: Vec<&str> = reply.lines().collect();
    let mut found: Option<(String, String)> = None;
    for (i, line) in lines.iter().enumerate() {
        let marks = markers(line);
        let src = value_after(line, &marks, true);
        let dst = value_after(line, &marks, false);
        match (src, dst) {
            (Some(s), Some(d)) => found = Some((s, d)),
            (Some(s), None) => {
                if let Some(next) = lines.get(i + 1) {
                    if let Some(d) = value_after(next, &markers(next), false) {
                        found = Some((s, d));
                    }
                }
            }
            (None, Some(d)) => {
                if let Some(next) = lines.get(i + 1) {
                    let nm = markers(next);
                    if value_after(next, &nm, false).is_none() {
                        if let Some(s) = value_after(next, &nm, true) {
                            found = Some((s, d));
                        }
                    }
                }
            }
            (None, None) => {}
        }
    }
    let (src_text, dst_text) = found.ok_or(ReplyError::NoParse)?;

    let mut warnings = Vec::new();
    let mut resolve = |text: &str, role: &str| -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for name in split_names(text) {
            match schema.resolve_table(&name) {
                Some(canonical) => {
                    if seen.insert(canonical.to_lowercase()) {
                        out.push(canonical.to_string());
                    }
                }
                None => warnings.push(format!(
                    "{role} table '{name}' is not in the schema; dropped"
                )),
            }
        }
        out
    };
    let sources = resolve(&src_text, "src");
    let destinations = resolve(&dst_text, "dst");
    if sources.is_empty() || destinations.is_empty() {
        return Err(ReplyError::EmptyAfterFiltering);
    }
    Ok(EndpointExtraction {
        sources,
        destinations,
        raw_reply: reply.to_string(),
        warnings,
        degraded: false,
    })
}

fn path_id_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)path\\?_id\s*[:=]\s*\**\s*<?\s*(\d+)").unwrap())
}

/// Extracts the id after the last `path_id:` marker; it must lie in `1..=max_id`.
pub fn parse_path_select_reply(reply: &str, max_id: usize) -> Result<usize, ReplyError> {
    let cap = path_id_re()
        .captures_iter(reply)
        .last()
        .ok_or(ReplyError::NoParse)?;
    let id: usize = cap[1].parse().map_err(|_| ReplyError::NoParse)?;
    if id == 0 || id > max_id {
        return Err(ReplyError::OutOfRange { id, max: max_id });
    }
    Ok(id)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Option<TokenUsage>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: None,
        }
    }
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LlmError>;
}

impl<T: CompletionBackend + ?Sized> CompletionBackend for &T {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LlmError> {
        (**self).complete(request)
    }
}

impl<T: CompletionBackend + ?Sized> CompletionBackend for Box<T> {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LlmError> {
        (**self).complete(request)
    }
}

pub fn complete(
    request: &CompletionRequest,
    client: &dyn CompletionBackend,
) -> Result<Completion, LlmError> {
    client.complete(request)
}

struct InflightLimiter {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

impl InflightLimiter {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InflightGuard<'_> {
        let mut n = self.current.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        InflightGuard(self)
    }
}

struct InflightGuard<'a>(&'a InflightLimiter);

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        *self.0.current.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// OpenAI-compatible chat-completions client.
pub struct HttpBackend {
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    max_attempts: usize,
    base_backoff: Duration,
    limiter: InflightLimiter,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>, api_key: Option<String>) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(180))
            .build()
            .map_err(|e| LlmError::Backend(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            api_key,
            client,
            max_attempts: 3,
            base_backoff: Duration::from_millis(500),
            limiter: InflightLimiter::new(8),
        })
    }

    /// Reads the endpoint from `SCHEMA_LINKER_API_URL` and the key from `SCHEMA_LINKER_API_KEY`.
    pub fn from_env() -> Result<Self, LlmError> {
        let url = std::env::var(API_URL_ENV)
            .map_err(|_| LlmError::Config(format!("{API_URL_ENV} is not set")))?;
        Self::new(
            url,
            std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        )
    }

    pub fn with_inflight_limit(mut self, limit: usize) -> Self {
        self.limiter = InflightLimiter::new(limit);
        self
    }

    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.base_backoff = base;
        self
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<Completion, (bool, String)> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let retry = status.is_server_error() || status.as_u16() == 429;
            let text = resp.text().unwrap_or_default();
            return Err((retry, format!("HTTP {status}: {text}")));
        }
        let value: serde_json::Value = resp
            .json()
            .map_err(|e| (true, format!("bad response body: {e}")))?;
        parse_chat_response(&value).map_err(|e| (false, e))
    }
}

/// Pulls the first choice's message content and token usage out of an
/// OpenAI-style response body.
pub fn parse_chat_response(value: &serde_json::Value) -> Result<Completion, String> {
    let text = value
        .pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .ok_or_else(|| "response has no choices[0].message.content".to_string())?;
    let usage = value.get("usage").and_then(|u| {
        Some(TokenUsage {
            input_tokens: u.get("prompt_tokens")?.as_u64()?,
            output_tokens: u.get("completion_tokens")?.as_u64()?,
        })
    });
    Ok(Completion {
        text: text.to_string(),
        usage,
    })
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LlmError> {
        let body = serde_json::json!({
            "model": request.model_name,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
        });
        let _slot = self.limiter.acquire();
        let mut last = String::new();
        for attempt in 0..self.max_attempts {
            if attempt > 0 {
                thread::sleep(self.base_backoff * 2u32.pow(attempt as u32 - 1));
            }
            match self.attempt(&body) {
                Ok(c) => return Ok(c),
                Err((retry, msg)) => {
                    log::warn!("completion attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                    if !retry {
                        break;
                    }
                }
            }
        }
        Err(LlmError::Backend(last))
    }
}

/// One line of the replay cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub digest: String,
    pub model: String,
    pub temperature: f64,
    pub system: String,
    pub user: String,
    pub reply: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheMode {
    /// Serve only from the cache; a miss is an error.
    Replay,
    /// Serve from the cache, forward misses to the backend and append them.
    Record,
}

/// JSON-lines transcript cache keyed by request digest.
pub struct ReplayCache {
    path: PathBuf,
    mode: CacheMode,
    entries: RwLock<HashMap<String, CacheRecord>>,
    writer: Mutex<Option<File>>,
    backend: Option<Box<dyn CompletionBackend>>,
    backend_calls: AtomicUsize,
}

impl ReplayCache {
    pub fn replay(path: impl Into<PathBuf>) -> Result<Self, LlmError> {
        Self::open(path.into(), CacheMode::Replay, None)
    }

    pub fn record(
        path: impl Into<PathBuf>,
        backend: Box<dyn CompletionBackend>,
    ) -> Result<Self, LlmError> {
        Self::open(path.into(), CacheMode::Record, Some(backend))
    }

    fn open(
        path: PathBuf,
        mode: CacheMode,
        backend: Option<Box<dyn CompletionBackend>>,
    ) -> Result<Self, LlmError> {
        let entries = if path.exists() {
            load_cache(&path)?
        } else if mode == CacheMode::Replay {
            return Err(LlmError::Config(format!(
                "replay cache {} does not exist",
                path.display()
            )));
        } else {
            HashMap::new()
        };
        Ok(Self {
            path,
            mode,
            entries: RwLock::new(entries),
            writer: Mutex::new(None),
            backend,
            backend_calls: AtomicUsize::new(0),
        })
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of requests forwarded to the backend since opening.
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn records(&self) -> Vec<CacheRecord> {
        let mut v: Vec<CacheRecord> = self.entries.read().unwrap().values().cloned().collect();
        v.sort_by(|a, b| a.digest.cmp(&b.digest));
        v
    }

    fn append(&self, record: CacheRecord) -> Result<String, LlmError> {
        let mut writer = self.writer.lock().unwrap();
        if let Some(existing) = self.entries.read().unwrap().get(&record.digest) {
            return Ok(existing.reply.clone());
        }
        if writer.is_none() {
            if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            *writer = Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&self.path)?,
            );
        }
        let file = writer.as_mut().unwrap();
        let line = serde_json::to_string(&record).expect("cache record serializes");
        writeln!(file, "{line}")?;
        file.flush()?;
        let reply = record.reply.clone();
        self.entries
            .write()
            .unwrap()
            .insert(record.digest.clone(), record);
        Ok(reply)
    }
}

pub fn load_cache(path: &Path) -> Result<HashMap<String, CacheRecord>, LlmError> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CacheRecord =
            serde_json::from_str(&line).map_err(|e| LlmError::CacheCorrupt {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        entries.entry(record.digest.clone()).or_insert(record);
    }
    Ok(entries)
}

impl CompletionBackend for ReplayCache {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LlmError> {
        let digest = request.digest();
        if let Some(hit) = self.entries.read().unwrap().get(&digest) {
            return Ok(Completion::text(hit.reply.clone()));
        }
        let backend = match (self.mode, &self.backend) {
            (CacheMode::Record, Some(b)) => b,
            _ => return Err(LlmError::CacheMiss(digest)),
        };
        self.backend_calls.fetch_add(1, Ordering::SeqCst);
        let completion = backend.complete(request)?;
        let reply = self.append(CacheRecord {
            digest,
            model: request.model_name.clone(),
            temperature: request.temperature,
            system: request.system_text.clone(),
            user: request.user_text.clone(),
            reply: completion.text,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        })?;
        Ok(Completion {
            text: reply,
            usage: completion.usage,
        })
    }
}

/// Counts calls and sums token usage flowing through a backend.
pub struct MeteredBackend<'a> {
    inner: &'a dyn CompletionBackend,
    calls: AtomicUsize,
    usage: Mutex<Option<TokenUsage>>,
}

impl<'a> MeteredBackend<'a> {
    pub fn new(inner: &'a dyn CompletionBackend) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            usage: Mutex::new(None),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn usage(&self) -> Option<TokenUsage> {
        *self.usage.lock().unwrap()
    }
}

impl CompletionBackend for MeteredBackend<'_> {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let c = self.inner.complete(request)?;
        if let Some(u) = c.usage {
            let mut total = self.usage.lock().unwrap();
            let t = total.get_or_insert_with(TokenUsage::default);
            t.input_tokens += u.input_tokens;
            t.output_tokens += u.output_tokens;
        }
        Ok(c)
    }
}

const RETRY_NUDGE: &str =
    "\nYour previous reply could not be parsed. Reply with exactly one line: src=<tables>, dst=<tables>\n";

/// Endpoint extraction through the completion backend.
///
/// Unparseable replies are retried (with a format reminder appended to the
/// user text) up to `retries` times; after that every schema table becomes both
/// a source and a destination and the extraction is flagged as degraded.
pub struct LlmEndpointExtractor<'a> {
    pub backend: &'a dyn CompletionBackend,
    pub model: String,
    pub temperature: f64,
    pub retries: usize,
}

impl<'a> LlmEndpointExtractor<'a> {
    pub fn new(backend: &'a dyn CompletionBackend, model: impl Into<String>) -> Self {
        Self {
            backend,
            model: model.into(),
            temperature: DEFAULT_LINK_TEMPERATURE,
            retries: 1,
        }
    }
}

impl EndpointOracle for LlmEndpointExtractor<'_> {
    fn extract(
        &self,
        question: &str,
        evidence: Option<&str>,
        schema: &Schema,
    ) -> Result<EndpointExtraction, LlmError> {
        let mut request =
            render_src_dst_prompt(question, schema, evidence, &self.model, self.temperature);
        let mut failures = Vec::new();
        let mut last_reply = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                request.user_text.push_str(RETRY_NUDGE);
            }
            let reply = self.backend.complete(&request)?.text;
            match parse_src_dst_reply(&reply, schema) {
                Ok(mut ex) => {
                    ex.warnings.splice(0..0, failures);
                    return Ok(ex);
                }
                Err(e) => {
                    failures.push(format!(
                        "endpoint reply attempt {} unusable: {e}",
                        attempt + 1
                    ));
                    last_reply = reply;
                }
            }
        }
        let all: Vec<String> = schema.tables().iter().map(|t| t.name.clone()).collect();
        failures.push("falling back to all tables as sources and destinations".to_string());
        Ok(EndpointExtraction {
            sources: all.clone(),
            destinations: all,
            raw_reply: last_reply,
            warnings: failures,
            degraded: true,
        })
    }
}

/// Path selection through the completion backend.
pub struct LlmPathSelector<'a> {
    pub backend: &'a dyn CompletionBackend,
    pub model: String,
    pub temperature: f64,
}

impl<'a> LlmPathSelector<'a> {
    pub fn new(backend: &'a dyn CompletionBackend, model: impl Into<String>) -> Self {
        Self {
            backend,
            model: model.into(),
            temperature: DEFAULT_LINK_TEMPERATURE,
        }
    }
}

impl PathSelector for LlmPathSelector<'_> {
    fn select(&self, request: &SelectionRequest<'_>) -> Result<usize, SelectorError> {
        let req = render_path_select_prompt(
            request.question,
            request.evidence,
            &request.listing,
            &self.model,
            self.temperature,
        );
        let reply = self.backend.complete(&req)?.text;
        parse_path_select_reply(&reply, request.options.len())
            .map_err(|e| SelectorError::InvalidReply(e.to_string()))
    }
}
