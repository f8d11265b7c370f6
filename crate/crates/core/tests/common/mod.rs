#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use schema_linker::llm::{
    Completion, CompletionBackend, CompletionRequest, LlmError, TokenUsage, PATH_SELECT_PROMPT,
    SRC_DST_PROMPT,
};
use schema_linker::{extract_tables, ingest_sqlite};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// Builds `<root>/shop/shop.sqlite` from the DDL fixture and returns `root`.
pub fn build_shop(root: &Path) -> PathBuf {
    let dir = root.join("shop");
    std::fs::create_dir_all(&dir).unwrap();
    let db = dir.join("shop.sqlite");
    if !db.exists() {
        let ddl = std::fs::read_to_string(fixture("shop/schema.sql")).unwrap();
        let conn = rusqlite::Connection::open(&db).unwrap();
        conn.execute_batch(&ddl).unwrap();
    }
    root.to_path_buf()
}

pub fn shop_dataset() -> PathBuf {
    fixture("shop/dataset.json")
}

#[derive(Debug, Clone)]
pub struct Script {
    pub endpoints: String,
    pub sql: String,
    pub gold_tables: BTreeSet<String>,
}

#[derive(Default)]
pub struct CallCounts {
    pub endpoints: AtomicUsize,
    pub path_select: AtomicUsize,
    pub generation: AtomicUsize,
}

/// Answers prompts from the recorded transcript. Path selection picks the
/// option whose tables equal the gold tables, else option 1.
pub struct ScriptedBackend {
    by_question: HashMap<String, Script>,
    pub counts: CallCounts,
    pub path_select_texts: Mutex<Vec<String>>,
}

impl ScriptedBackend {
    pub fn shop(schema_root: &Path) -> Self {
        let schema = ingest_sqlite(&schema_root.join("shop/shop.sqlite"))
            .unwrap()
            .schema;
        let dataset: Vec<serde_json::Value> =
            serde_json::from_str(&std::fs::read_to_string(shop_dataset()).unwrap()).unwrap();
        let transcript: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(fixture("shop/transcript.json")).unwrap(),
        )
        .unwrap();
        let mut by_question = HashMap::new();
        for row in dataset {
            let id = row["question_id"].to_string();
            let entry = &transcript[&id];
            let gold = extract_tables(row["SQL"].as_str().unwrap(), &schema)
                .unwrap()
                .tables;
            by_question.insert(
                row["question"].as_str().unwrap().to_string(),
                Script {
                    endpoints: entry["endpoints"].as_str().unwrap().to_string(),
                    sql: entry["sql"].as_str().unwrap().to_string(),
                    gold_tables: gold,
                },
            );
        }
        Self {
            by_question,
            counts: CallCounts::default(),
            path_select_texts: Mutex::new(Vec::new()),
        }
    }

    fn script(&self, user_text: &str) -> Option<&Script> {
        let q = user_text
            .lines()
            .find_map(|l| l.strip_prefix("Question: "))?;
        self.by_question.get(q.trim())
    }

    pub fn reply(&self, system: &str, user: &str) -> Result<String, String> {
        let script = self
            .script(user)
            .ok_or_else(|| "unknown question".to_string())?;
        if system == SRC_DST_PROMPT.system_text {
            self.counts.endpoints.fetch_add(1, Ordering::SeqCst);
            Ok(script.endpoints.clone())
        } else if system == PATH_SELECT_PROMPT.system_text {
            self.counts.path_select.fetch_add(1, Ordering::SeqCst);
            self.path_select_texts
                .lock()
                .unwrap()
                .push(user.to_string());
            let id = listing_options(user)
                .into_iter()
                .find(|(_, tables)| {
                    tables
                        .iter()
                        .map(|t| t.to_lowercase())
                        .collect::<BTreeSet<_>>()
                        == script.gold_tables
                })
                .map_or(1, |(id, _)| id);
            Ok(format!("Final Answer: path_id: {id}"))
        } else {
            self.counts.generation.fetch_add(1, Ordering::SeqCst);
            Ok(script.sql.clone())
        }
    }
}

impl CompletionBackend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LlmError> {
        let text = self
            .reply(&request.system_text, &request.user_text)
            .map_err(LlmError::Backend)?;
        let usage = TokenUsage {
            input_tokens: (request.system_text.len() + request.user_text.len()) as u64 / 4,
            output_tokens: text.len() as u64 / 4,
        };
        Ok(Completion {
            text,
            usage: Some(usage),
        })
    }
}

/// Parses the candidate listing of a path-selection prompt into (id, tables).
pub fn listing_options(user_text: &str) -> Vec<(usize, Vec<String>)> {
    user_text
        .lines()
        .filter_map(|line| {
            let rest = line.strip_prefix("path_id=")?;
            let (id, body) = rest.split_once(": ")?;
            let tables = if let Some(u) = body.strip_prefix("UNION {") {
                u.trim_end_matches('}')
                    .split(", ")
                    .map(str::to_string)
                    .collect()
            } else {
                let path = body.split(" (").next().unwrap();
                path.split(" -> ").map(str::to_string).collect()
            };
            Some((id.parse().ok()?, tables))
        })
        .collect()
}

/// A minimal OpenAI-compatible chat endpoint on localhost.
pub struct MockServer {
    pub addr: SocketAddr,
    pub requests: Arc<AtomicUsize>,
}

impl MockServer {
    pub fn start(backend: Arc<ScriptedBackend>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let requests = Arc::new(AtomicUsize::new(0));
        let counter = requests.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let backend = backend.clone();
                let counter = counter.clone();
                thread::spawn(move || {
                    let _ = serve(stream, &backend, &counter);
                });
            }
        });
        Self { addr, requests }
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }
}

fn serve(
    stream: TcpStream,
    backend: &ScriptedBackend,
    counter: &AtomicUsize,
) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line)? == 0 {
            return Ok(());
        }
        let mut length = 0usize;
        loop {
            let mut header = String::new();
            reader.read_line(&mut header)?;
            let header = header.trim_end();
            if header.is_empty() {
                break;
            }
            if let Some((k, v)) = header.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    length = v.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0u8; length];
        reader.read_exact(&mut body)?;
        counter.fetch_add(1, Ordering::SeqCst);
        let value: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
        let system = value
            .pointer("/messages/0/content")
            .and_then(|v| v.as_str())
            .unwrap_or("");
        let user = value
            .pointer("/messages/1/content")
            .and_then(|v| v.as_str())
            .unwrap_or("");
        let (status, payload) = match backend.reply(system, user) {
            Ok(text) => (
                "200 OK",
                serde_json::json!({
                    "id": "mock",
                    "object": "chat.completion",
                    "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
                    "usage": {"prompt_tokens": (system.len() + user.len()) / 4, "completion_tokens": text.len() / 4},
                }),
            ),
            Err(e) => ("400 Bad Request", serde_json::json!({"error": e})),
        };
        let payload = payload.to_string();
        write!(
            writer,
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}",
            payload.len()
        )?;
        writer.flush()?;
    }
}

/// A schema whose tables `t0..t{n-1}` are joined by one declared FK per edge.
pub fn schema_from_edges(n: usize, edges: &[(usize, usize)]) -> schema_linker::Schema {
    use schema_linker::schema::{ColumnDef, TableDef};
    use schema_linker::ForeignKeyEdge;
    let mut tables: Vec<TableDef> = (0..n)
        .map(|i| TableDef::new(format!("t{i}"), vec![ColumnDef::new("pk", "INTEGER", true)]))
        .collect();
    let mut fks = Vec::new();
    for &(a, b) in edges {
        let col = format!("ref_{b}_{}", tables[a].columns.len());
        tables[a]
            .columns
            .push(ColumnDef::new(col.clone(), "INTEGER", false));
        fks.push(ForeignKeyEdge::declared(
            format!("t{a}"),
            col,
            format!("t{b}"),
            "pk",
        ));
    }
    schema_linker::Schema::new("synthetic", tables, fks).unwrap()
}

/// Brute force: every simple path from `s` to `d`, keeping the shortest.
pub fn oracle_shortest_paths(
    n: usize,
    edges: &[(usize, usize)],
    s: usize,
    d: usize,
) -> BTreeSet<Vec<String>> {
    let mut adj = vec![BTreeSet::new(); n];
    for &(a, b) in edges {
        if a != b {
            adj[a].insert(b);
            adj[b].insert(a);
        }
    }
    let mut all: Vec<Vec<usize>> = Vec::new();
    let mut path = vec![s];
    fn dfs(adj: &[BTreeSet<usize>], d: usize, path: &mut Vec<usize>, all: &mut Vec<Vec<usize>>) {
        let last = *path.last().unwrap();
        if last == d {
            all.push(path.clone());
            return;
        }
        for &next in &adj[last] {
            if !path.contains(&next) {
                path.push(next);
                dfs(adj, d, path, all);
                path.pop();
            }
        }
    }
    dfs(&adj, d, &mut path, &mut all);
    let min = all.iter().map(Vec::len).min();
    all.into_iter()
        .filter(|p| Some(p.len()) == min)
        .map(|p| p.into_iter().map(|i| format!("t{i}")).collect())
        .collect()
}

/// Edges of a G(n, p) random graph.
pub fn random_edges(rng: &mut impl rand::Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(p) {
                edges.push((a, b));
            }
        }
    }
    edges
}
