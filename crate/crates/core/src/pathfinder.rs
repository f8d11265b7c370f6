//! Shortest join-path enumeration, candidate construction and path selection.
//!
//! Given source tables (used in filters) and destination tables (holding the
//! requested output), every shortest simple path between each source and
//! destination in the [`SchemaGraph`] becomes a candidate. The chosen table
//! set is then either the union of all candidates, the longest candidate, or
//! whichever candidate an external selector picks, depending on the
//! [`LinkerConfig`].

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::SchemaGraph;
use crate::llm::{EndpointExtraction, LlmError};
use crate::schema::{ForeignKeyEdge, Schema};
use crate::sql::quote_ident;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("unknown table: {0}")]
    UnknownTable(String),
    #[error("source or destination list is empty")]
    EmptyEndpoints,
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// A simple path of tables; consecutive tables are adjacent in the graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JoinPath {
    pub tables: Vec<String>,
}

impl JoinPath {
    pub fn new(tables: Vec<String>) -> Self {
        Self { tables }
    }

    /// Hop count.
    pub fn len(&self) -> usize {
        self.tables.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    fn sort_key(&self) -> Vec<String> {
        self.tables.iter().map(|t| t.to_lowercase()).collect()
    }

    fn canonical(mut self) -> Self {
        let mut reversed = self.tables.clone();
        reversed.reverse();
        let rev = JoinPath::new(reversed);
        if rev.cmp_lexicographic(&self) == Ordering::Less {
            self = rev;
        }
        self
    }

    /// Orders by the lowercased table sequence, then by raw spelling.
    pub fn cmp_lexicographic(&self, other: &Self) -> Ordering {
        self.sort_key()
            .cmp(&other.sort_key())
            .then_with(|| self.tables.cmp(&other.tables))
    }
}

impl fmt::Display for JoinPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tables.join(" -> "))
    }
}

/// Every simple path of minimal length between `src` and `dst`, in
/// lexicographic order of table-name sequence.
///
/// BFS layers record all predecessors at minimal depth; the paths are then
/// enumerated backwards from `dst`. Returns `[[src]]` when `src == dst` and an
/// empty list when `dst` is unreachable.
pub fn all_shortest_paths(
    graph: &SchemaGraph,
    src: &str,
    dst: &str,
) -> Result<Vec<JoinPath>, LinkError> {
    let s = graph
        .node_index(src)
        .ok_or_else(|| LinkError::UnknownTable(src.to_string()))?;
    let d = graph
        .node_index(dst)
        .ok_or_else(|| LinkError::UnknownTable(dst.to_string()))?;
    if s == d {
        return Ok(vec![JoinPath::new(vec![graph.name(s).to_string()])]);
    }

    let n = graph.node_count();
    let mut dist = vec![usize::MAX; n];
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut queue = VecDeque::new();
    dist[s] = 0;
    queue.push_back(s);
    while let Some(u) = queue.pop_front() {
        if dist[u] >= dist[d] {
            break;
        }
        for &v in graph.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                preds[v].push(u);
                queue.push_back(v);
            } else if dist[v] == dist[u] + 1 {
                preds[v].push(u);
            }
        }
    }
    if dist[d] == usize::MAX {
        return Ok(Vec::new());
    }

    let mut paths = Vec::new();
    let mut stack = vec![d];
    collect_backwards(graph, &preds, s, &mut stack, &mut paths);
    paths.sort_by(JoinPath::cmp_lexicographic);
    Ok(paths)
}

fn collect_backwards(
    graph: &SchemaGraph,
    preds: &[Vec<usize>],
    src: usize,
    stack: &mut Vec<usize>,
    out: &mut Vec<JoinPath>,
) {
    let top = *stack.last().expect("stack is never empty");
    if top == src {
        out.push(JoinPath::new(
            stack
                .iter()
                .rev()
                .map(|&i| graph.name(i).to_string())
                .collect(),
        ));
        return;
    }
    for &p in &preds[top] {
        stack.push(p);
        collect_backwards(graph, preds, src, stack, out);
        stack.pop();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EndpointCount {
    One,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UnionMode {
    /// The union is offered to the selector as one extra candidate.
    AppendUnion,
    /// The selector only sees the paths.
    NoUnion,
    /// No selection; the union is returned directly.
    ForceUnion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkerConfig {
    pub k_s: EndpointCount,
    pub k_d: EndpointCount,
    pub longest: bool,
    pub union_mode: UnionMode,
}

/// The seven named linker configurations.
#[derive(
    Debug, Default, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum ModePreset {
    Mode1,
    Mode2,
    Mode3,
    Mode4,
    Mode5,
    Mode6,
    #[default]
    Mode7,
}

impl ModePreset {
    pub const ALL: [ModePreset; 7] = [
        ModePreset::Mode1,
        ModePreset::Mode2,
        ModePreset::Mode3,
        ModePreset::Mode4,
        ModePreset::Mode5,
        ModePreset::Mode6,
        ModePreset::Mode7,
    ];

    pub fn config(self) -> LinkerConfig {
        use EndpointCount::{All, One};
        let (k_s, k_d, longest, union_mode) = match self {
            ModePreset::Mode1 => (One, One, false, UnionMode::AppendUnion),
            ModePreset::Mode2 => (One, All, false, UnionMode::AppendUnion),
            ModePreset::Mode3 => (All, One, false, UnionMode::AppendUnion),
            ModePreset::Mode4 => (All, All, false, UnionMode::AppendUnion),
            ModePreset::Mode5 => (All, All, true, UnionMode::AppendUnion),
            ModePreset::Mode6 => (All, All, false, UnionMode::NoUnion),
            ModePreset::Mode7 => (All, All, false, UnionMode::ForceUnion),
        };
        LinkerConfig {
            k_s,
            k_d,
            longest,
            union_mode,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModePreset::Mode1 => "mode1",
            ModePreset::Mode2 => "mode2",
            ModePreset::Mode3 => "mode3",
            ModePreset::Mode4 => "mode4",
            ModePreset::Mode5 => "mode5",
            ModePreset::Mode6 => "mode6",
            ModePreset::Mode7 => "mode7",
        }
    }

    /// Descriptive label used in comparison grids.
    pub fn label(self) -> &'static str {
        match self {
            ModePreset::Mode1 => "1-1",
            ModePreset::Mode2 => "1-n",
            ModePreset::Mode3 => "n-1",
            ModePreset::Mode4 => "n-n",
            ModePreset::Mode5 => "force-longest",
            ModePreset::Mode6 => "no-union",
            ModePreset::Mode7 => "force-union",
        }
    }

    /// Whether this mode may issue a path-selection call.
    pub fn uses_selector(self) -> bool {
        let c = self.config();
        !c.longest && c.union_mode != UnionMode::ForceUnion
    }
}

impl fmt::Display for ModePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModePreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_lowercase();
        ModePreset::ALL
            .into_iter()
            .find(|m| m.name() == s || m.label() == s || m.name().trim_start_matches("mode") == s)
            .ok_or_else(|| format!("unknown mode '{s}' (expected mode1..mode7)"))
    }
}

/// All candidate paths plus the union of their tables.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CandidateSet {
    pub paths: Vec<JoinPath>,
    pub union_tables: BTreeSet<String>,
    /// Whether the union induces a connected subgraph.
    pub union_connected: bool,
    pub diagnostics: Vec<String>,
}

fn truncate(list: &[String], count: EndpointCount) -> &[String] {
    match count {
        EndpointCount::One => &list[..list.len().min(1)],
        EndpointCount::All => list,
    }
}

/// Builds the candidate set for every (source, destination) pair.
///
/// `ONE` keeps only the first-listed table. A pair with no connecting path
/// contributes both endpoints as zero-length paths so neither table is lost.
pub fn build_candidates(
    graph: &SchemaGraph,
    sources: &[String],
    destinations: &[String],
    config: &LinkerConfig,
) -> Result<CandidateSet, LinkError> {
    let sources = truncate(sources, config.k_s);
    let destinations = truncate(destinations, config.k_d);
    if sources.is_empty() || destinations.is_empty() {
        return Err(LinkError::EmptyEndpoints);
    }

    let mut seen = HashSet::new();
    let mut paths = Vec::new();
    let mut diagnostics = Vec::new();
    let mut push = |p: JoinPath, paths: &mut Vec<JoinPath>| {
        let p = p.canonical();
        if seen.insert(p.sort_key()) {
            paths.push(p);
        }
    };
    for src in sources {
        for dst in destinations {
            let found = all_shortest_paths(graph, src, dst)?;
            if found.is_empty() {
                diagnostics.push(format!(
                    "no path between {src} and {dst}; both kept as standalone tables"
                ));
                for t in [src, dst] {
                    let idx = graph.node_index(t).expect("checked by all_shortest_paths");
                    push(JoinPath::new(vec![graph.name(idx).to_string()]), &mut paths);
                }
            }
            for p in found {
                push(p, &mut paths);
            }
        }
    }
    paths.sort_by(JoinPath::cmp_lexicographic);

    let union_tables: BTreeSet<String> = paths
        .iter()
        .flat_map(|p| p.tables.iter().cloned())
        .collect();
    let union_connected = is_connected(graph, &union_tables);
    if !union_connected {
        diagnostics.push("union of candidate paths is not connected".to_string());
    }
    Ok(CandidateSet {
        paths,
        union_tables,
        union_connected,
        diagnostics,
    })
}

/// Whether `tables` induce a connected subgraph (vacuously true when empty).
pub fn is_connected(graph: &SchemaGraph, tables: &BTreeSet<String>) -> bool {
    let members: HashSet<usize> = tables.iter().filter_map(|t| graph.node_index(t)).collect();
    let Some(&start) = members.iter().next() else {
        return true;
    };
    let mut seen = HashSet::from([start]);
    let mut stack = vec![start];
    while let Some(u) = stack.pop() {
        for &v in graph.neighbors(u) {
            if members.contains(&v) && seen.insert(v) {
                stack.push(v);
            }
        }
    }
    seen.len() == members.len()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CandidateOption {
    Path(JoinPath),
    Union(BTreeSet<String>),
}

/// What the path selector is shown: numbered options (ids start at 1) and
/// their rendered listing.
#[derive(Debug, Clone)]
pub struct SelectionRequest<'a> {
    pub question: &'a str,
    pub evidence: Option<&'a str>,
    pub options: Vec<CandidateOption>,
    pub listing: String,
}

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error("selector reply invalid: {0}")]
    InvalidReply(String),
    #[error(transparent)]
    Backend(#[from] LlmError),
}

/// Picks one candidate by 1-based id.
pub trait PathSelector: Sync {
    fn select(&self, request: &SelectionRequest<'_>) -> Result<usize, SelectorError>;
}

/// Extracts source and destination tables for a question.
pub trait EndpointOracle: Sync {
    fn extract(
        &self,
        question: &str,
        evidence: Option<&str>,
        schema: &Schema,
    ) -> Result<EndpointExtraction, LlmError>;
}

/// A selector that must never be called; for modes without LLM selection.
pub struct NoSelector;

impl PathSelector for NoSelector {
    fn select(&self, _request: &SelectionRequest<'_>) -> Result<usize, SelectorError> {
        Err(SelectorError::InvalidReply(
            "no path selector configured".into(),
        ))
    }
}

/// Join condition between `left` and the other endpoint of `fk`, oriented so
/// that `left` comes first.
pub fn format_join(fk: &ForeignKeyEdge, left: &str) -> String {
    let (a, ac, b, bc) = if fk.from_table.eq_ignore_ascii_case(left) {
        (&fk.from_table, &fk.from_column, &fk.to_table, &fk.to_column)
    } else {
        (&fk.to_table, &fk.to_column, &fk.from_table, &fk.from_column)
    };
    format!(
        "{}.{} = {}.{}",
        quote_ident(a),
        quote_ident(ac),
        quote_ident(b),
        quote_ident(bc)
    )
}

/// Join justifications for each hop of `path`, oriented along the path.
pub fn path_joins(graph: &SchemaGraph, path: &JoinPath) -> Vec<(String, Vec<ForeignKeyEdge>)> {
    path.tables
        .windows(2)
        .map(|hop| {
            let fks = graph
                .justifications(&hop[0], &hop[1])
                .map(<[_]>::to_vec)
                .unwrap_or_default();
            (hop[0].clone(), fks)
        })
        .collect()
}

/// Renders numbered candidate lines for the path-selection prompt.
pub fn render_candidate_listing(graph: &SchemaGraph, options: &[CandidateOption]) -> String {
    let mut out = String::new();
    for (i, option) in options.iter().enumerate() {
        let id = i + 1;
        match option {
            CandidateOption::Path(path) => {
                out.push_str(&format!("path_id={id}: {path}"));
                let joins: Vec<String> = path_joins(graph, path)
                    .iter()
                    .flat_map(|(left, fks)| fks.iter().map(move |fk| format_join(fk, left)))
                    .collect();
                if !joins.is_empty() {
                    out.push_str(&format!(" (join: {})", joins.join(", ")));
                }
            }
            CandidateOption::Union(tables) => {
                let names: Vec<&str> = tables.iter().map(String::as_str).collect();
                out.push_str(&format!("path_id={id}: UNION {{{}}}", names.join(", ")));
            }
        }
        out.push('\n');
    }
    out
}

/// The outcome of path selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub chosen_tables: BTreeSet<String>,
    /// Id of the chosen option as numbered for the selector (or candidate
    /// index + 1 for the longest rule). Absent when the union is forced.
    pub chosen_path_id: Option<usize>,
    /// Set when a concrete path, rather than the union, was chosen.
    pub chosen_path: Option<JoinPath>,
    pub selector_calls: usize,
    pub warnings: Vec<String>,
}

impl Selection {
    fn union(candidates: &CandidateSet) -> Self {
        Self {
            chosen_tables: candidates.union_tables.clone(),
            chosen_path_id: None,
            chosen_path: None,
            selector_calls: 0,
            warnings: Vec::new(),
        }
    }

    fn path(candidates: &CandidateSet, index: usize) -> Self {
        let path = candidates.paths[index].clone();
        Self {
            chosen_tables: path.tables.iter().cloned().collect(),
            chosen_path_id: Some(index + 1),
            chosen_path: Some(path),
            selector_calls: 0,
            warnings: Vec::new(),
        }
    }
}

/// Chooses the final table set from the candidates according to `config`.
pub fn select_path(
    graph: &SchemaGraph,
    candidates: &CandidateSet,
    config: &LinkerConfig,
    question: &str,
    evidence: Option<&str>,
    selector: &dyn PathSelector,
) -> Result<Selection, LinkError> {
    if candidates.paths.is_empty() {
        return Err(LinkError::EmptyEndpoints);
    }
    if config.union_mode == UnionMode::ForceUnion {
        return Ok(Selection::union(candidates));
    }
    if config.longest {
        // Paths are sorted, so the first maximum is the lexicographic tie-break.
        let max = candidates
            .paths
            .iter()
            .map(JoinPath::len)
            .max()
            .unwrap_or(0);
        let index = candidates
            .paths
            .iter()
            .position(|p| p.len() == max)
            .unwrap_or(0);
        return Ok(Selection::path(candidates, index));
    }
    if candidates.paths.len() == 1 {
        return Ok(Selection::path(candidates, 0));
    }

    let mut options: Vec<CandidateOption> = candidates
        .paths
        .iter()
        .cloned()
        .map(CandidateOption::Path)
        .collect();
    if config.union_mode == UnionMode::AppendUnion {
        options.push(CandidateOption::Union(candidates.union_tables.clone()));
    }
    let listing = render_candidate_listing(graph, &options);
    let request = SelectionRequest {
        question,
        evidence,
        options,
        listing,
    };
    let reply = selector.select(&request);
    let fallback = |reason: String| {
        let mut s = Selection::union(candidates);
        s.selector_calls = 1;
        s.warnings.push(format!(
            "path selection failed ({reason}); using the union of all candidates"
        ));
        s
    };
    let id = match reply {
        Ok(id) => id,
        Err(SelectorError::InvalidReply(msg)) => return Ok(fallback(msg)),
        Err(SelectorError::Backend(e)) => return Err(e.into()),
    };
    let mut selection = match request.options.get(id.wrapping_sub(1)) {
        Some(CandidateOption::Path(_)) => Selection::path(candidates, id - 1),
        Some(CandidateOption::Union(_)) => {
            let mut s = Selection::union(candidates);
            s.chosen_path_id = Some(id);
            s
        }
        None => {
            return Ok(fallback(format!(
                "id {id} outside 1..={}",
                request.options.len()
            )))
        }
    };
    selection.selector_calls = 1;
    Ok(selection)
}

/// Everything produced by linking one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkResult {
    pub sources: Vec<String>,
    pub destinations: Vec<String>,
    pub candidates: CandidateSet,
    pub chosen_tables: BTreeSet<String>,
    pub chosen_path_id: Option<usize>,
    pub chosen_path: Option<JoinPath>,
    /// Per-hop join justifications of `chosen_path`, oriented along it.
    pub path_joins: Vec<ForeignKeyEdge>,
    pub induced_fk_edges: Vec<ForeignKeyEdge>,
    pub degraded: bool,
    pub selector_calls: usize,
    pub warnings: Vec<String>,
}

/// Declared FKs with both endpoints inside `tables`, self-references included.
pub fn induced_fk_edges(schema: &Schema, tables: &BTreeSet<String>) -> Vec<ForeignKeyEdge> {
    let lower: HashSet<String> = tables.iter().map(|t| t.to_lowercase()).collect();
    schema
        .foreign_keys()
        .iter()
        .filter(|fk| {
            lower.contains(&fk.from_table.to_lowercase())
                && lower.contains(&fk.to_table.to_lowercase())
        })
        .cloned()
        .collect()
}

/// Links a question to a connected sub-schema: endpoint extraction,
/// candidate enumeration, then selection.
pub fn link(
    question: &str,
    evidence: Option<&str>,
    schema: &Schema,
    graph: &SchemaGraph,
    config: &LinkerConfig,
    endpoints: &dyn EndpointOracle,
    selector: &dyn PathSelector,
) -> Result<LinkResult, LinkError> {
    let extraction = endpoints.extract(question, evidence, schema)?;
    let candidates =
        build_candidates(graph, &extraction.sources, &extraction.destinations, config)?;
    let selection = select_path(graph, &candidates, config, question, evidence, selector)?;

    let path_joins = selection
        .chosen_path
        .as_ref()
        .map(|p| {
            path_joins(graph, p)
                .into_iter()
                .flat_map(|(left, fks)| {
                    fks.into_iter().map(move |fk| {
                        if fk.from_table.eq_ignore_ascii_case(&left) {
                            fk
                        } else {
                            ForeignKeyEdge {
                                from_table: fk.to_table,
                                from_column: fk.to_column,
                                to_table: fk.from_table,
                                to_column: fk.from_column,
                                provenance: fk.provenance,
                            }
                        }
                    })
                })
                .collect()
        })
        .unwrap_or_default();

    let mut warnings = extraction.warnings;
    warnings.extend(candidates.diagnostics.iter().cloned());
    warnings.extend(selection.warnings);
    Ok(LinkResult {
        induced_fk_edges: induced_fk_edges(schema, &selection.chosen_tables),
        sources: extraction.sources,
        destinations: extraction.destinations,
        candidates,
        chosen_tables: selection.chosen_tables,
        chosen_path_id: selection.chosen_path_id,
        chosen_path: selection.chosen_path,
        path_joins,
        degraded: extraction.degraded,
        selector_calls: selection.selector_calls,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{ColumnDef, TableDef};

    fn graph(tables: &[&str], edges: &[(&str, &str)]) -> (Schema, SchemaGraph) {
        let schema = Schema::new(
            "t",
            tables
                .iter()
                .map(|t| {
                    TableDef::new(
                        *t,
                        vec![
                            ColumnDef::new("id", "", true),
                            ColumnDef::new("ref", "", false),
                        ],
                    )
                })
                .collect(),
            edges
                .iter()
                .map(|(a, b)| ForeignKeyEdge::declared(*a, "ref", *b, "id"))
                .collect(),
        )
        .unwrap();
        let g = SchemaGraph::build(&schema);
        (schema, g)
    }

    fn names(paths: &[JoinPath]) -> Vec<Vec<&str>> {
        paths
            .iter()
            .map(|p| p.tables.iter().map(String::as_str).collect())
            .collect()
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    struct Fixed(usize);
    impl PathSelector for Fixed {
        fn select(&self, _r: &SelectionRequest<'_>) -> Result<usize, SelectorError> {
            Ok(self.0)
        }
    }

    #[test]
    fn triangle_direct_edge() {
        let (_, g) = graph(&["A", "B", "C"], &[("A", "B"), ("B", "C"), ("A", "C")]);
        assert_eq!(
            names(&all_shortest_paths(&g, "A", "C").unwrap()),
            vec![vec!["A", "C"]]
        );
    }

    #[test]
    fn square_two_paths() {
        let (_, g) = graph(
            &["A", "B", "C", "D"],
            &[("A", "B"), ("B", "C"), ("A", "D"), ("D", "C")],
        );
        assert_eq!(
            names(&all_shortest_paths(&g, "A", "C").unwrap()),
            vec![vec!["A", "B", "C"], vec!["A", "D", "C"]]
        );
    }

    #[test]
    fn identity_and_unknown() {
        let (_, g) = graph(&["A", "B"], &[]);
        assert_eq!(
            names(&all_shortest_paths(&g, "A", "a").unwrap()),
            vec![vec!["A"]]
        );
        assert!(all_shortest_paths(&g, "A", "B").unwrap().is_empty());
        assert!(matches!(
            all_shortest_paths(&g, "A", "Q"),
            Err(LinkError::UnknownTable(_))
        ));
    }

    #[test]
    fn candidates_square() {
        let (_, g) = graph(
            &["A", "B", "C", "D"],
            &[("A", "B"), ("B", "C"), ("A", "D"), ("D", "C")],
        );
        let c = build_candidates(&g, &s(&["A"]), &s(&["C"]), &ModePreset::Mode4.config()).unwrap();
        assert_eq!(c.paths.len(), 2);
        assert_eq!(
            c.union_tables,
            ["A", "B", "C", "D"].iter().map(|x| x.to_string()).collect()
        );
        assert!(c.union_connected);
    }

    #[test]
    fn candidates_same_table() {
        let (_, g) = graph(&["A", "B"], &[("A", "B")]);
        let c = build_candidates(&g, &s(&["A"]), &s(&["A"]), &ModePreset::Mode7.config()).unwrap();
        assert_eq!(names(&c.paths), vec![vec!["A"]]);
    }

    #[test]
    fn candidates_disconnected() {
        let (_, g) = graph(&["A", "B", "Z"], &[("A", "B")]);
        let c = build_candidates(&g, &s(&["A"]), &s(&["Z"]), &ModePreset::Mode7.config()).unwrap();
        assert_eq!(names(&c.paths), vec![vec!["A"], vec!["Z"]]);
        assert_eq!(c.union_tables.len(), 2);
        assert!(!c.union_connected);
        assert!(!c.diagnostics.is_empty());
    }

    #[test]
    fn reverse_duplicates_removed() {
        let (_, g) = graph(&["A", "B"], &[("A", "B")]);
        let c = build_candidates(
            &g,
            &s(&["A", "B"]),
            &s(&["B", "A"]),
            &ModePreset::Mode4.config(),
        )
        .unwrap();
        assert_eq!(names(&c.paths), vec![vec!["A"], vec!["A", "B"], vec!["B"]]);
    }

    #[test]
    fn k_one_keeps_first() {
        let (_, g) = graph(&["A", "B", "C"], &[("A", "B"), ("B", "C")]);
        let c =
            build_candidates(&g, &s(&["C", "A"]), &s(&["B"]), &ModePreset::Mode1.config()).unwrap();
        assert_eq!(names(&c.paths), vec![vec!["B", "C"]]);
        assert!(matches!(
            build_candidates(&g, &[], &s(&["B"]), &ModePreset::Mode1.config()),
            Err(LinkError::EmptyEndpoints)
        ));
    }

    #[test]
    fn longest_rule_across_pairs() {
        let (_, g) = graph(&["A", "B", "C", "D"], &[("A", "B"), ("B", "C"), ("A", "D")]);
        let c =
            build_candidates(&g, &s(&["A"]), &s(&["C", "D"]), &ModePreset::Mode5.config()).unwrap();
        assert_eq!(names(&c.paths), vec![vec!["A", "B", "C"], vec!["A", "D"]]);
        let sel = select_path(&g, &c, &ModePreset::Mode5.config(), "q", None, &NoSelector).unwrap();
        assert_eq!(sel.chosen_path.unwrap().tables, s(&["A", "B", "C"]));
        assert_eq!(sel.selector_calls, 0);
    }

    #[test]
    fn force_union_selection() {
        let (_, g) = graph(
            &["A", "B", "C", "D"],
            &[("A", "B"), ("B", "C"), ("A", "D"), ("D", "C")],
        );
        let c = build_candidates(&g, &s(&["A"]), &s(&["C"]), &ModePreset::Mode7.config()).unwrap();
        let sel = select_path(&g, &c, &ModePreset::Mode7.config(), "q", None, &NoSelector).unwrap();
        assert_eq!(sel.chosen_tables.len(), 4);
        assert_eq!(sel.chosen_path_id, None);
    }

    #[test]
    fn selector_picks_and_union_option() {
        let (_, g) = graph(
            &["A", "B", "C", "D"],
            &[("A", "B"), ("B", "C"), ("A", "D"), ("D", "C")],
        );
        let cfg = ModePreset::Mode4.config();
        let c = build_candidates(&g, &s(&["A"]), &s(&["C"]), &cfg).unwrap();
        let sel = select_path(&g, &c, &cfg, "q", None, &Fixed(2)).unwrap();
        assert_eq!(
            sel.chosen_tables,
            ["A", "C", "D"].iter().map(|x| x.to_string()).collect()
        );
        assert_eq!(sel.chosen_path_id, Some(2));
        let sel = select_path(&g, &c, &cfg, "q", None, &Fixed(3)).unwrap();
        assert_eq!(sel.chosen_tables.len(), 4);
        assert_eq!(sel.chosen_path_id, Some(3));
        assert!(sel.chosen_path.is_none());
    }

    #[test]
    fn invalid_id_falls_back_to_union() {
        let (_, g) = graph(
            &["A", "B", "C", "D"],
            &[("A", "B"), ("B", "C"), ("A", "D"), ("D", "C")],
        );
        let cfg = ModePreset::Mode6.config();
        let c = build_candidates(&g, &s(&["A"]), &s(&["C"]), &cfg).unwrap();
        let sel = select_path(&g, &c, &cfg, "q", None, &Fixed(3)).unwrap();
        assert_eq!(sel.chosen_tables.len(), 4);
        assert_eq!(sel.warnings.len(), 1);
    }

    #[test]
    fn listing_format() {
        let schema = Schema::new(
            "t",
            vec![
                TableDef::new("frpm", vec![ColumnDef::new("CDSCode", "TEXT", false)]),
                TableDef::new("schools", vec![ColumnDef::new("CDSCode", "TEXT", true)]),
            ],
            vec![ForeignKeyEdge::declared(
                "frpm", "CDSCode", "schools", "CDSCode",
            )],
        )
        .unwrap();
        let g = SchemaGraph::build(&schema);
        let p = JoinPath::new(s(&["schools", "frpm"]));
        let listing = render_candidate_listing(
            &g,
            &[
                CandidateOption::Path(p),
                CandidateOption::Union(["frpm".to_string(), "schools".to_string()].into()),
            ],
        );
        assert_eq!(
            listing,
            "path_id=1: schools -> frpm (join: schools.CDSCode = frpm.CDSCode)\npath_id=2: UNION {frpm, schools}\n"
        );
    }

    #[test]
    fn preset_parsing() {
        assert_eq!("mode7".parse::<ModePreset>().unwrap(), ModePreset::Mode7);
        assert_eq!(
            "force-union".parse::<ModePreset>().unwrap(),
            ModePreset::Mode7
        );
        assert_eq!("3".parse::<ModePreset>().unwrap(), ModePreset::Mode3);
        assert!("mode8".parse::<ModePreset>().is_err());
        assert!(!ModePreset::Mode5.uses_selector());
        assert!(ModePreset::Mode6.uses_selector());
    }
}
