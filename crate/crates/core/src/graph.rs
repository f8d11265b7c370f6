//! Undirected table-level graph built from foreign keys.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::schema::{FkProvenance, ForeignKeyEdge, Schema};

/// Which column names count as identifier columns during sparse-graph augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdColumnRule {
    /// The name has a word token equal to `id` after splitting on underscores,
    /// spaces, and camel-case boundaries (`id`, `user_id`, `CustomerID`, `id_code`).
    #[default]
    TokenBoundary,
    /// Any name containing `id` as a substring, `video` included.
    Substring,
}

impl IdColumnRule {
    pub fn matches(self, column: &str) -> bool {
        match self {
            IdColumnRule::Substring => column.to_lowercase().contains("id"),
            IdColumnRule::TokenBoundary => name_tokens(column).iter().any(|t| t == "id"),
        }
    }
}

/// Splits an identifier into lowercase word tokens.
fn name_tokens(name: &str) -> Vec<String> {
    let chars: Vec<char> = name.chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_alphanumeric() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            continue;
        }
        if !current.is_empty() && c.is_uppercase() {
            let prev = chars[i - 1];
            let next_lower = chars.get(i + 1).is_some_and(|n| n.is_lowercase());
            // fooBar | FOOBar -> FOO + Bar
            if prev.is_lowercase() || prev.is_ascii_digit() || (prev.is_uppercase() && next_lower) {
                tokens.push(std::mem::take(&mut current));
            }
        }
        current.extend(c.to_lowercase());
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Nodes are the schema's tables, in schema order. Edges are unordered pairs
/// `(i, j)` with `i < j`, each carrying every FK that justifies it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaGraph {
    nodes: Vec<String>,
    index: HashMap<String, usize>,
    adjacency: Vec<Vec<usize>>,
    edges: BTreeMap<(usize, usize), Vec<ForeignKeyEdge>>,
}

impl SchemaGraph {
    fn with_nodes(schema: &Schema) -> Self {
        let nodes: Vec<String> = schema.tables().iter().map(|t| t.name.clone()).collect();
        let index = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.to_lowercase(), i))
            .collect();
        Self {
            adjacency: vec![Vec::new(); nodes.len()],
            nodes,
            index,
            edges: BTreeMap::new(),
        }
    }

    /// Builds the FK graph. Self-referencing FKs contribute no edge and parallel
    /// FKs between one pair collapse into a single edge.
    pub fn build(schema: &Schema) -> Self {
        let mut graph = Self::with_nodes(schema);
        for fk in schema.foreign_keys() {
            if fk.is_self_reference() {
                continue;
            }
            let a = graph.index[&fk.from_table.to_lowercase()];
            let b = graph.index[&fk.to_table.to_lowercase()];
            graph.add_justification(a, b, fk.clone());
        }
        graph
    }

    fn add_justification(&mut self, a: usize, b: usize, fk: ForeignKeyEdge) {
        let key = (a.min(b), a.max(b));
        let entry = self.edges.entry(key).or_default();
        if entry.is_empty() {
            insert_sorted(&mut self.adjacency[a], b);
            insert_sorted(&mut self.adjacency[b], a);
        }
        if !entry.contains(&fk) {
            entry.push(fk);
        }
    }

    /// Adds identifier-column edges when the graph has fewer than two edges.
    ///
    /// Every pair of distinct tables sharing a column name (ignoring case) that
    /// `rule` accepts gets an `IdAugmented` edge, unless a declared FK already
    /// joins the pair. Runs once; the edge count is not re-checked afterwards.
    pub fn augment_sparse(mut self, schema: &Schema, rule: IdColumnRule) -> Self {
        if self.edge_count() >= 2 {
            return self;
        }
        let tables = schema.tables();
        let mut additions = Vec::new();
        for i in 0..tables.len() {
            for j in (i + 1)..tables.len() {
                if self.edges.contains_key(&(i, j)) {
                    continue;
                }
                for col in &tables[i].columns {
                    if !rule.matches(&col.name) {
                        continue;
                    }
                    if let Some(other) = tables[j].column(&col.name) {
                        additions.push((
                            i,
                            j,
                            ForeignKeyEdge {
                                from_table: tables[i].name.clone(),
                                from_column: col.name.clone(),
                                to_table: tables[j].name.clone(),
                                to_column: other.name.clone(),
                                provenance: FkProvenance::IdAugmented,
                            },
                        ));
                    }
                }
            }
        }
        for (i, j, fk) in additions {
            self.add_justification(i, j, fk);
        }
        self
    }

    /// Build followed by sparse augmentation.
    pub fn build_augmented(schema: &Schema, rule: IdColumnRule) -> Self {
        Self::build(schema).augment_sparse(schema, rule)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.nodes[idx]
    }

    pub fn node_index(&self, table: &str) -> Option<usize> {
        self.index.get(&table.to_lowercase()).copied()
    }

    /// Neighbours in ascending index order.
    pub fn neighbors(&self, idx: usize) -> &[usize] {
        &self.adjacency[idx]
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str, &[ForeignKeyEdge])> {
        self.edges.iter().map(|(&(a, b), fks)| {
            (
                self.nodes[a].as_str(),
                self.nodes[b].as_str(),
                fks.as_slice(),
            )
        })
    }

    /// FKs justifying the edge between two tables, if they are adjacent.
    pub fn justifications(&self, a: &str, b: &str) -> Option<&[ForeignKeyEdge]> {
        let (a, b) = (self.node_index(a)?, self.node_index(b)?);
        self.edges.get(&(a.min(b), a.max(b))).map(Vec::as_slice)
    }

    pub fn has_edge(&self, a: &str, b: &str) -> bool {
        self.justifications(a, b).is_some()
    }
}

fn insert_sorted(list: &mut Vec<usize>, value: usize) {
    if let Err(pos) = list.binary_search(&value) {
        list.insert(pos, value);
    }
}
