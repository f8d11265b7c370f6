//! Table-reference extraction from SQL text and schema/join-path rendering
//! for generation prompts.

use std::collections::{BTreeSet, HashSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pathfinder::{format_join, LinkResult};
use crate::schema::{ForeignKeyEdge, Schema};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SqlError {
    #[error("no FROM clause found in SQL")]
    NoFromClause,
    #[error("unterminated {0}")]
    Unterminated(&'static str),
    #[error("unknown table: {0}")]
    UnknownTable(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    /// Unquoted identifier or keyword.
    Word(String),
    /// Identifier written as `"x"`, `` `x` `` or `[x]`.
    Quoted(String),
    Literal,
    Punct(char),
}

impl Token {
    fn is_kw(&self, kw: &str) -> bool {
        matches!(self, Token::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    fn ident(&self) -> Option<&str> {
        match self {
            Token::Word(w) | Token::Quoted(w) => Some(w),
            _ => None,
        }
    }
}

fn tokenize(sql: &str) -> Result<Vec<Token>, SqlError> {
    let chars: Vec<char> = sql.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    let read_quoted =
        |i: &mut usize, close: char, what: &'static str| -> Result<String, SqlError> {
            let mut s = String::new();
            *i += 1;
            loop {
                match chars.get(*i) {
                    None => return Err(SqlError::Unterminated(what)),
                    Some(&c) if c == close => {
                        if close != ']' && chars.get(*i + 1) == Some(&close) {
                            s.push(c);
                            *i += 2;
                        } else {
                            *i += 1;
                            return Ok(s);
                        }
                    }
                    Some(&c) => {
                        s.push(c);
                        *i += 1;
                    }
                }
            }
        };
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '-' && chars.get(i + 1) == Some(&'-') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c == '/' && chars.get(i + 1) == Some(&'*') {
            i += 2;
            while i < chars.len() && !(chars[i] == '*' && chars.get(i + 1) == Some(&'/')) {
                i += 1;
            }
            if i >= chars.len() {
                return Err(SqlError::Unterminated("comment"));
            }
            i += 2;
        } else if c == '\'' {
            read_quoted(&mut i, '\'', "string literal")?;
            tokens.push(Token::Literal);
        } else if c == '"' {
            tokens.push(Token::Quoted(read_quoted(
                &mut i,
                '"',
                "quoted identifier",
            )?));
        } else if c == '`' {
            tokens.push(Token::Quoted(read_quoted(
                &mut i,
                '`',
                "quoted identifier",
            )?));
        } else if c == '[' {
            tokens.push(Token::Quoted(read_quoted(
                &mut i,
                ']',
                "bracketed identifier",
            )?));
        } else if c.is_ascii_digit() {
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '.') {
                i += 1;
            }
            tokens.push(Token::Literal);
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len()
                && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '$')
            {
                i += 1;
            }
            tokens.push(Token::Word(chars[start..i].iter().collect()));
        } else {
            tokens.push(Token::Punct(c));
            i += 1;
        }
    }
    Ok(tokens)
}

/// Keywords that can follow a table reference and therefore never act as an alias.
const CLAUSE_KEYWORDS: &[&str] = &[
    "where",
    "join",
    "inner",
    "left",
    "right",
    "full",
    "cross",
    "natural",
    "outer",
    "on",
    "using",
    "group",
    "order",
    "limit",
    "having",
    "union",
    "intersect",
    "except",
    "window",
    "indexed",
    "not",
    "offset",
    "as",
    "select",
    "from",
    "with",
    "values",
    "returning",
    "set",
];

fn is_clause_keyword(word: &str) -> bool {
    CLAUSE_KEYWORDS.iter().any(|k| word.eq_ignore_ascii_case(k))
}

fn matching_paren(tokens: &[Token], open: usize) -> usize {
    let mut depth = 0usize;
    for (i, t) in tokens.iter().enumerate().skip(open) {
        match t {
            Token::Punct('(') => depth += 1,
            Token::Punct(')') => {
                depth -= 1;
                if depth == 0 {
                    return i;
                }
            }
            _ => {}
        }
    }
    tokens.len()
}

/// Names introduced by `WITH name [(cols)] AS (...)`, lowercased.
fn cte_names(tokens: &[Token]) -> HashSet<String> {
    let mut names = HashSet::new();
    for (start, t) in tokens.iter().enumerate() {
        if !t.is_kw("with") {
            continue;
        }
        let mut i = start + 1;
        if tokens.get(i).is_some_and(|t| t.is_kw("recursive")) {
            i += 1;
        }
        while let Some(name) = tokens.get(i).and_then(Token::ident) {
            let name = name.to_lowercase();
            i += 1;
            if tokens.get(i) == Some(&Token::Punct('(')) {
                i = matching_paren(tokens, i) + 1;
            }
            if !tokens.get(i).is_some_and(|t| t.is_kw("as")) {
                break;
            }
            names.insert(name);
            i += 1;
            while tokens
                .get(i)
                .is_some_and(|t| t.is_kw("not") || t.is_kw("materialized"))
            {
                i += 1;
            }
            if tokens.get(i) != Some(&Token::Punct('(')) {
                break;
            }
            i = matching_paren(tokens, i) + 1;
            if tokens.get(i) == Some(&Token::Punct(',')) {
                i += 1;
            } else {
                break;
            }
        }
    }
    names
}

/// Reads a comma-separated list of table factors starting at `i`, pushing
/// every plain table name. Parenthesised factors are skipped here; their
/// contents are visited by the outer scan.
fn scan_factor_list(tokens: &[Token], mut i: usize, out: &mut Vec<String>) {
    loop {
        match tokens.get(i) {
            Some(Token::Punct('(')) => i = matching_paren(tokens, i) + 1,
            Some(t)
                if t.ident().is_some() && !matches!(t, Token::Word(w) if is_clause_keyword(w)) =>
            {
                let mut name = t.ident().unwrap().to_string();
                i += 1;
                while tokens.get(i) == Some(&Token::Punct('.')) {
                    match tokens.get(i + 1).and_then(Token::ident) {
                        Some(part) => {
                            name = part.to_string();
                            i += 2;
                        }
                        None => break,
                    }
                }
                if tokens.get(i) == Some(&Token::Punct('(')) {
                    // table-valued function
                    i = matching_paren(tokens, i) + 1;
                } else {
                    out.push(name);
                }
            }
            _ => return,
        }
        if tokens.get(i).is_some_and(|t| t.is_kw("as")) {
            i += 2;
        } else if let Some(t) = tokens.get(i) {
            match t {
                Token::Quoted(_) => i += 1,
                Token::Word(w) if !is_clause_keyword(w) => i += 1,
                _ => {}
            }
        }
        if tokens.get(i) == Some(&Token::Punct(',')) {
            i += 1;
        } else {
            return;
        }
    }
}

/// Base tables referenced by a query, resolved against a schema.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TableReferenceSet {
    /// Canonical schema names.
    pub tables: BTreeSet<String>,
    /// Referenced names that are neither schema tables nor CTEs.
    pub unresolved: Vec<String>,
}

/// Every base table named in a FROM or JOIN clause at any nesting depth,
/// excluding names defined by WITH clauses.
pub fn extract_tables(sql: &str, schema: &Schema) -> Result<TableReferenceSet, SqlError> {
    let tokens = tokenize(sql)?;
    let ctes = cte_names(&tokens);
    let mut raw = Vec::new();
    let mut saw_from = false;
    for (i, t) in tokens.iter().enumerate() {
        if t.is_kw("from") {
            // IS [NOT] DISTINCT FROM
            if i > 0 && tokens[i - 1].is_kw("distinct") {
                continue;
            }
            saw_from = true;
            scan_factor_list(&tokens, i + 1, &mut raw);
        } else if t.is_kw("join") {
            scan_factor_list(&tokens, i + 1, &mut raw);
        }
    }
    if !saw_from {
        return Err(SqlError::NoFromClause);
    }
    let mut refs = TableReferenceSet::default();
    for name in raw {
        if ctes.contains(&name.to_lowercase()) {
            continue;
        }
        match schema.resolve_table(&name) {
            Some(canonical) => {
                refs.tables.insert(canonical.to_string());
            }
            None => {
                if !refs
                    .unresolved
                    .iter()
                    .any(|u| u.eq_ignore_ascii_case(&name))
                {
                    refs.unresolved.push(name);
                }
            }
        }
    }
    Ok(refs)
}

/// Leaves plain identifiers as-is and backtick-quotes anything else.
pub fn quote_ident(name: &str) -> String {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"^[A-Za-z_][A-Za-z0-9_]*$").unwrap());
    if re.is_match(name) {
        name.to_string()
    } else {
        format!("`{}`", name.replace('`', "``"))
    }
}

/// DDL-like text for the chosen tables, in lexicographic order, with only FK
/// lines whose endpoints are both chosen. FK lines sit at the end of the
/// referencing table's block.
pub fn render_filtered_schema(
    schema: &Schema,
    chosen_tables: &BTreeSet<String>,
    induced_fk_edges: &[ForeignKeyEdge],
) -> Result<String, SqlError> {
    let mut tables = Vec::with_capacity(chosen_tables.len());
    for name in chosen_tables {
        let table = schema
            .table(name)
            .ok_or_else(|| SqlError::UnknownTable(name.clone()))?;
        if !tables
            .iter()
            .any(|t: &&crate::schema::TableDef| t.name == table.name)
        {
            tables.push(table);
        }
    }
    tables.sort_by(|a, b| {
        a.name
            .to_lowercase()
            .cmp(&b.name.to_lowercase())
            .then(a.name.cmp(&b.name))
    });
    let chosen_lower: HashSet<String> = tables.iter().map(|t| t.name.to_lowercase()).collect();

    let blocks: Vec<String> = tables
        .iter()
        .map(|table| {
            let mut lines: Vec<String> = table
                .columns
                .iter()
                .map(|c| {
                    if c.declared_type.trim().is_empty() {
                        format!("  {}", quote_ident(&c.name))
                    } else {
                        format!("  {} {}", quote_ident(&c.name), c.declared_type.trim())
                    }
                })
                .collect();
            let pks: Vec<String> = table
                .columns
                .iter()
                .filter(|c| c.is_primary_key)
                .map(|c| quote_ident(&c.name))
                .collect();
            if !pks.is_empty() {
                lines.push(format!("  PRIMARY KEY ({})", pks.join(", ")));
            }
            for fk in induced_fk_edges {
                if fk.from_table.eq_ignore_ascii_case(&table.name)
                    && chosen_lower.contains(&fk.to_table.to_lowercase())
                {
                    lines.push(format!(
                        "  FOREIGN KEY ({}) REFERENCES {} ({})",
                        quote_ident(&fk.from_column),
                        quote_ident(&fk.to_table),
                        quote_ident(&fk.to_column)
                    ));
                }
            }
            format!(
                "CREATE TABLE {} (\n{}\n);",
                quote_ident(&table.name),
                lines.join(",\n")
            )
        })
        .collect();
    Ok(blocks.join("\n\n"))
}

/// Full-schema serialization; identical to filtering with every table and FK.
pub fn render_schema(schema: &Schema) -> String {
    let all: BTreeSet<String> = schema.tables().iter().map(|t| t.name.clone()).collect();
    render_filtered_schema(schema, &all, schema.foreign_keys()).expect("all tables are known")
}

/// Join-path string for the linked generation prompt.
pub fn render_join_path(result: &LinkResult) -> String {
    if result.chosen_tables.len() <= 1 {
        let name = result
            .chosen_tables
            .iter()
            .next()
            .map(String::as_str)
            .unwrap_or("");
        return format!("{name} (no joins required)");
    }
    if let Some(path) = result.chosen_path.as_ref().filter(|p| !p.is_empty()) {
        let conds: Vec<String> = result
            .path_joins
            .iter()
            .map(|fk| format_join(fk, &fk.from_table))
            .collect();
        return if conds.is_empty() {
            path.to_string()
        } else {
            format!("{path} ({})", conds.join(", "))
        };
    }
    let mut tables: Vec<&String> = result.chosen_tables.iter().collect();
    tables.sort_by_key(|t| t.to_lowercase());
    let mut out = format!(
        "Tables: {}",
        tables
            .iter()
            .map(|t| t.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    );
    for fk in &result.induced_fk_edges {
        out.push('\n');
        out.push_str(&format_join(fk, &fk.from_table));
    }
    out
}

/// SQL from a generator reply: the first fenced code block, otherwise the
/// longest statement starting at a SELECT or WITH keyword.
pub fn extract_generated_sql(reply: &str) -> Option<String> {
    static FENCE: OnceLock<Regex> = OnceLock::new();
    static START: OnceLock<Regex> = OnceLock::new();
    let fence = FENCE.get_or_init(|| Regex::new(r"(?s)```[A-Za-z]*[ \t]*\n?(.*?)```").unwrap());
    if let Some(cap) = fence.captures(reply) {
        let body = cap[1].trim();
        if !body.is_empty() {
            return Some(body.to_string());
        }
    }
    let start = START.get_or_init(|| Regex::new(r"(?i)\b(select|with)\b").unwrap());
    start
        .find_iter(reply)
        .map(|m| {
            let rest = &reply[m.start()..];
            rest[..rest.find(';').unwrap_or(rest.len())]
                .trim()
                .to_string()
        })
        .filter(|s| s.len() > "select".len())
        .max_by_key(|s| s.len())
}
