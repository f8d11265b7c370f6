//! Relational schema model and ingestion from SQLite files or JSON schema documents.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;

use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const SQLITE_MAGIC: &[u8; 16] = b"SQLite format 3\0";

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("not a SQLite database: {0}")]
    NotADatabase(String),
    #[error("sqlite error: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate table name: {0}")]
    DuplicateTable(String),
    #[error("duplicate column {column} in table {table}")]
    DuplicateColumn { table: String, column: String },
    #[error("empty column name in table {0}")]
    EmptyColumnName(String),
    #[error("empty table name")]
    EmptyTableName,
    #[error("foreign key {0} references a missing table or column")]
    DanglingFkReference(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub declared_type: String,
    pub is_primary_key: bool,
}

impl ColumnDef {
    pub fn new(
        name: impl Into<String>,
        declared_type: impl Into<String>,
        is_primary_key: bool,
    ) -> Self {
        Self {
            name: name.into(),
            declared_type: declared_type.into(),
            is_primary_key,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
}

impl TableDef {
    pub fn new(name: impl Into<String>, columns: Vec<ColumnDef>) -> Self {
        Self {
            name: name.into(),
            columns,
        }
    }

    /// Case-insensitive column lookup.
    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FkProvenance {
    DeclaredFk,
    IdAugmented,
}

/// A column-level link between two tables. Declared foreign keys come from the
/// schema; `IdAugmented` links are synthesized by graph augmentation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ForeignKeyEdge {
    pub from_table: String,
    pub from_column: String,
    pub to_table: String,
    pub to_column: String,
    pub provenance: FkProvenance,
}

impl ForeignKeyEdge {
    pub fn declared(
        from_table: impl Into<String>,
        from_column: impl Into<String>,
        to_table: impl Into<String>,
        to_column: impl Into<String>,
    ) -> Self {
        Self {
            from_table: from_table.into(),
            from_column: from_column.into(),
            to_table: to_table.into(),
            to_column: to_column.into(),
            provenance: FkProvenance::DeclaredFk,
        }
    }

    pub fn is_self_reference(&self) -> bool {
        self.from_table.eq_ignore_ascii_case(&self.to_table)
    }

    /// True when the edge joins `a` and `b` in either direction.
    pub fn connects(&self, a: &str, b: &str) -> bool {
        (self.from_table.eq_ignore_ascii_case(a) && self.to_table.eq_ignore_ascii_case(b))
            || (self.from_table.eq_ignore_ascii_case(b) && self.to_table.eq_ignore_ascii_case(a))
    }
}

impl fmt::Display for ForeignKeyEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{} -> {}.{}",
            self.from_table, self.from_column, self.to_table, self.to_column
        )
    }
}

/// Tables, columns and foreign keys of one database.
///
/// Construction through [`Schema::new`] enforces the naming invariants: table
/// names are unique ignoring case, column names are non-empty and unique per
/// table ignoring case, and every foreign key points at existing columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub database_id: String,
    tables: Vec<TableDef>,
    foreign_keys: Vec<ForeignKeyEdge>,
}

impl Schema {
    pub fn new(
        database_id: impl Into<String>,
        tables: Vec<TableDef>,
        foreign_keys: Vec<ForeignKeyEdge>,
    ) -> Result<Self, SchemaError> {
        let mut seen = HashSet::new();
        for table in &tables {
            if table.name.trim().is_empty() {
                return Err(SchemaError::EmptyTableName);
            }
            if !seen.insert(table.name.to_lowercase()) {
                return Err(SchemaError::DuplicateTable(table.name.clone()));
            }
            let mut cols = HashSet::new();
            for col in &table.columns {
                if col.name.trim().is_empty() {
                    return Err(SchemaError::EmptyColumnName(table.name.clone()));
                }
                if !cols.insert(col.name.to_lowercase()) {
                    return Err(SchemaError::DuplicateColumn {
                        table: table.name.clone(),
                        column: col.name.clone(),
                    });
                }
            }
        }
        let mut schema = Self {
            database_id: database_id.into(),
            tables,
            foreign_keys: Vec::with_capacity(foreign_keys.len()),
        };
        for fk in foreign_keys {
            let fk = schema
                .canonicalize_fk(&fk)
                .ok_or_else(|| SchemaError::DanglingFkReference(fk.to_string()))?;
            schema.foreign_keys.push(fk);
        }
        Ok(schema)
    }

    pub fn tables(&self) -> &[TableDef] {
        &self.tables
    }

    pub fn foreign_keys(&self) -> &[ForeignKeyEdge] {
        &self.foreign_keys
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables
            .iter()
            .find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables
            .iter()
            .position(|t| t.name.eq_ignore_ascii_case(name))
    }

    /// Resolves a table name case-insensitively to its canonical spelling.
    pub fn resolve_table(&self, name: &str) -> Option<&str> {
        self.table(name).map(|t| t.name.as_str())
    }

    /// Rewrites the FK's identifiers to canonical casing; `None` if any endpoint is missing.
    fn canonicalize_fk(&self, fk: &ForeignKeyEdge) -> Option<ForeignKeyEdge> {
        let from = self.table(&fk.from_table)?;
        let to = self.table(&fk.to_table)?;
        let from_col = from.column(&fk.from_column)?;
        let to_col = to.column(&fk.to_column)?;
        Some(ForeignKeyEdge {
            from_table: from.name.clone(),
            from_column: from_col.name.clone(),
            to_table: to.name.clone(),
            to_column: to_col.name.clone(),
            provenance: fk.provenance,
        })
    }
}

/// Result of ingestion: the schema plus non-fatal problems found on the way.
#[derive(Debug, Clone)]
pub struct IngestedSchema {
    pub schema: Schema,
    pub warnings: Vec<String>,
}

/// Reads table, column and foreign-key metadata from a SQLite database file.
///
/// The file is opened read-only. Foreign keys whose target table or column does
/// not exist are dropped and reported in `warnings`.
pub fn ingest_sqlite(path: &Path) -> Result<IngestedSchema, SchemaError> {
    if !path.is_file() {
        return Err(SchemaError::FileNotFound(path.display().to_string()));
    }
    let database_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let mut header = Vec::with_capacity(16);
    fs::File::open(path)?.take(16).read_to_end(&mut header)?;
    if header.is_empty() {
        return Ok(IngestedSchema {
            schema: Schema::new(database_id, Vec::new(), Vec::new())?,
            warnings: Vec::new(),
        });
    }
    if header.as_slice() != SQLITE_MAGIC {
        return Err(SchemaError::NotADatabase(path.display().to_string()));
    }

    let conn = Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )?;

    let names: Vec<String> = {
        let mut stmt = conn.prepare(
            "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' ORDER BY rowid",
        )?;
        let rows = stmt.query_map([], |row| row.get::<_, String>(0))?;
        rows.collect::<Result<_, _>>()?
    };

    let mut tables = Vec::with_capacity(names.len());
    let mut pk_columns: Vec<Vec<String>> = Vec::with_capacity(names.len());
    for name in &names {
        let mut stmt =
            conn.prepare("SELECT name, type, pk FROM pragma_table_info(?1) ORDER BY cid")?;
        let mut pks: Vec<(i64, String)> = Vec::new();
        let columns = stmt
            .query_map([name], |row| {
                let col: String = row.get(0)?;
                let ty: Option<String> = row.get(1)?;
                let pk: i64 = row.get(2)?;
                Ok((col, ty.unwrap_or_default(), pk))
            })?
            .map(|r| {
                r.map(|(col, ty, pk)| {
                    if pk > 0 {
                        pks.push((pk, col.clone()));
                    }
                    ColumnDef::new(col, ty, pk > 0)
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        pks.sort();
        pk_columns.push(pks.into_iter().map(|(_, c)| c).collect());
        tables.push(TableDef::new(name.clone(), columns));
    }

    let mut raw_fks = Vec::new();
    for name in &names {
        let mut stmt = conn.prepare(
            "SELECT \"table\", \"from\", \"to\", seq FROM pragma_foreign_key_list(?1) ORDER BY id, seq",
        )?;
        let rows = stmt.query_map([name], |row| {
            Ok((
                row.get::<_, String>(0)?,
                row.get::<_, String>(1)?,
                row.get::<_, Option<String>>(2)?,
                row.get::<_, i64>(3)?,
            ))
        })?;
        for row in rows {
            raw_fks.push((name.clone(), row?));
        }
    }

    let probe = Schema::new(database_id.clone(), tables.clone(), Vec::new())?;
    let mut warnings = Vec::new();
    let mut foreign_keys: Vec<ForeignKeyEdge> = Vec::new();
    for (from_table, (to_table, from_column, to_column, seq)) in raw_fks {
        // A NULL target column means the parent's primary key, matched by position.
        let to_column = match to_column {
            Some(c) => Some(c),
            None => probe
                .table_index(&to_table)
                .and_then(|i| pk_columns[i].get(seq as usize).cloned()),
        };
        let candidate = ForeignKeyEdge::declared(
            from_table.clone(),
            from_column.clone(),
            to_table.clone(),
            to_column.clone().unwrap_or_default(),
        );
        match probe.canonicalize_fk(&candidate) {
            Some(fk) => {
                if !foreign_keys.contains(&fk) {
                    foreign_keys.push(fk);
                }
            }
            None => warnings.push(format!(
                "dropped foreign key {}.{} -> {}.{}: referenced table or column does not exist",
                from_table,
                from_column,
                to_table,
                to_column.as_deref().unwrap_or("?")
            )),
        }
    }

    Ok(IngestedSchema {
        schema: Schema::new(database_id, tables, foreign_keys)?,
        warnings,
    })
}

/// On-disk JSON layout of a schema document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaDocument {
    pub db_id: String,
    pub tables: Vec<DocumentTable>,
    pub foreign_keys: Vec<DocumentForeignKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentTable {
    pub name: String,
    pub columns: Vec<DocumentColumn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentColumn {
    pub name: String,
    #[serde(rename = "type")]
    pub column_type: String,
    pub primary_key: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentForeignKey {
    pub from_table: String,
    pub from_column: String,
    pub to_table: String,
    pub to_column: String,
}

impl SchemaDocument {
    pub fn from_schema(schema: &Schema) -> Self {
        Self {
            db_id: schema.database_id.clone(),
            tables: schema
                .tables()
                .iter()
                .map(|t| DocumentTable {
                    name: t.name.clone(),
                    columns: t
                        .columns
                        .iter()
                        .map(|c| DocumentColumn {
                            name: c.name.clone(),
                            column_type: c.declared_type.clone(),
                            primary_key: c.is_primary_key,
                        })
                        .collect(),
                })
                .collect(),
            foreign_keys: schema
                .foreign_keys()
                .iter()
                .map(|fk| DocumentForeignKey {
                    from_table: fk.from_table.clone(),
                    from_column: fk.from_column.clone(),
                    to_table: fk.to_table.clone(),
                    to_column: fk.to_column.clone(),
                })
                .collect(),
        }
    }

    pub fn into_schema(self) -> Result<Schema, SchemaError> {
        let tables = self
            .tables
            .into_iter()
            .map(|t| {
                TableDef::new(
                    t.name,
                    t.columns
                        .into_iter()
                        .map(|c| ColumnDef::new(c.name, c.column_type, c.primary_key))
                        .collect(),
                )
            })
            .collect();
        let fks = self
            .foreign_keys
            .into_iter()
            .map(|fk| {
                ForeignKeyEdge::declared(fk.from_table, fk.from_column, fk.to_table, fk.to_column)
            })
            .collect();
        Schema::new(self.db_id, tables, fks)
    }

    pub fn parse(text: &str) -> Result<Self, SchemaError> {
        serde_json::from_str(text).map_err(|e| SchemaError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema document serializes")
    }
}

pub fn ingest_schema_document(path: &Path) -> Result<Schema, SchemaError> {
    if !path.is_file() {
        return Err(SchemaError::FileNotFound(path.display().to_string()));
    }
    let text = fs::read_to_string(path)?;
    SchemaDocument::parse(&text)?.into_schema()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(json: &str) -> Result<Schema, SchemaError> {
        SchemaDocument::parse(json)?.into_schema()
    }

    #[test]
    fn document_with_three_tables_two_fks() {
        let schema = doc(r#"{
            "db_id": "shop",
            "tables": [
                {"name": "a", "columns": [{"name": "id", "type": "INTEGER", "primary_key": true}]},
                {"name": "b", "columns": [{"name": "id", "type": "INTEGER", "primary_key": true}, {"name": "a_id", "type": "INTEGER", "primary_key": false}]},
                {"name": "c", "columns": [{"name": "b_id", "type": "INTEGER", "primary_key": false}]}
            ],
            "foreign_keys": [
                {"from_table": "b", "from_column": "a_id", "to_table": "a", "to_column": "id"},
                {"from_table": "c", "from_column": "b_id", "to_table": "b", "to_column": "id"}
            ]
        }"#)
        .unwrap();
        assert_eq!(schema.tables().len(), 3);
        assert_eq!(schema.foreign_keys().len(), 2);
        assert_eq!(schema.database_id, "shop");
    }

    #[test]
    fn duplicate_table_differing_case() {
        let err = doc(r#"{"db_id": "x", "tables": [
            {"name": "orders", "columns": []}, {"name": "ORDERS", "columns": []}
        ], "foreign_keys": []}"#)
        .unwrap_err();
        assert!(matches!(err, SchemaError::DuplicateTable(ref t) if t == "ORDERS"));
    }

    #[test]
    fn dangling_reference_rejected() {
        let err = doc(r#"{"db_id": "x", "tables": [
            {"name": "a", "columns": [{"name": "id", "type": "", "primary_key": true}]}
        ], "foreign_keys": [{"from_table": "a", "from_column": "id", "to_table": "zzz", "to_column": "id"}]}"#)
        .unwrap_err();
        assert!(matches!(err, SchemaError::DanglingFkReference(_)));
    }

    #[test]
    fn parse_error_carries_position() {
        let err = doc("{\n  \"db_id\": 3\n}").unwrap_err();
        match err {
            SchemaError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_columns_case_insensitive() {
        let err = Schema::new(
            "x",
            vec![TableDef::new(
                "t",
                vec![
                    ColumnDef::new("Id", "", true),
                    ColumnDef::new("ID", "", false),
                ],
            )],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, SchemaError::DuplicateColumn { .. }));
    }

    #[test]
    fn fk_casing_is_canonicalized() {
        let schema = Schema::new(
            "x",
            vec![
                TableDef::new("Users", vec![ColumnDef::new("UserId", "", true)]),
                TableDef::new("posts", vec![ColumnDef::new("author", "", false)]),
            ],
            vec![ForeignKeyEdge::declared(
                "POSTS", "AUTHOR", "users", "userid",
            )],
        )
        .unwrap();
        assert_eq!(
            schema.foreign_keys()[0],
            ForeignKeyEdge::declared("posts", "author", "Users", "UserId")
        );
        assert_eq!(schema.resolve_table("USERS"), Some("Users"));
    }

    #[test]
    fn missing_file() {
        let err = ingest_sqlite(Path::new("/definitely/not/here.sqlite")).unwrap_err();
        assert!(matches!(err, SchemaError::FileNotFound(_)));
    }
}
