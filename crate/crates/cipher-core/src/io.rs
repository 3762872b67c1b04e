//! File formats: schema JSON, query-set JSON, microdata CSV, and
//! atomic JSON/CSV writing.
//!
//! Microdata CSV carries a header of attribute names and 0-based level
//! codes in the cells. Columns are matched to the schema by name, so
//! column order is free. All writers go through a temporary file in
//! the target directory and rename into place, so readers never see a
//! half-written file.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::error::{CipherError, Result};
use crate::tables::{Dataset, QuerySet, Schema};

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    attributes: Vec<crate::tables::Attribute>,
}

/// Parses a schema from `{"attributes": [{"name": .., "levels": [..]}]}`.
pub fn schema_from_str(text: &str) -> Result<Arc<Schema>> {
    let file: SchemaFile = serde_json::from_str(text)
        .map_err(|e| CipherError::invalid(format!("invalid schema JSON: {e}")))?;
    Ok(Arc::new(Schema::new(file.attributes)?))
}

/// Reads a schema from `{"attributes": [{"name": .., "levels": [..]}]}`.
pub fn read_schema(path: &Path) -> Result<Arc<Schema>> {
    let text = read_to_string(path)?;
    schema_from_str(&text)
        .map_err(|e| CipherError::invalid(format!("{}: {e}", path.display())))
}

pub fn write_schema(path: &Path, schema: &Schema) -> Result<()> {
    let file = SchemaFile { attributes: schema.attributes.clone() };
    write_json_atomic(path, &file)
}

/// Reads a query set from a JSON list of attribute-name lists, e.g.
/// `[["V1","V2"],["V2","V3"]]`.
pub fn read_queries(path: &Path, schema: &Schema) -> Result<QuerySet> {
    let text = read_to_string(path)?;
    let names: Vec<Vec<String>> = serde_json::from_str(&text).map_err(|e| {
        CipherError::invalid(format!("{}: invalid queries JSON: {e}", path.display()))
    })?;
    let mut subsets = Vec::with_capacity(names.len());
    for group in &names {
        subsets.push(schema.resolve(group)?);
    }
    QuerySet::new(schema, subsets)
}

pub fn write_queries(path: &Path, schema: &Schema, queries: &QuerySet) -> Result<()> {
    write_json_atomic(path, &queries.names(schema))
}

/// Reads microdata CSV with a header of attribute names and 0-based
/// level codes, matching columns to the schema by name.
pub fn read_microdata(path: &Path, schema: &Arc<Schema>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CipherError::invalid(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CipherError::invalid(format!("{}: {e}", path.display())))?
        .clone();

    let mut column_for_attr = vec![usize::MAX; schema.len()];
    let mut seen = vec![false; schema.len()];
    for (column, name) in headers.iter().enumerate() {
        let Some(attr) = schema.index_of(name) else {
            return Err(CipherError::invalid(format!(
                "{}: column '{name}' is not a schema attribute",
                path.display()
            )));
        };
        if seen[attr] {
            return Err(CipherError::invalid(format!(
                "{}: column '{name}' appears twice",
                path.display()
            )));
        }
        seen[attr] = true;
        column_for_attr[attr] = column;
    }
    for (attr, &present) in seen.iter().enumerate() {
        if !present {
            return Err(CipherError::invalid(format!(
                "{}: missing column for attribute '{}'",
                path.display(),
                schema.attributes[attr].name
            )));
        }
    }

    let mut rows: Vec<Vec<u32>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| CipherError::invalid(format!("{}: {e}", path.display())))?;
        let mut row = Vec::with_capacity(schema.len());
        for (attr, &column) in column_for_attr.iter().enumerate() {
            let field = record.get(column).ok_or_else(|| {
                CipherError::invalid(format!(
                    "{}: row {} is missing column {column}",
                    path.display(),
                    line + 2
                ))
            })?;
            let code: u32 = field.trim().parse().map_err(|_| {
                CipherError::invalid(format!(
                    "{}: row {}, attribute '{}': '{field}' is not a 0-based level code",
                    path.display(),
                    line + 2,
                    schema.attributes[attr].name
                ))
            })?;
            row.push(code);
        }
        rows.push(row);
    }
    Dataset::from_rows(schema.clone(), &rows)
}

/// Renders microdata CSV: attribute-name header, one row of 0-based
/// codes per record, schema column order.
pub fn microdata_to_string(dataset: &Dataset) -> Result<String> {
    let schema = dataset.schema();
    let mut buffer = Vec::new();
    {
        let mut writer = csv::Writer::from_writer(&mut buffer);
        writer.write_record(schema.attributes.iter().map(|a| a.name.as_str()))?;
        let mut field = String::new();
        for i in 0..dataset.len() {
            let record = dataset.record(i);
            writer.write_record(record.iter().map(|&code| {
                field.clear();
                use std::fmt::Write as _;
                let _ = write!(field, "{code}");
                field.clone()
            }))?;
        }
        writer.flush()?;
    }
    String::from_utf8(buffer).map_err(|e| CipherError::invalid(format!("csv rendering: {e}")))
}

/// Writes microdata CSV atomically in [`microdata_to_string`] form.
pub fn write_microdata(path: &Path, dataset: &Dataset) -> Result<()> {
    let rendered = microdata_to_string(dataset)?;
    write_bytes_atomic(path, rendered.as_bytes())
}

/// Serializes `value` as pretty JSON and renames it into place.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes_atomic(path, &bytes)
}

fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent)?;
    let mut file = tempfile::NamedTempFile::new_in(parent)?;
    file.write_all(bytes)?;
    file.persist(path).map_err(|e| CipherError::Io(e.error))?;
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| CipherError::invalid(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tables::Attribute;

    fn schema() -> Arc<Schema> {
        Arc::new(
            Schema::new(vec![
                Attribute::with_cardinality("V1", 2),
                Attribute::with_cardinality("V2", 3),
                Attribute::with_cardinality("V3", 2),
            ])
            .unwrap(),
        )
    }

    #[test]
    fn schema_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("schema.json");
        let original = schema();
        write_schema(&path, &original).unwrap();
        let read = read_schema(&path).unwrap();
        assert_eq!(read.as_ref(), original.as_ref());
    }

    #[test]
    fn queries_round_trip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queries.json");
        let schema = schema();
        let queries =
            QuerySet::new(&schema, vec![vec![0, 1], vec![1, 2]]).unwrap();
        write_queries(&path, &schema, &queries).unwrap();
        let read = read_queries(&path, &schema).unwrap();
        assert_eq!(read.subsets(), queries.subsets());

        std::fs::write(&path, r#"[["V1","V9"]]"#).unwrap();
        let err = read_queries(&path, &schema).unwrap_err();
        assert!(err.to_string().contains("V9"), "error should name the attribute: {err}");
    }

    #[test]
    fn microdata_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let schema = schema();
        let rows = vec![vec![0, 2, 1], vec![1, 0, 0], vec![1, 1, 1]];
        let data = Dataset::from_rows(schema.clone(), &rows).unwrap();
        write_microdata(&path, &data).unwrap();
        let read = read_microdata(&path, &schema).unwrap();
        assert_eq!(read.len(), 3);
        for i in 0..3 {
            assert_eq!(read.record(i), data.record(i));
        }
    }

    #[test]
    fn microdata_columns_match_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "V3,V1,V2\n1,0,2\n0,1,0\n").unwrap();
        let data = read_microdata(&path, &schema()).unwrap();
        assert_eq!(data.record(0), &[0, 2, 1]);
        assert_eq!(data.record(1), &[1, 0, 0]);
    }

    #[test]
    fn microdata_errors_are_specific() {
        let dir = tempfile::tempdir().unwrap();
        let schema = schema();

        let path = dir.path().join("missing.csv");
        std::fs::write(&path, "V1,V2\n0,0\n").unwrap();
        let err = read_microdata(&path, &schema).unwrap_err();
        assert!(err.to_string().contains("V3"));

        let path = dir.path().join("unknown.csv");
        std::fs::write(&path, "V1,V2,V3,V4\n0,0,0,0\n").unwrap();
        let err = read_microdata(&path, &schema).unwrap_err();
        assert!(err.to_string().contains("V4"));

        let path = dir.path().join("badcode.csv");
        std::fs::write(&path, "V1,V2,V3\n0,9,0\n").unwrap();
        assert!(read_microdata(&path, &schema).is_err());

        let path = dir.path().join("notnum.csv");
        std::fs::write(&path, "V1,V2,V3\n0,x,0\n").unwrap();
        let err = read_microdata(&path, &schema).unwrap_err();
        assert!(err.to_string().contains("level code"));
    }

    #[test]
    fn atomic_write_replaces_existing_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        write_json_atomic(&path, &serde_json::json!({"a": 1})).unwrap();
        write_json_atomic(&path, &serde_json::json!({"a": 2})).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"a\": 2"));
        // No stray temporaries left behind.
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name() != "report.json")
            .collect();
        assert!(leftovers.is_empty(), "stray files: {leftovers:?}");
    }
}
