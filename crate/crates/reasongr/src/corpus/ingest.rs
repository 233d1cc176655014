//! JSON corpus ingestion. The input is a UTF-8 JSON array of objects with
//! keys `id`, `pre_text`, `post_text`, `table`, and an optional `qa.question`.

use std::collections::HashSet;
use std::path::Path;

use serde_json::Value;

use super::Document;
use crate::error::{Error, Result};

/// Ingested documents plus warnings for ids that did not parse cleanly.
#[derive(Debug, Clone)]
pub struct CorpusIngest {
    pub documents: Vec<Document>,
    pub warnings: Vec<String>,
}

/// Reads and validates a corpus file. Company and year come from the raw id
/// split on `/` (element 0 and 1); non-conforming ids fall back to company
/// `unk` and year `0000` with a warning rather than an error.
pub fn ingest_corpus(path: &Path) -> Result<CorpusIngest> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let value: Value = serde_json::from_str(&raw).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        offset: byte_offset(&raw, e.line(), e.column()),
        message: e.to_string(),
    })?;

    let elements = value.as_array().ok_or_else(|| Error::Schema {
        index: 0,
        key: "(root)".into(),
        message: "expected a JSON array of documents".into(),
    })?;

    let mut documents = Vec::with_capacity(elements.len());
    let mut warnings = Vec::new();
    let mut seen_ids = HashSet::new();

    for (index, element) in elements.iter().enumerate() {
        let doc = parse_element(index, element, &mut warnings)?;
        if !seen_ids.insert(doc.raw_id.clone()) {
            return Err(Error::Duplicate {
                what: "raw_id".into(),
                value: doc.raw_id,
            });
        }
        documents.push(doc);
    }

    Ok(CorpusIngest { documents, warnings })
}

fn parse_element(index: usize, element: &Value, warnings: &mut Vec<String>) -> Result<Document> {
    let obj = element.as_object().ok_or_else(|| Error::Schema {
        index,
        key: "(element)".into(),
        message: "expected an object".into(),
    })?;

    let raw_id = require_str(index, obj, "id")?.to_string();
    let pre_text = require_string_list(index, obj, "pre_text")?;
    let post_text = require_string_list(index, obj, "post_text")?;
    let table = require_table(index, obj)?;
    let question = obj
        .get("qa")
        .and_then(|qa| qa.get("question"))
        .and_then(Value::as_str)
        .map(str::to_string);

    let (company, year) = split_raw_id(&raw_id, warnings);

    Ok(Document {
        raw_id,
        company,
        year,
        pre_text,
        post_text,
        table,
        question,
    })
}

fn split_raw_id(raw_id: &str, warnings: &mut Vec<String>) -> (String, String) {
    let parts: Vec<&str> = raw_id.split('/').collect();
    if parts.len() < 2 {
        warnings.push(format!(
            "id `{raw_id}`: not of the form company/year/..., using unk/0000"
        ));
        return ("unk".to_string(), "0000".to_string());
    }
    let company = if parts[0].is_empty() {
        warnings.push(format!("id `{raw_id}`: empty company segment, using `unk`"));
        "unk".to_string()
    } else {
        parts[0].to_string()
    };
    let year = if is_valid_year(parts[1]) {
        parts[1].to_string()
    } else {
        warnings.push(format!("id `{raw_id}`: no valid year segment, using `0000`"));
        "0000".to_string()
    };
    (company, year)
}

fn is_valid_year(s: &str) -> bool {
    s.len() == 4
        && s.bytes().all(|b| b.is_ascii_digit())
        && (1900..=2100).contains(&s.parse::<i32>().unwrap_or(0))
}

fn require_str<'a>(
    index: usize,
    obj: &'a serde_json::Map<String, Value>,
    key: &str,
) -> Result<&'a str> {
    obj.get(key).and_then(Value::as_str).ok_or_else(|| Error::Schema {
        index,
        key: key.into(),
        message: "missing or not a string".into(),
    })
}

fn require_string_list(
    index: usize,
    obj: &serde_json::Map<String, Value>,
    key: &str,
) -> Result<Vec<String>> {
    let arr = obj.get(key).and_then(Value::as_array).ok_or_else(|| Error::Schema {
        index,
        key: key.into(),
        message: "missing or not an array".into(),
    })?;
    arr.iter()
        .map(|v| {
            v.as_str().map(str::to_string).ok_or_else(|| Error::Schema {
                index,
                key: key.into(),
                message: "array element is not a string".into(),
            })
        })
        .collect()
}

fn require_table(index: usize, obj: &serde_json::Map<String, Value>) -> Result<Vec<Vec<String>>> {
    let arr = obj.get("table").and_then(Value::as_array).ok_or_else(|| Error::Schema {
        index,
        key: "table".into(),
        message: "missing or not an array".into(),
    })?;
    let mut rows = Vec::with_capacity(arr.len());
    for row in arr {
        let cells = row.as_array().ok_or_else(|| Error::Schema {
            index,
            key: "table".into(),
            message: "row is not an array".into(),
        })?;
        let row: Vec<String> = cells
            .iter()
            .map(|c| match c {
                Value::String(s) => Ok(s.clone()),
                // numeric cells are accepted and stringified verbatim
                Value::Number(n) => Ok(n.to_string()),
                _ => Err(Error::Schema {
                    index,
                    key: "table".into(),
                    message: "cell is neither string nor number".into(),
                }),
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if let Some(width) = rows.first().map(Vec::len) {
        if width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::Schema {
                index,
                key: "table".into(),
                message: "rows must all have equal length >= 1".into(),
            });
        }
    }
    Ok(rows)
}

/// Byte offset of a 1-based (line, column) position in `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len() + 1;
    }
    text.len()
}
