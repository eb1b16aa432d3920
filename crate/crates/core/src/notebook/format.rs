//! Jupyter notebook format v4 (JSON) reading and writing.
//!
//! Prompt cells are written as plain code cells. Injected cells carry their
//! provenance in cell metadata under the `eui` key.

use std::path::Path;

use serde::Deserialize;
use serde_json::{json, Map, Value};

use super::{classify_cell, Cell, CellId, CellKind, NotebookDoc, NotebookError, Origin, Output, Result};

const META_KEY: &str = "eui";

#[derive(Deserialize)]
struct RawNotebook {
    cells: Vec<RawCell>,
    #[serde(default)]
    metadata: Map<String, Value>,
    nbformat: u32,
    nbformat_minor: u32,
}

#[derive(Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum RawCellType {
    Code,
    Markdown,
    Raw,
}

#[derive(Deserialize)]
struct RawCell {
    cell_type: RawCellType,
    #[serde(default)]
    id: Option<String>,
    source: Multiline,
    #[serde(default)]
    metadata: Map<String, Value>,
    #[serde(default)]
    outputs: Vec<RawOutput>,
    #[serde(default)]
    execution_count: Option<u32>,
    #[serde(default)]
    attachments: Option<Value>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Multiline {
    One(String),
    Many(Vec<String>),
}

impl Multiline {
    fn joined(self) -> String {
        match self {
            Multiline::One(s) => s,
            Multiline::Many(parts) => parts.concat(),
        }
    }
}

#[derive(Deserialize)]
#[serde(tag = "output_type", rename_all = "snake_case")]
enum RawOutput {
    Stream {
        name: String,
        text: Multiline,
    },
    ExecuteResult {
        execution_count: Option<u32>,
        data: Map<String, Value>,
        #[serde(default)]
        metadata: Map<String, Value>,
    },
    DisplayData {
        data: Map<String, Value>,
        #[serde(default)]
        metadata: Map<String, Value>,
    },
    Error {
        ename: String,
        evalue: String,
        traceback: Vec<String>,
    },
}

impl From<RawOutput> for Output {
    fn from(raw: RawOutput) -> Self {
        match raw {
            RawOutput::Stream { name, text } => Output::Stream { name, text: text.joined() },
            RawOutput::ExecuteResult { execution_count, data, metadata } => {
                Output::ExecuteResult { execution_count, data, metadata }
            }
            RawOutput::DisplayData { data, metadata } => Output::DisplayData { data, metadata },
            RawOutput::Error { ename, evalue, traceback } => Output::Error { ename, evalue, traceback },
        }
    }
}

fn malformed(location: impl Into<String>, message: impl Into<String>) -> NotebookError {
    NotebookError::MalformedNotebook { location: location.into(), message: message.into() }
}

/// Parses notebook interchange text. Cells without ids get fresh ones.
pub fn load_notebook(text: &str) -> Result<NotebookDoc> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawNotebook = serde_path_to_error::deserialize(de).map_err(|err| {
        let inner = err.inner();
        let path = err.path().to_string();
        let location = if path == "." || path.is_empty() {
            format!("line {}, column {}", inner.line(), inner.column())
        } else {
            format!("{path} (line {}, column {})", inner.line(), inner.column())
        };
        malformed(location, inner.to_string())
    })?;
    if raw.nbformat != 4 {
        return Err(malformed("nbformat", format!("unsupported nbformat {}, expected 4", raw.nbformat)));
    }

    let mut doc = NotebookDoc::new();
    doc.metadata = raw.metadata;
    doc.nbformat_minor = raw.nbformat_minor;
    let mut pending_ids = Vec::with_capacity(raw.cells.len());
    for (index, rc) in raw.cells.into_iter().enumerate() {
        if let Some(id) = &rc.id {
            if !CellId::is_valid(id) {
                return Err(malformed(format!("cells[{index}].id"), format!("invalid cell id `{id}`")));
            }
        }
        pending_ids.push(rc.id.clone());
        let cell = cell_from_raw(index, rc)?;
        doc.cells.push(cell);
    }

    // Assign ids after every explicit one is known so generated ids never clash.
    for (index, id) in pending_ids.iter().enumerate() {
        if let Some(id) = id {
            if doc.cells[..index].iter().any(|c| c.id.as_str() == id) {
                return Err(malformed(format!("cells[{index}].id"), format!("duplicate cell id `{id}`")));
            }
        }
    }
    for index in 0..doc.cells.len() {
        if pending_ids[index].is_none() {
            let mut n = index + 1;
            let id = loop {
                let candidate = CellId(format!("cell-{n}"));
                if doc.index_of(&candidate).is_none() {
                    break candidate;
                }
                n += 1;
            };
            doc.cells[index].id = id;
        }
    }
    Ok(doc)
}

fn cell_from_raw(index: usize, rc: RawCell) -> Result<Cell> {
    let source = rc.source.joined();
    let mut metadata = rc.metadata;
    let (origin, injected_for) = match metadata.remove(META_KEY) {
        Some(Value::Object(eui)) => {
            let injected = eui.get("origin").and_then(Value::as_str) == Some("injected");
            let prompt = eui.get("prompt_cell").and_then(Value::as_str).map(CellId::from);
            if injected {
                (Origin::Injected, prompt)
            } else {
                (Origin::Authored, None)
            }
        }
        Some(other) => {
            return Err(malformed(
                format!("cells[{index}].metadata.{META_KEY}"),
                format!("expected an object, found {other}"),
            ))
        }
        None => (Origin::Authored, None),
    };
    let kind = match rc.cell_type {
        RawCellType::Code => classify_cell(&source),
        RawCellType::Markdown | RawCellType::Raw => CellKind::Markdown,
    };
    if origin == Origin::Injected && kind != CellKind::Code {
        return Err(malformed(format!("cells[{index}]"), "injected cells must be code cells"));
    }
    Ok(Cell {
        id: CellId(rc.id.unwrap_or_default()),
        kind,
        source,
        outputs: rc.outputs.into_iter().map(Output::from).collect(),
        origin,
        injected_for,
        execution_count: rc.execution_count,
        metadata,
        attachments: rc.attachments,
        raw: rc.cell_type == RawCellType::Raw,
    })
}

fn source_lines(source: &str) -> Value {
    Value::Array(source.split_inclusive('\n').map(|l| Value::String(l.to_string())).collect())
}

fn cell_to_json(cell: &Cell) -> Value {
    let mut metadata = cell.metadata.clone();
    if cell.origin == Origin::Injected {
        let mut eui = Map::new();
        eui.insert("origin".into(), json!("injected"));
        if let Some(prompt) = &cell.injected_for {
            eui.insert("prompt_cell".into(), json!(prompt.as_str()));
        }
        metadata.insert(META_KEY.into(), Value::Object(eui));
    }
    let mut obj = Map::new();
    obj.insert("id".into(), json!(cell.id.as_str()));
    obj.insert("metadata".into(), Value::Object(metadata));
    obj.insert("source".into(), source_lines(&cell.source));
    if cell.is_code_typed() {
        obj.insert("cell_type".into(), json!("code"));
        obj.insert("execution_count".into(), json!(cell.execution_count));
        obj.insert("outputs".into(), serde_json::to_value(&cell.outputs).unwrap_or(Value::Array(vec![])));
    } else {
        obj.insert("cell_type".into(), json!(if cell.raw { "raw" } else { "markdown" }));
        if let Some(attachments) = &cell.attachments {
            obj.insert("attachments".into(), attachments.clone());
        }
    }
    Value::Object(obj)
}

/// Serializes to notebook format 4.5 text (one-space indent, sorted keys).
pub fn save_notebook(doc: &NotebookDoc) -> String {
    let value = json!({
        "cells": doc.cells.iter().map(cell_to_json).collect::<Vec<_>>(),
        "metadata": doc.metadata,
        "nbformat": 4,
        // cell ids need 4.5
        "nbformat_minor": doc.nbformat_minor.max(5),
    });
    let mut out = Vec::new();
    let fmt = serde_json::ser::PrettyFormatter::with_indent(b" ");
    let mut ser = serde_json::Serializer::with_formatter(&mut out, fmt);
    serde::Serialize::serialize(&value, &mut ser).expect("json values always serialize");
    let mut text = String::from_utf8(out).expect("serde_json emits utf-8");
    text.push('\n');
    text
}

pub fn read_notebook(path: &Path) -> Result<NotebookDoc> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| NotebookError::Io { path: path.display().to_string(), source })?;
    load_notebook(&text)
}

pub fn write_notebook(path: &Path, doc: &NotebookDoc) -> Result<()> {
    std::fs::write(path, save_notebook(doc))
        .map_err(|source| NotebookError::Io { path: path.display().to_string(), source })
}
