//! Notebook document model.
//!
//! A [`NotebookDoc`] is an ordered list of [`Cell`]s. Code cells whose source
//! starts with the `%prompt` marker are *prompt cells*: they hold a natural
//! language request rather than executable code. On disk they stay ordinary
//! code cells (see [`format`]), so stock notebook tooling can still open the
//! file.

pub mod format;

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub use format::{load_notebook, read_notebook, save_notebook, write_notebook};

/// Marker that turns a code cell into a prompt cell.
pub const PROMPT_MARKER: &str = "%prompt";

#[derive(Debug, Error)]
pub enum NotebookError {
    #[error("unknown cell `{0}`")]
    UnknownCell(CellId),
    #[error("cell `{0}` is not a prompt cell")]
    NotAPromptCell(CellId),
    #[error("malformed notebook at {location}: {message}")]
    MalformedNotebook { location: String, message: String },
    #[error("injected cell source must not start with {PROMPT_MARKER}")]
    PromptMarkerInInjectedCell,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, NotebookError>;

/// Opaque cell identifier, unique within a document.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellId(String);

impl CellId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// nbformat 4.5 id rule: 1-64 chars of `[A-Za-z0-9_-]`.
    pub fn is_valid(id: &str) -> bool {
        !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for CellId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Code,
    Markdown,
    Prompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    #[default]
    Authored,
    Injected,
}

/// One entry in a cell's output area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "output_type", rename_all = "snake_case")]
pub enum Output {
    Stream {
        name: String,
        text: String,
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

impl Output {
    pub fn stdout(text: impl Into<String>) -> Self {
        Output::Stream { name: "stdout".into(), text: text.into() }
    }

    pub fn stderr(text: impl Into<String>) -> Self {
        Output::Stream { name: "stderr".into(), text: text.into() }
    }

    pub fn text_result(execution_count: Option<u32>, repr: impl Into<String>) -> Self {
        let mut data = Map::new();
        data.insert("text/plain".into(), Value::String(repr.into()));
        Output::ExecuteResult { execution_count, data, metadata: Map::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    id: CellId,
    kind: CellKind,
    source: String,
    outputs: Vec<Output>,
    origin: Origin,
    /// Prompt cell an injected cell was generated from.
    injected_for: Option<CellId>,
    execution_count: Option<u32>,
    metadata: Map<String, Value>,
    attachments: Option<Value>,
    raw: bool,
}

impl Cell {
    /// A code-typed cell; the kind (code or prompt) follows from the source.
    pub fn code(id: impl Into<CellId>, source: impl Into<String>) -> Self {
        let source = source.into();
        Self {
            id: id.into(),
            kind: classify_cell(&source),
            source,
            outputs: Vec::new(),
            origin: Origin::Authored,
            injected_for: None,
            execution_count: None,
            metadata: Map::new(),
            attachments: None,
            raw: false,
        }
    }

    pub fn markdown(id: impl Into<CellId>, source: impl Into<String>) -> Self {
        Self { kind: CellKind::Markdown, ..Self::code(id, source) }
    }

    pub fn id(&self) -> &CellId {
        &self.id
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn outputs(&self) -> &[Output] {
        &self.outputs
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn injected_for(&self) -> Option<&CellId> {
        self.injected_for.as_ref()
    }

    pub fn execution_count(&self) -> Option<u32> {
        self.execution_count
    }

    pub fn is_code_typed(&self) -> bool {
        matches!(self.kind, CellKind::Code | CellKind::Prompt)
    }
}

impl From<String> for CellId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

/// Classifies a code-typed cell source as prompt or code.
///
/// `%prompt` must be the first non-whitespace token: it may be preceded by
/// whitespace and must be followed by whitespace or the end of the source.
pub fn classify_cell(source: &str) -> CellKind {
    if request_text(source).is_some() {
        CellKind::Prompt
    } else {
        CellKind::Code
    }
}

fn request_text(source: &str) -> Option<&str> {
    let rest = source.trim_start().strip_prefix(PROMPT_MARKER)?;
    match rest.chars().next() {
        None => Some(""),
        Some(c) if c.is_whitespace() => Some(rest.trim()),
        Some(_) => None,
    }
}

/// The natural-language request held by a prompt cell, marker and
/// surrounding whitespace removed. Interior whitespace is preserved.
pub fn extract_request(cell: &Cell) -> Result<String> {
    if cell.kind != CellKind::Prompt {
        return Err(NotebookError::NotAPromptCell(cell.id.clone()));
    }
    request_text(&cell.source).map(str::to_string).ok_or_else(|| NotebookError::NotAPromptCell(cell.id.clone()))
}

/// Code a prompt cell is asked about.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeContext {
    /// Source of the nearest code cell above the prompt cell, or empty.
    pub focal_code: String,
    /// Sources of every code cell above the focal cell, in document order.
    pub preamble: Vec<String>,
    pub prompt_cell_id: CellId,
}

impl CodeContext {
    pub fn empty(prompt_cell_id: CellId) -> Self {
        Self { focal_code: String::new(), preamble: Vec::new(), prompt_cell_id }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NotebookDoc {
    cells: Vec<Cell>,
    version: u64,
    metadata: Map<String, Value>,
    nbformat_minor: u32,
}

impl NotebookDoc {
    pub fn new() -> Self {
        Self { nbformat_minor: 5, ..Default::default() }
    }

    /// Builds a document, rejecting duplicate cell ids.
    pub fn from_cells(cells: Vec<Cell>) -> Result<Self> {
        let mut doc = Self::new();
        for cell in cells {
            if doc.index_of(&cell.id).is_some() {
                return Err(NotebookError::MalformedNotebook {
                    location: format!("cells[{}].id", doc.cells.len()),
                    message: format!("duplicate cell id `{}`", cell.id),
                });
            }
            doc.cells.push(cell);
        }
        Ok(doc)
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn metadata(&self) -> &Map<String, Value> {
        &self.metadata
    }

    pub fn index_of(&self, id: &CellId) -> Option<usize> {
        self.cells.iter().position(|c| &c.id == id)
    }

    pub fn cell(&self, id: &CellId) -> Result<&Cell> {
        self.cells.iter().find(|c| &c.id == id).ok_or_else(|| NotebookError::UnknownCell(id.clone()))
    }

    fn cell_mut(&mut self, id: &CellId) -> Result<&mut Cell> {
        self.cells.iter_mut().find(|c| &c.id == id).ok_or_else(|| NotebookError::UnknownCell(id.clone()))
    }

    pub fn prompt_cell(&self, id: &CellId) -> Result<&Cell> {
        let cell = self.cell(id)?;
        if cell.kind != CellKind::Prompt {
            return Err(NotebookError::NotAPromptCell(id.clone()));
        }
        Ok(cell)
    }

    /// Mints an id not used by any cell, of the form `{prefix}-{n}`.
    pub fn fresh_id(&self, prefix: &str) -> CellId {
        let mut n = self.cells.len() + 1;
        loop {
            let candidate = CellId(format!("{prefix}-{n}"));
            if self.index_of(&candidate).is_none() {
                return candidate;
            }
            n += 1;
        }
    }

    pub fn build_code_context(&self, prompt_cell_id: &CellId) -> Result<CodeContext> {
        let index = self.index_of(prompt_cell_id).ok_or_else(|| NotebookError::UnknownCell(prompt_cell_id.clone()))?;
        if self.cells[index].kind != CellKind::Prompt {
            return Err(NotebookError::NotAPromptCell(prompt_cell_id.clone()));
        }
        let mut preamble: Vec<String> =
            self.cells[..index].iter().filter(|c| c.kind == CellKind::Code).map(|c| c.source.clone()).collect();
        let focal_code = preamble.pop().unwrap_or_default();
        Ok(CodeContext { focal_code, preamble, prompt_cell_id: prompt_cell_id.clone() })
    }

    /// Inserts a new code-typed cell directly below `anchor` and returns its id.
    pub fn insert_cell_below(&mut self, anchor: &CellId, source: impl Into<String>, origin: Origin) -> Result<CellId> {
        let index = self.index_of(anchor).ok_or_else(|| NotebookError::UnknownCell(anchor.clone()))?;
        let source = source.into();
        if origin == Origin::Injected && classify_cell(&source) == CellKind::Prompt {
            return Err(NotebookError::PromptMarkerInInjectedCell);
        }
        let id = self.fresh_id(match origin {
            Origin::Injected => "injected",
            Origin::Authored => "cell",
        });
        let mut cell = Cell::code(id.clone(), source);
        cell.origin = origin;
        self.cells.insert(index + 1, cell);
        self.version += 1;
        Ok(id)
    }

    /// Injects generated code for a prompt cell. Each injection lands below the
    /// most recent cell injected for the same prompt, or below the prompt
    /// itself the first time. Returns `(anchor, new_cell)`.
    pub fn inject_below_prompt(
        &mut self,
        prompt_cell_id: &CellId,
        source: impl Into<String>,
    ) -> Result<(CellId, CellId)> {
        self.prompt_cell(prompt_cell_id)?;
        let anchor = self
            .cells
            .iter()
            .rev()
            .find(|c| c.origin == Origin::Injected && c.injected_for.as_ref() == Some(prompt_cell_id))
            .map(|c| c.id.clone())
            .unwrap_or_else(|| prompt_cell_id.clone());
        let id = self.insert_cell_below(&anchor, source, Origin::Injected)?;
        self.cell_mut(&id)?.injected_for = Some(prompt_cell_id.clone());
        Ok((anchor, id))
    }

    /// Replaces a cell's source; the kind is re-derived for code-typed cells.
    pub fn set_source(&mut self, id: &CellId, source: impl Into<String>) -> Result<()> {
        let cell = self.cell_mut(id)?;
        cell.source = source.into();
        if cell.is_code_typed() {
            cell.kind = classify_cell(&cell.source);
        }
        self.version += 1;
        Ok(())
    }

    pub fn set_outputs(&mut self, id: &CellId, outputs: Vec<Output>, execution_count: Option<u32>) -> Result<()> {
        let cell = self.cell_mut(id)?;
        cell.outputs = outputs;
        cell.execution_count = execution_count;
        self.version += 1;
        Ok(())
    }

    pub fn append_output(&mut self, id: &CellId, output: Output) -> Result<()> {
        self.cell_mut(id)?.outputs.push(output);
        self.version += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(cells: Vec<Cell>) -> NotebookDoc {
        NotebookDoc::from_cells(cells).unwrap()
    }

    fn ids(doc: &NotebookDoc) -> Vec<&str> {
        doc.cells().iter().map(|c| c.id().as_str()).collect()
    }

    #[test]
    fn classifies_prompt_cells() {
        assert_eq!(
            classify_cell("%prompt Show how the training performance changes over the epochs."),
            CellKind::Prompt
        );
        assert_eq!(classify_cell("import os"), CellKind::Code);
        assert_eq!(classify_cell("   %prompt visualize"), CellKind::Prompt);
        assert_eq!(classify_cell("\n\t%prompt"), CellKind::Prompt);
        assert_eq!(classify_cell("%promptly()"), CellKind::Code);
        assert_eq!(classify_cell("x = 1 # %prompt"), CellKind::Code);
        assert_eq!(classify_cell(""), CellKind::Code);
    }

    #[test]
    fn extracts_requests() {
        let req = |s: &str| extract_request(&Cell::code("p", s)).unwrap();
        assert_eq!(req("%prompt Visualize the training performance."), "Visualize the training performance.");
        assert_eq!(req("%prompt"), "");
        assert_eq!(
            req("%prompt   compile the model with optimizer and metrics  "),
            "compile the model with optimizer and metrics"
        );
        assert_eq!(req("%prompt first line\n  second  line \n"), "first line\n  second  line");
    }

    #[test]
    fn extract_rejects_non_prompt() {
        let err = extract_request(&Cell::code("c", "import os")).unwrap_err();
        assert!(matches!(err, NotebookError::NotAPromptCell(id) if id.as_str() == "c"));
        let md = Cell::markdown("m", "%prompt not really");
        assert_eq!(md.kind(), CellKind::Markdown);
        assert!(extract_request(&md).is_err());
    }

    #[test]
    fn code_context_examples() {
        let d = doc(vec![Cell::code("c1", "load df"), Cell::code("p", "%prompt plot")]);
        let ctx = d.build_code_context(&"p".into()).unwrap();
        assert_eq!(ctx.focal_code, "load df");
        assert!(ctx.preamble.is_empty());

        let d = doc(vec![Cell::code("p", "%prompt plot")]);
        let ctx = d.build_code_context(&"p".into()).unwrap();
        assert_eq!(ctx.focal_code, "");
        assert!(ctx.preamble.is_empty());

        let d = doc(vec![
            Cell::code("a", "A"),
            Cell::markdown("m", "notes"),
            Cell::code("b", "B"),
            Cell::code("p", "%prompt go"),
        ]);
        let ctx = d.build_code_context(&"p".into()).unwrap();
        assert_eq!(ctx.focal_code, "B");
        assert_eq!(ctx.preamble, vec!["A".to_string()]);
    }

    #[test]
    fn code_context_skips_other_prompts_and_later_cells() {
        let d = doc(vec![
            Cell::code("a", "A"),
            Cell::code("p0", "%prompt earlier"),
            Cell::code("b", "B"),
            Cell::markdown("m", "md"),
            Cell::code("p", "%prompt go"),
            Cell::code("c", "C"),
        ]);
        let ctx = d.build_code_context(&"p".into()).unwrap();
        assert_eq!(ctx.focal_code, "B");
        assert_eq!(ctx.preamble, vec!["A".to_string()]);
    }

    #[test]
    fn code_context_errors() {
        let d = doc(vec![Cell::code("a", "A")]);
        assert!(matches!(d.build_code_context(&"zz".into()), Err(NotebookError::UnknownCell(_))));
        assert!(matches!(d.build_code_context(&"a".into()), Err(NotebookError::NotAPromptCell(_))));
    }

    #[test]
    fn insert_below_examples() {
        let mut d = doc(vec![Cell::code("c1", "x"), Cell::code("p1", "%prompt go")]);
        let v0 = d.version();
        let id = d.insert_cell_below(&"p1".into(), "S", Origin::Injected).unwrap();
        assert_eq!(ids(&d), vec!["c1", "p1", id.as_str()]);
        assert_eq!(d.cell(&id).unwrap().source(), "S");
        assert_eq!(d.cell(&id).unwrap().kind(), CellKind::Code);
        assert_eq!(d.cell(&id).unwrap().origin(), Origin::Injected);
        assert!(d.version() > v0);

        let mut d = doc(vec![Cell::code("p1", "%prompt go"), Cell::code("c2", "y")]);
        let id = d.insert_cell_below(&"p1".into(), "S", Origin::Injected).unwrap();
        assert_eq!(ids(&d), vec!["p1", id.as_str(), "c2"]);

        assert!(matches!(
            d.insert_cell_below(&"nope".into(), "S", Origin::Injected),
            Err(NotebookError::UnknownCell(_))
        ));
        assert!(matches!(
            d.insert_cell_below(&"p1".into(), "%prompt again", Origin::Injected),
            Err(NotebookError::PromptMarkerInInjectedCell)
        ));
    }

    #[test]
    fn repeated_injection_appends_below_previous() {
        let mut d = doc(vec![Cell::code("p1", "%prompt go"), Cell::code("c2", "y")]);
        let (anchor1, first) = d.inject_below_prompt(&"p1".into(), "one").unwrap();
        let (anchor2, second) = d.inject_below_prompt(&"p1".into(), "two").unwrap();
        assert_eq!(anchor1.as_str(), "p1");
        assert_eq!(anchor2, first);
        assert_eq!(ids(&d), vec!["p1", first.as_str(), second.as_str(), "c2"]);
        assert_ne!(first, second);
    }

    #[test]
    fn injection_for_different_prompts_is_tracked_separately() {
        let mut d = doc(vec![Cell::code("p1", "%prompt a"), Cell::code("p2", "%prompt b")]);
        let (_, a1) = d.inject_below_prompt(&"p1".into(), "a1").unwrap();
        let (anchor, b1) = d.inject_below_prompt(&"p2".into(), "b1").unwrap();
        assert_eq!(anchor.as_str(), "p2");
        let (anchor, a2) = d.inject_below_prompt(&"p1".into(), "a2").unwrap();
        assert_eq!(anchor, a1);
        assert_eq!(ids(&d), vec!["p1", a1.as_str(), a2.as_str(), "p2", b1.as_str()]);
    }

    #[test]
    fn set_source_reclassifies() {
        let mut d = doc(vec![Cell::code("c", "x = 1")]);
        d.set_source(&"c".into(), "%prompt now a prompt").unwrap();
        assert_eq!(d.cell(&"c".into()).unwrap().kind(), CellKind::Prompt);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = NotebookDoc::from_cells(vec![Cell::code("a", "1"), Cell::code("a", "2")]).unwrap_err();
        assert!(matches!(err, NotebookError::MalformedNotebook { location, .. } if location == "cells[1].id"));
    }
}
