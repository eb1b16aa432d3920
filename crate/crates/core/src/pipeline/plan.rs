use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::widgets::{NumericRange, WidgetKind};

/// One concrete next step proposed by the advisor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdvisorInstruction {
    pub text: String,
}

impl AdvisorInstruction {
    /// Trims `raw` and keeps its first paragraph; `None` if nothing is left.
    pub fn from_response(raw: &str) -> Option<Self> {
        static PARAGRAPH_BREAK: OnceLock<Regex> = OnceLock::new();
        let re = PARAGRAPH_BREAK.get_or_init(|| Regex::new(r"\n[ \t]*\r?\n").expect("valid regex"));
        let normalized = raw.replace("\r\n", "\n");
        let first = re.split(normalized.trim()).next().unwrap_or_default().trim();
        (!first.is_empty()).then(|| Self { text: first.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UIPlanElement {
    pub element_id: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub widget_kind: WidgetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<NumericRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UIPlan {
    pub elements: Vec<UIPlanElement>,
    pub instruction: AdvisorInstruction,
}

impl UIPlan {
    pub fn element(&self, element_id: u32) -> Option<&UIPlanElement> {
        self.elements.iter().find(|e| e.element_id == element_id)
    }

    /// The element list as pretty JSON, as handed to the UI coder.
    pub fn elements_json(&self) -> String {
        serde_json::to_string_pretty(&self.elements).expect("plan serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanParseError {
    Empty,
    Malformed(String),
}

/// Removes code fences and trailing commas, and cuts the text down to the
/// outermost JSON object or array.
pub fn repair_json(raw: &str) -> String {
    static FENCE: OnceLock<Regex> = OnceLock::new();
    static TRAILING_COMMA: OnceLock<Regex> = OnceLock::new();
    let fence = FENCE.get_or_init(|| Regex::new(r"(?s)```[A-Za-z0-9_-]*[ \t]*\r?\n?(.*?)```").expect("valid regex"));
    let comma = TRAILING_COMMA.get_or_init(|| Regex::new(r",(\s*[}\]])").expect("valid regex"));

    let mut text = match fence.captures(raw) {
        Some(c) => c[1].to_string(),
        None => raw.to_string(),
    };
    let start = text.find(['{', '[']);
    let end = text.rfind(['}', ']']);
    if let (Some(s), Some(e)) = (start, end) {
        if s < e {
            text = text[s..=e].to_string();
        }
    }
    comma.replace_all(&text, "$1").trim().to_string()
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, names: &[&str]) -> Option<&'a Value> {
    names.iter().find_map(|n| obj.get(*n)).filter(|v| !v.is_null())
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn parse_range(obj: &serde_json::Map<String, Value>) -> Result<Option<NumericRange>, String> {
    let source = match field(obj, &["range"]) {
        Some(Value::Object(r)) => r,
        Some(Value::Array(items)) if items.len() >= 2 => {
            let min = number(&items[0]).ok_or("range min must be a number")?;
            let max = number(&items[1]).ok_or("range max must be a number")?;
            let step = match items.get(2) {
                Some(v) => number(v).ok_or("range step must be a number")?,
                None => 1.0,
            };
            return Ok(Some(NumericRange { min, max, step }));
        }
        Some(_) => return Err("range must be an object".into()),
        None => obj,
    };
    let min = field(source, &["min", "minimum"]);
    let max = field(source, &["max", "maximum"]);
    match (min, max) {
        (None, None) => Ok(None),
        (Some(min), Some(max)) => {
            let min = number(min).ok_or("range min must be a number")?;
            let max = number(max).ok_or("range max must be a number")?;
            let step = match field(source, &["step"]) {
                Some(v) => number(v).ok_or("range step must be a number")?,
                None => 1.0,
            };
            Ok(Some(NumericRange { min, max, step }))
        }
        _ => Err("range needs both min and max".into()),
    }
}

fn parse_kind(raw: &str) -> Option<WidgetKind> {
    let key: String = raw.trim().to_ascii_lowercase().replace([' ', '-'], "_");
    let key = match key.as_str() {
        "select" | "selection" | "menu" | "dropdown_menu" => "dropdown",
        "color" | "colour" | "colorpicker" | "colour_picker" => "color_picker",
        "text" | "text_input" | "textinput" | "text_box" => "textbox",
        "number" | "numeric" | "numberinput" | "int" | "float" => "number_input",
        "gallery" | "images" | "image_grid" => "image_gallery",
        "toggle" | "switch" | "bool" | "boolean" => "checkbox",
        "range" | "range_slider" => "slider",
        other => other,
    };
    WidgetKind::ALL.into_iter().find(|k| k.as_str() == key)
}

fn parse_element(index: usize, v: &Value) -> Result<UIPlanElement, String> {
    let obj = v.as_object().ok_or_else(|| format!("element {index} is not an object"))?;
    let at = |msg: &str| format!("element {index}: {msg}");

    let element_id = match field(obj, &["element_id", "id", "elementId"]) {
        Some(Value::Number(n)) => n.as_u64().filter(|n| *n > 0 && *n <= u32::MAX as u64),
        Some(Value::String(s)) => s.trim().parse::<u64>().ok().filter(|n| *n > 0 && *n <= u32::MAX as u64),
        _ => None,
    }
    .ok_or_else(|| at("element_id must be a positive integer"))? as u32;

    let name = field(obj, &["name", "label", "title"])
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| at("name must be non-empty text"))?
        .to_string();
    let description = field(obj, &["description"]).and_then(Value::as_str).unwrap_or_default().trim().to_string();
    let kind_text = field(obj, &["widget_kind", "kind", "type", "widget"])
        .and_then(Value::as_str)
        .ok_or_else(|| at("widget_kind is missing"))?;
    let widget_kind = parse_kind(kind_text).ok_or_else(|| at(&format!("unknown widget kind `{kind_text}`")))?;

    let options = match field(obj, &["options", "choices", "values"]) {
        None => None,
        Some(Value::Array(items)) => Some(
            items
                .iter()
                .map(|i| match i {
                    Value::String(s) => Ok(s.clone()),
                    Value::Number(_) | Value::Bool(_) => Ok(i.to_string()),
                    _ => Err(at("options must be scalars")),
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
        Some(_) => return Err(at("options must be a list")),
    };
    let range = parse_range(obj).map_err(|e| at(&e))?;

    if widget_kind == WidgetKind::Dropdown && options.as_ref().map_or(true, Vec::is_empty) {
        return Err(at("dropdown needs a non-empty options list"));
    }
    if widget_kind.needs_range() {
        match &range {
            Some(r) if r.is_valid() => {}
            Some(_) => return Err(at("range needs min < max and step > 0")),
            None => return Err(at(&format!("{widget_kind} needs a range"))),
        }
    }
    Ok(UIPlanElement { element_id, name, description, widget_kind, options, range })
}

fn parse_value(value: &Value, instruction: &AdvisorInstruction) -> Result<UIPlan, PlanParseError> {
    let items = match value {
        Value::Array(items) => items,
        Value::Object(obj) => match field(obj, &["elements", "ui_elements", "widgets"]) {
            Some(Value::Array(items)) => items,
            Some(_) => return Err(PlanParseError::Malformed("`elements` must be a list".into())),
            None => return Err(PlanParseError::Malformed("object has no `elements` list".into())),
        },
        _ => return Err(PlanParseError::Malformed("plan must be a JSON object or array".into())),
    };
    if items.is_empty() {
        return Err(PlanParseError::Empty);
    }
    let elements = items
        .iter()
        .enumerate()
        .map(|(i, v)| parse_element(i, v))
        .collect::<Result<Vec<_>, _>>()
        .map_err(PlanParseError::Malformed)?;
    let mut seen = HashSet::new();
    for e in &elements {
        if !seen.insert(e.element_id) {
            return Err(PlanParseError::Malformed(format!("duplicate element_id {}", e.element_id)));
        }
    }
    Ok(UIPlan { elements, instruction: instruction.clone() })
}

/// Parses the planner response, retrying once on [`repair_json`] output.
pub fn parse_plan(raw: &str, instruction: &AdvisorInstruction) -> Result<UIPlan, PlanParseError> {
    if raw.trim().is_empty() {
        return Err(PlanParseError::Empty);
    }
    match serde_json::from_str::<Value>(raw.trim()) {
        Ok(value) => parse_value(&value, instruction),
        Err(first) => {
            let repaired = repair_json(raw);
            if repaired.is_empty() {
                return Err(PlanParseError::Empty);
            }
            let value = serde_json::from_str::<Value>(&repaired)
                .map_err(|e| PlanParseError::Malformed(format!("invalid JSON ({first}); after repair: {e}")))?;
            parse_value(&value, instruction)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instr() -> AdvisorInstruction {
        AdvisorInstruction { text: "Sample images.".into() }
    }

    const PLAN: &str = r#"{"elements": [
        {"element_id": 1, "name": "Label", "description": "Class to sample", "widget_kind": "dropdown", "options": ["cat", "dog"]},
        {"element_id": 2, "name": "Sample Size", "widget_kind": "slider", "range": {"min": 1, "max": 50, "step": 1}}
    ]}"#;

    #[test]
    fn parses_canonical_plan() {
        let plan = parse_plan(PLAN, &instr()).unwrap();
        assert_eq!(plan.elements.len(), 2);
        assert_eq!(plan.elements[0].widget_kind, WidgetKind::Dropdown);
        assert_eq!(plan.elements[1].range, Some(NumericRange { min: 1.0, max: 50.0, step: 1.0 }));
    }

    #[test]
    fn fenced_plan_equals_plain_plan() {
        let fenced = format!("Here is the plan:\n```json\n{PLAN}\n```\n");
        assert_eq!(parse_plan(&fenced, &instr()).unwrap(), parse_plan(PLAN, &instr()).unwrap());
    }

    #[test]
    fn trailing_commas_are_repaired() {
        let sloppy = r#"[{"id": 1, "name": "Show grid", "type": "checkbox",},]"#;
        let plan = parse_plan(sloppy, &instr()).unwrap();
        assert_eq!(plan.elements[0].widget_kind, WidgetKind::Checkbox);
    }

    #[test]
    fn empty_inputs() {
        assert_eq!(parse_plan("", &instr()), Err(PlanParseError::Empty));
        assert_eq!(parse_plan("  \n", &instr()), Err(PlanParseError::Empty));
        assert_eq!(parse_plan("{\"elements\": []}", &instr()), Err(PlanParseError::Empty));
        assert_eq!(parse_plan("```json\n```", &instr()), Err(PlanParseError::Empty));
    }

    #[test]
    fn validation_failures_are_malformed() {
        let cases = [
            "not json at all",
            r#"[{"element_id": 1, "name": "x", "widget_kind": "dropdown"}]"#,
            r#"[{"element_id": 1, "name": "x", "widget_kind": "slider", "range": {"min": 5, "max": 1}}]"#,
            r#"[{"element_id": 1, "name": "x", "widget_kind": "slider"}]"#,
            r#"[{"element_id": 1, "name": "x", "widget_kind": "hologram"}]"#,
            r#"[{"element_id": 0, "name": "x", "widget_kind": "checkbox"}]"#,
            r#"[{"element_id": 1, "name": " ", "widget_kind": "checkbox"}]"#,
            r#"[{"element_id": 1, "name": "a", "widget_kind": "checkbox"}, {"element_id": 1, "name": "b", "widget_kind": "checkbox"}]"#,
        ];
        for case in cases {
            assert!(matches!(parse_plan(case, &instr()), Err(PlanParseError::Malformed(_))), "{case}");
        }
    }

    #[test]
    fn advisor_keeps_first_paragraph() {
        let got =
            AdvisorInstruction::from_response("  Plot loss per epoch.\nUse matplotlib.\n\nAlso consider accuracy.\n")
                .unwrap();
        assert_eq!(got.text, "Plot loss per epoch.\nUse matplotlib.");
        assert!(AdvisorInstruction::from_response(" \n\t").is_none());
    }
}
