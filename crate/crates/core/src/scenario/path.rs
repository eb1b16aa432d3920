//! Small path language for scenario assertions.
//!
//! A path is a dot-separated list of segments evaluated against a JSON value:
//! a field name, an array index, `*` (every element or field value), or a
//! filter `[key=value]` keeping array elements whose `key` field renders as
//! `value` (a filter applied to an object keeps or drops the object itself).
//! A field may carry filters directly: `widgets[label=Sample Size]`.
//! Evaluation yields every value the path reaches, possibly none.

use serde_json::Value;

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Field(String),
    Index(usize),
    Wildcard,
    Filter { key: String, value: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct JsonPath {
    raw: String,
    segments: Vec<Segment>,
}

impl std::fmt::Display for JsonPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.raw)
    }
}

fn split_top_level(path: &str) -> Result<Vec<&str>, String> {
    let mut parts = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, c) in path.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth = depth.checked_sub(1).ok_or_else(|| format!("unbalanced `]` in `{path}`"))?,
            '.' if depth == 0 => {
                parts.push(&path[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(format!("unbalanced `[` in `{path}`"));
    }
    parts.push(&path[start..]);
    Ok(parts)
}

fn parse_segment(part: &str, out: &mut Vec<Segment>) -> Result<(), String> {
    let (head, mut rest) = match part.find('[') {
        Some(i) => (&part[..i], &part[i..]),
        None => (part, ""),
    };
    match head {
        "" if rest.is_empty() => return Err("empty path segment".into()),
        "" => {}
        "*" => out.push(Segment::Wildcard),
        h if h.bytes().all(|b| b.is_ascii_digit()) => out.push(Segment::Index(h.parse().map_err(|_| "bad index")?)),
        h => out.push(Segment::Field(h.to_string())),
    }
    while !rest.is_empty() {
        let close = rest.find(']').ok_or_else(|| format!("unclosed filter in `{part}`"))?;
        let inner = &rest[1..close];
        let (key, value) = inner.split_once('=').ok_or_else(|| format!("filter `[{inner}]` needs key=value"))?;
        if key.is_empty() {
            return Err(format!("filter `[{inner}]` has an empty key"));
        }
        out.push(Segment::Filter { key: key.to_string(), value: value.to_string() });
        rest = &rest[close + 1..];
        if !rest.is_empty() && !rest.starts_with('[') {
            return Err(format!("unexpected `{rest}` after filter"));
        }
    }
    Ok(())
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl JsonPath {
    pub fn parse(path: &str) -> Result<Self, String> {
        let mut segments = Vec::new();
        if !path.is_empty() {
            for part in split_top_level(path)? {
                parse_segment(part, &mut segments)?;
            }
        }
        Ok(Self { raw: path.to_string(), segments })
    }

    pub fn eval<'a>(&self, root: &'a Value) -> Vec<&'a Value> {
        let mut current = vec![root];
        for seg in &self.segments {
            let mut next = Vec::new();
            for v in current {
                match seg {
                    Segment::Field(name) => next.extend(v.get(name.as_str())),
                    Segment::Index(i) => next.extend(v.get(*i)),
                    Segment::Wildcard => match v {
                        Value::Array(items) => next.extend(items.iter()),
                        Value::Object(map) => next.extend(map.values()),
                        _ => {}
                    },
                    Segment::Filter { key, value } => {
                        let keep = |item: &Value| item.get(key.as_str()).is_some_and(|f| render(f) == *value);
                        match v {
                            Value::Array(items) => next.extend(items.iter().filter(|i| keep(i))),
                            other if keep(other) => next.push(other),
                            _ => {}
                        }
                    }
                }
            }
            current = next;
        }
        current
    }
}
