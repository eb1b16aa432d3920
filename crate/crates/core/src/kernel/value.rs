use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// A value that can be mirrored between a widget and a kernel global:
/// null, boolean, number, string, or a flat list of those.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Value", into = "Value")]
pub struct SyncValue(Value);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("value is outside the syncable domain: {0}")]
pub struct Unrepresentable(pub String);

fn is_scalar(v: &Value) -> bool {
    match v {
        Value::Null | Value::Bool(_) | Value::String(_) => true,
        Value::Number(n) => n.as_f64().is_some_and(f64::is_finite),
        Value::Array(_) | Value::Object(_) => false,
    }
}

impl SyncValue {
    pub fn new(value: Value) -> Result<Self, Unrepresentable> {
        let ok = match &value {
            Value::Array(items) => items.iter().all(is_scalar),
            other => is_scalar(other),
        };
        if ok {
            Ok(Self(value))
        } else {
            Err(Unrepresentable(value.to_string()))
        }
    }

    pub fn null() -> Self {
        Self(Value::Null)
    }

    pub fn as_json(&self) -> &Value {
        &self.0
    }

    pub fn into_json(self) -> Value {
        self.0
    }

    pub fn as_f64(&self) -> Option<f64> {
        self.0.as_f64()
    }

    pub fn as_str(&self) -> Option<&str> {
        self.0.as_str()
    }

    pub fn as_bool(&self) -> Option<bool> {
        self.0.as_bool()
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        self.0.as_array().map(Vec::as_slice)
    }

    pub fn is_null(&self) -> bool {
        self.0.is_null()
    }
}

impl TryFrom<Value> for SyncValue {
    type Error = Unrepresentable;

    fn try_from(value: Value) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<SyncValue> for Value {
    fn from(v: SyncValue) -> Self {
        v.0
    }
}

impl From<bool> for SyncValue {
    fn from(b: bool) -> Self {
        Self(Value::Bool(b))
    }
}

impl From<i64> for SyncValue {
    fn from(n: i64) -> Self {
        Self(Value::from(n))
    }
}

impl From<&str> for SyncValue {
    fn from(s: &str) -> Self {
        Self(Value::String(s.to_string()))
    }
}

impl From<String> for SyncValue {
    fn from(s: String) -> Self {
        Self(Value::String(s))
    }
}

impl fmt::Display for SyncValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn accepts_scalars_and_flat_lists() {
        for v in [json!(null), json!(true), json!(3), json!(2.5), json!("x"), json!([1, "a", null, false])] {
            assert!(SyncValue::new(v.clone()).is_ok(), "{v}");
        }
    }

    #[test]
    fn rejects_nested_values() {
        for v in [json!({"a": 1}), json!([[1]]), json!([{"a": 1}])] {
            assert!(SyncValue::new(v.clone()).is_err(), "{v}");
        }
        assert!(serde_json::from_str::<SyncValue>("{\"a\": 1}").is_err());
    }
}
