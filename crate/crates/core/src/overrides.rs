//! Dotted-key overrides on JSON config trees, e.g. `hp.tau=0.5`.
//!
//! The value is parsed as JSON when possible and taken as a bare string
//! otherwise, so `hp.selection=lowest` and `hp.selection="lowest"` agree.
//! Unknown keys are inserted as given; the typed deserialization that
//! follows rejects them.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `key` (dot-separated path) to `value` inside `root`.
pub fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let Value::Object(map) = node else {
            return Err(Error::Config(format!("override {key:?}: {part:?} is below a non-object")));
        };
        if parts.peek().is_none() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("non-empty key")
}

/// Splits `KEY=VALUE`.
pub fn parse_assignment(arg: &str) -> Result<(String, Value)> {
    let (k, v) = arg.split_once('=').ok_or_else(|| Error::Config(format!("override {arg:?} is not KEY=VALUE")))?;
    Ok((k.trim().to_string(), parse_value(v)))
}

/// Round-trips `base` through JSON with the overrides applied.
pub fn apply<T: Serialize + DeserializeOwned>(base: &T, overrides: &[(String, Value)]) -> Result<T> {
    let mut tree = serde_json::to_value(base)?;
    for (k, v) in overrides {
        set_dotted(&mut tree, k, v.clone())?;
    }
    serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))
}
