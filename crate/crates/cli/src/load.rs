//! Problem ingestion: JSON text, dotted-path overrides, typed decoding.

use std::path::Path;

use hjb_core::Problem;
use serde_json::Value;

use crate::Failure;

fn parse_error(path: impl Into<String>, message: impl Into<String>) -> Failure {
    Failure::Parse {
        path: path.into(),
        message: message.into(),
    }
}

/// Reads a problem file, applies `KEY=VALUE` overrides in order and decodes
/// the result. Decoding errors name the offending JSON path.
pub fn load_problem(path: &Path, overrides: &[String]) -> Result<Problem, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut doc: Value = serde_json::from_str(&text).map_err(|e| parse_error(".", e.to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    serde_path_to_error::deserialize(doc)
        .map_err(|e| parse_error(e.path().to_string(), e.inner().to_string()))
}

/// Sets the entry at a dotted path (`horizon.n_steps`, `grid.lo.0`) to a
/// value. The value is read as JSON when possible and as a string otherwise.
/// Missing object keys are created; array indices must already exist.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), Failure> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| parse_error(spec, "override must have the form KEY=VALUE"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(parse_error(spec, "empty path segment"));
    }
    let mut value = Some(serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())));
    let segments: Vec<&str> = key.split('.').collect();
    let mut node = doc;
    for (i, seg) in segments.iter().enumerate() {
        let here = segments[..=i].join(".");
        let last = i + 1 == segments.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(seg.to_string(), value.take().unwrap_or_default());
                    return Ok(());
                }
                map.entry(seg.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let len = items.len();
                let slot = seg
                    .parse::<usize>()
                    .ok()
                    .and_then(|idx| items.get_mut(idx))
                    .ok_or_else(|| parse_error(&here, format!("no index {seg} in an array of length {len}")))?;
                if last {
                    *slot = value.take().unwrap_or_default();
                    return Ok(());
                }
                slot
            }
            _ => return Err(parse_error(&here, "cannot descend into a scalar")),
        };
    }
    unreachable!("the loop returns on the last segment")
}
