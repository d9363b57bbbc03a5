//! Tolerant extraction of a JSON object from free-form model output.
//!
//! Models wrap JSON in markdown fences, prepend chatter, or trail off. We look
//! for the first balanced `{...}` that parses as an object; everything else
//! about the text is ignored.

use serde_json::{Map, Value};

/// Upper bound on candidate `{` positions tried before giving up.
const MAX_CANDIDATES: usize = 32;

pub type JsonObject = Map<String, Value>;

pub fn extract_object(text: &str) -> Result<JsonObject, String> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err("output is empty".into());
    }
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(trimmed) {
        return Ok(map);
    }
    for (start, _) in trimmed.match_indices('{').take(MAX_CANDIDATES) {
        let Some(end) = balanced_end(&trimmed[start..]) else {
            continue;
        };
        if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&trimmed[start..start + end]) {
            return Ok(map);
        }
    }
    Err("no JSON object found in output".into())
}

/// Byte length of the balanced object starting at `s[0] == '{'`.
fn balanced_end(s: &str) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn fold_key(key: &str) -> String {
    key.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Looks a field up by any of `names`, ignoring case and `_`/`-` separators.
pub fn field<'a>(obj: &'a JsonObject, names: &[&str]) -> Option<&'a Value> {
    let wanted: Vec<String> = names.iter().map(|n| fold_key(n)).collect();
    obj.iter()
        .find(|(k, _)| wanted.contains(&fold_key(k)))
        .map(|(_, v)| v)
}

pub fn string_field(obj: &JsonObject, names: &[&str]) -> Result<Option<String>, String> {
    match field(obj, names) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(other) => Err(format!("field {} must be a string, got {other}", names[0])),
    }
}

/// A list of strings, also accepting a single comma-separated string.
pub fn string_list_field(obj: &JsonObject, names: &[&str]) -> Result<Option<Vec<String>>, String> {
    match field(obj, names) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(
            s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect(),
        )),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.trim().to_string()),
                other => Err(format!("field {} must contain strings, got {other}", names[0])),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some),
        Some(other) => Err(format!("field {} must be a list, got {other}", names[0])),
    }
}
