//! Plain-text `section.key = value` configuration resolved against typed
//! defaults.

use std::path::Path;

use geomoe::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Parses `key = value` lines. `[section]` headers prefix the keys that
/// follow; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(s) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = s.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let key = if section.is_empty() {
            k.trim().to_string()
        } else {
            format!("{section}.{}", k.trim())
        };
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("override `{s}` is not `key=value`")))
}

/// JSON literal if it parses as one, otherwise a bare string.
fn literal(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

/// Sets every dotted key in `base`, which must already contain it.
pub fn apply(base: &mut Value, pairs: &[(String, String)]) -> Result<()> {
    let mut unknown = Vec::new();
    for (key, val) in pairs {
        match lookup(base, key) {
            Some(slot) => *slot = coerce(slot, literal(val)),
            None => unknown.push(key.clone()),
        }
    }
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(Error::UnknownConfigKeys(unknown))
    }
}

/// Keeps strings where the default is a string, so `seed = 7` style values
/// and names like `patch = 8` behave the same way.
fn coerce(slot: &Value, v: Value) -> Value {
    match (slot, &v) {
        (Value::String(_), Value::Number(n)) => Value::String(n.to_string()),
        (Value::String(_), Value::Bool(b)) => Value::String(b.to_string()),
        _ => v,
    }
}

fn lookup<'a>(v: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    let mut cur = v;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(m) => m.get_mut(part)?,
            Value::Array(a) => a.get_mut(part.parse::<usize>().ok()?)?,
            _ => return None,
        };
    }
    Some(cur)
}

/// Resolves defaults, then the config file, then command-line overrides.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    overrides: &[String],
) -> Result<T> {
    let mut v = serde_json::to_value(defaults).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        apply(&mut v, &parse_kv(&text)?)?;
    }
    let pairs = overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    apply(&mut v, &pairs)?;
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

/// Flattens a resolved config back to `key = value` lines.
pub fn echo<T: Serialize>(cfg: &T) -> Result<String> {
    let v = serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = String::new();
    flatten("", &v, &mut out);
    Ok(out)
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        Value::String(s) => out.push_str(&format!("{prefix} = {s}\n")),
        other => out.push_str(&format!("{prefix} = {other}\n")),
    }
}
