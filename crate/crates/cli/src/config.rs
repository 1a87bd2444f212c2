//! Layered configuration: built-in defaults, then a JSON file, then flags.

use std::path::{Path, PathBuf};

use paca_core::{PacaError, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Environment variable that anchors relative output directories.
pub const OUT_ROOT_ENV: &str = "PACA_OUT_ROOT";

/// A dotted key path and the value to put there.
pub type Override = (String, Value);

/// Parses `key.path=value`; the value is read as JSON and falls back to a string.
pub fn parse_set(arg: &str) -> Result<Override> {
    let (key, raw) =
        arg.split_once('=').ok_or_else(|| PacaError::Config(format!("--set expects KEY=VALUE, got {arg:?}")))?;
    if key.is_empty() {
        return Err(PacaError::Config(format!("--set has an empty key in {arg:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

pub fn json<T: Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("serializable override")
}

pub fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

/// Rejects keys in `given` that the defaults do not have. Null defaults
/// (optional sections) and tagged enums are left to the deserializer.
fn check_keys(given: &Value, defaults: &Value, at: &str) -> Result<()> {
    let (Value::Object(g), Value::Object(d)) = (given, defaults) else { return Ok(()) };
    if d.contains_key("kind") {
        return Ok(());
    }
    for (k, v) in g {
        let key = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
        match d.get(k) {
            None => return Err(PacaError::Config(format!("unknown config key {key:?}"))),
            Some(dv) => check_keys(v, dv, &key)?,
        }
    }
    Ok(())
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, defaults: &Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    let mut def = Some(defaults);
    for (i, part) in parts.iter().enumerate() {
        let known = def.and_then(|d| d.as_object());
        if let Some(obj) = known {
            if !obj.contains_key(*part) && !obj.contains_key("kind") {
                return Err(PacaError::Config(format!("unknown config key {key:?}")));
            }
        }
        def = def.and_then(|d| d.get(*part));
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("key has at least one part")
}

/// Resolves a typed config. `overrides` apply in order, later ones winning.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: &[Override]) -> Result<T> {
    let defaults = json(T::default());
    let mut value = defaults.clone();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| PacaError::io(path, e))?;
        let given: Value = serde_json::from_str(&text)
            .map_err(|e| PacaError::Config(format!("{}: not valid JSON: {e}", path.display())))?;
        if !given.is_object() {
            return Err(PacaError::Config(format!("{}: expected a JSON object", path.display())));
        }
        check_keys(&given, &defaults, "")?;
        merge(&mut value, given);
    }
    for (key, v) in overrides {
        set_path(&mut value, &defaults, key, v.clone())?;
    }
    from_value(value)
}

pub fn from_value<T: DeserializeOwned>(value: Value) -> Result<T> {
    serde_json::from_value(value).map_err(|e| PacaError::Config(e.to_string()))
}

/// Output directory for a command: explicit paths win, relative ones are
/// anchored at `PACA_OUT_ROOT` when it is set.
pub fn output_dir(out: &Path, command: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from);
    if out.as_os_str().is_empty() {
        return root.unwrap_or_else(|| PathBuf::from("runs")).join(command);
    }
    match root {
        Some(r) if out.is_relative() => r.join(out),
        _ => out.to_path_buf(),
    }
}

/// The half-and-half schedule used when a single epoch or step count is given.
pub fn split_schedule(total: usize) -> (usize, usize) {
    (total.div_ceil(2), total / 2)
}
