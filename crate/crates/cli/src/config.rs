//! `--config <file.json>` support.
//!
//! The JSON object's keys are spliced into the argument list as long flags
//! right after the subcommand, so explicit command-line flags still win and
//! unknown keys are rejected by the same parser that handles the command line.

use std::ffi::OsString;
use std::fs;

use serde_json::Value;

pub const SUBCOMMANDS: [&str; 7] = ["groups", "prox", "solve", "train", "render", "calibrate", "patches"];

/// Global options that take a value; their values are never subcommand names.
const VALUED_GLOBALS: [&str; 3] = ["--config", "--seed", "--workers"];

pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| format!("config {path}: {e}"))?;
    let Value::Object(map) = doc else {
        return Err(format!("config {path}: top level must be a JSON object"));
    };

    let mut command = None;
    let mut tokens = Vec::new();
    for (key, value) in &map {
        if key == "command" {
            match value {
                Value::String(s) => command = Some(s.clone()),
                _ => return Err(format!("config {path}: \"command\" must be a string")),
            }
            continue;
        }
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => tokens.push(flag),
            Value::Array(items) => {
                let parts: Result<Vec<String>, String> = items.iter().map(|v| scalar(key, v)).collect();
                tokens.push(flag);
                tokens.push(parts?.join(","));
            }
            other => {
                tokens.push(flag);
                tokens.push(scalar(key, other)?);
            }
        }
    }

    let mut out = args;
    let insert_at = match subcommand_index(&out) {
        Some(i) => i + 1,
        None => {
            let Some(cmd) = command else {
                return Ok(out);
            };
            out.push(cmd.into());
            out.len()
        }
    };
    out.splice(insert_at..insert_at, tokens.into_iter().map(OsString::from));
    Ok(out)
}

fn scalar(key: &str, v: &Value) -> Result<String, String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        _ => Err(format!("config key \"{key}\": nested values are not supported")),
    }
}

fn config_path(args: &[OsString]) -> Option<String> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let a = a.to_string_lossy();
        if a == "--config" {
            return it.next().map(|p| p.to_string_lossy().into_owned());
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_owned());
        }
    }
    None
}

fn subcommand_index(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if VALUED_GLOBALS.contains(&a.as_ref()) {
            i += 2;
            continue;
        }
        if SUBCOMMANDS.contains(&a.as_ref()) {
            return Some(i);
        }
        i += 1;
    }
    None
}
