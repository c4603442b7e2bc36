//! Config files are translated into flags and placed ahead of the real
//! command line, skipping any flag the command line sets itself.

use std::ffi::OsString;
use std::path::Path;

use serde_json::Value;

use crate::error::CliError;

/// Reads `path` as JSON when it parses as an object, else as `key=value`
/// lines (`#` starts a comment).
pub fn config_flags(path: &Path) -> Result<Vec<(String, Option<String>)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&text) {
        return map
            .into_iter()
            .filter_map(|(k, v)| json_flag(&k, v).transpose())
            .collect();
    }
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{}:{}: expected key=value", path.display(), n + 1))
        })?;
        let value = value.trim();
        match value {
            "true" => out.push((flag_name(key), None)),
            "false" => {}
            _ => out.push((flag_name(key), Some(value.to_string()))),
        }
    }
    Ok(out)
}

fn flag_name(key: &str) -> String {
    format!(
        "--{}",
        key.trim().trim_start_matches("--").replace('_', "-")
    )
}

fn json_flag(key: &str, value: Value) -> Result<Option<(String, Option<String>)>, CliError> {
    let scalar = |v: &Value| match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(CliError::Usage(format!(
            "config key `{key}` has unsupported value {other}"
        ))),
    };
    Ok(match value {
        Value::Bool(true) => Some((flag_name(key), None)),
        Value::Bool(false) | Value::Null => None,
        Value::Array(items) => {
            let parts = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?;
            Some((flag_name(key), Some(parts.join(","))))
        }
        other => Some((flag_name(key), Some(scalar(&other)?))),
    })
}

/// Inserts the config flags right after `run`, dropping the ones the
/// command line already gives.
pub fn merge_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(run_at) = args.iter().position(|a| a == "run") else {
        return Ok(args);
    };
    let rest: Vec<String> = args[run_at + 1..]
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let config = rest.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            rest.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    });
    let Some(config) = config else {
        return Ok(args);
    };
    let given: Vec<&str> = rest
        .iter()
        .filter(|a| a.starts_with("--"))
        .map(|a| a.split('=').next().unwrap_or(a))
        .collect();
    let mut merged: Vec<OsString> = args[..=run_at].to_vec();
    for (flag, value) in config_flags(Path::new(&config))? {
        if flag == "--config" || given.contains(&flag.as_str()) {
            continue;
        }
        merged.push(flag.into());
        if let Some(v) = value {
            merged.push(v.into());
        }
    }
    merged.extend(args[run_at + 1..].iter().cloned());
    Ok(merged)
}
