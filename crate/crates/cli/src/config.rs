//! `--config <json>` support: settings from the file are turned into flags
//! placed ahead of the user's own, so flags given on the command line win.

use std::path::Path;

use anyhow::{bail, Context};
use clap::Command;
use serde_json::{Map, Value};

fn flag_tokens(name: &str, value: &Value, out: &mut Vec<String>) -> anyhow::Result<()> {
    let flag = format!("--{}", name.replace('_', "-"));
    match value {
        Value::Bool(true) => out.push(flag),
        Value::Bool(false) | Value::Null => {}
        Value::Number(n) => {
            out.push(flag);
            out.push(n.to_string());
        }
        Value::String(s) => {
            out.push(flag);
            out.push(s.clone());
        }
        Value::Array(items) => {
            for item in items {
                flag_tokens(name, item, out)?;
            }
        }
        Value::Object(_) => bail!("config key `{name}` must be a scalar or a list"),
    }
    Ok(())
}

fn accepts(cmd: &Command, name: &str) -> bool {
    let long = name.replace('_', "-");
    cmd.get_arguments().any(|a| a.get_long() == Some(long.as_str()))
}

fn sorted(map: &Map<String, Value>) -> Vec<(&String, &Value)> {
    let mut entries: Vec<_> = map.iter().collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    entries
}

/// Flags for `subcommand` from a config object. Top-level scalars apply to
/// any subcommand that accepts them; an object under the subcommand's name
/// applies to it alone and must only hold keys it accepts.
pub fn config_flags(root: &Command, subcommand: &str, config: &Map<String, Value>) -> anyhow::Result<Vec<String>> {
    let sub = root
        .find_subcommand(subcommand)
        .with_context(|| format!("unknown subcommand {subcommand}"))?;
    let mut out = Vec::new();
    for (key, value) in sorted(config) {
        if key == "config" || value.is_object() {
            continue;
        }
        if accepts(sub, key) || accepts(root, key) {
            flag_tokens(key, value, &mut out)?;
        }
    }
    if let Some(section) = config.get(subcommand) {
        let section = section
            .as_object()
            .with_context(|| format!("config section `{subcommand}` must be an object"))?;
        for (key, value) in sorted(section) {
            if !accepts(sub, key) && !accepts(root, key) {
                bail!("config section `{subcommand}` has unknown key `{key}`");
            }
            flag_tokens(key, value, &mut out)?;
        }
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> anyhow::Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    match serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))? {
        Value::Object(map) => Ok(map),
        _ => bail!("config {} must hold a JSON object", path.display()),
    }
}

/// Rebuilds argv as `prog sub <config flags> <original args without sub>`.
pub fn merged_args(args: &[String], subcommand: &str, flags: Vec<String>) -> Vec<String> {
    let mut out = vec![args[0].clone(), subcommand.to_string()];
    out.extend(flags);
    let mut skipped = false;
    for a in &args[1..] {
        if !skipped && a == subcommand {
            skipped = true;
            continue;
        }
        out.push(a.clone());
    }
    out
}
