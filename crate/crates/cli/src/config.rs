//! Flat TOML config files whose keys mirror long flag names.
//!
//! The file is spliced into the argument list ahead of the user's own
//! arguments, so explicit flags override file values.

use std::ffi::OsString;
use std::path::Path;

use clap::{ArgAction, Command};

/// Global flags that may appear on either side of the subcommand.
fn find_subcommand<'a>(cmd: &'a Command, args: &[OsString]) -> Option<(usize, &'a Command)> {
    let takes_value = |long: &str| {
        cmd.get_arguments()
            .find(|a| a.get_long() == Some(long))
            .is_some_and(|a| a.get_action().takes_values())
    };
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if let Some(long) = a.strip_prefix("--") {
            if !long.contains('=') && takes_value(long) {
                i += 1;
            }
        } else if !a.starts_with('-') {
            return cmd.find_subcommand(a.as_ref()).map(|s| (i, s));
        }
        i += 1;
    }
    None
}

/// Locate `--config <path>` / `--config=<path>` in raw arguments.
fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

fn scalar(key: &str, v: &toml::Value) -> Result<String, String> {
    match v {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        toml::Value::Boolean(b) => Ok(b.to_string()),
        toml::Value::Array(items) => items
            .iter()
            .map(|i| scalar(key, i))
            .collect::<Result<Vec<_>, _>>()
            .map(|v| v.join(",")),
        _ => Err(format!(
            "config key {key:?} must be a scalar or a list of scalars"
        )),
    }
}

/// Turn a config file into flag arguments for `sub`. Keys unknown to both
/// the global flags and `sub` are errors.
fn config_args(cmd: &Command, sub: &Command, path: &Path) -> Result<Vec<OsString>, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| format!("config {}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (key, value) in &table {
        if key == "config" {
            return Err("config files cannot include other config files".into());
        }
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| format!("unknown config key {key:?} for `{}`", sub.get_name()))?;
        let v = scalar(key, value)?;
        match arg.get_action() {
            ArgAction::SetTrue => match v.as_str() {
                "true" => out.push(format!("--{key}").into()),
                "false" => {}
                _ => return Err(format!("config key {key:?} must be true or false")),
            },
            _ => out.push(format!("--{key}={v}").into()),
        }
    }
    Ok(out)
}

/// `prog sub <config flags> <user args without sub>`; globals are declared
/// `global = true`, so they parse after the subcommand too.
pub fn merge_args(cmd: &Command, args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let Some((pos, sub)) = find_subcommand(cmd, &args) else {
        return Ok(args);
    };
    let mut merged = vec![args[0].clone(), args[pos].clone()];
    merged.extend(config_args(cmd, sub, Path::new(&path))?);
    merged.extend(args[1..pos].iter().cloned());
    merged.extend(args[pos + 1..].iter().cloned());
    Ok(merged)
}
