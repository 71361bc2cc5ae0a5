//! Flat `key = value` configuration files.
//!
//! Keys are long flag names without the leading dashes. The file's entries
//! are spliced in right after the subcommand, so flags given on the command
//! line come later and take precedence.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key = value, got {raw:?}", lineno + 1);
        };
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() || key == "config" {
            bail!("line {}: invalid key {:?}", lineno + 1, k.trim());
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

/// Converts entries to flags. `true` becomes a bare switch, `false` is
/// dropped, comma lists stay one value.
pub fn config_to_args(cfg: &BTreeMap<String, String>) -> Vec<OsString> {
    let mut args = Vec::new();
    for (k, v) in cfg {
        match v.as_str() {
            "false" => {}
            "true" => args.push(format!("--{k}").into()),
            _ => {
                args.push(format!("--{k}").into());
                args.push(v.into());
            }
        }
    }
    args
}

/// Removes `--config FILE` from `argv` and splices the file's flags after
/// the subcommand.
pub fn expand_args(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config_path = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy().into_owned();
        if s == "--config" {
            config_path = Some(it.next().context("--config needs a file")?);
        } else if let Some(p) = s.strip_prefix("--config=") {
            config_path = Some(p.into());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config_path else {
        return Ok(rest);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .with_context(|| format!("reading config {}", Path::new(&path).display()))?;
    let injected = config_to_args(&parse_config(&text)?);
    // program name, then the subcommand, then the file's flags
    let sub = rest.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|p| p + 2);
    let at = sub.unwrap_or(rest.len());
    rest.splice(at..at, injected);
    Ok(rest)
}
