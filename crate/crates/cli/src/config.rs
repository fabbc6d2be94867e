//! `key = value` config files and the effective-config echo.
//!
//! A config file holds one setting per line. Keys are the long flag names of
//! the chosen subcommand without the leading dashes (`batch-size = 16`,
//! `T = 4,8`). Switches take `true` or `false`. `#` starts a comment. Flags
//! given on the command line win over the file.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Command};
use serde::Serialize;
use serde_json::Value;

pub const ECHO_FILE: &str = "effective-config.txt";

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key = value, got {raw:?}", n + 1);
        };
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        pairs.push((key, v.trim().to_string()));
    }
    Ok(pairs)
}

/// Finds `--config <path>` or `--config=<path>` among `args`.
fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
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

/// Rewrites `argv` so the settings of any `--config` file come right after
/// the subcommand name, where later command-line flags override them.
pub fn expand(cmd: &Command, argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(sub_pos) = argv.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|p| p + 1) else {
        return Ok(argv);
    };
    let Some(path) = config_path(&argv[sub_pos + 1..]) else {
        return Ok(argv);
    };
    let name = argv[sub_pos].to_string_lossy().into_owned();
    let Some(sub) = cmd.find_subcommand(&name) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", Path::new(&path).display()))?;
    let mut injected = Vec::new();
    for (key, value) in parse(&text).with_context(|| format!("in {}", Path::new(&path).display()))? {
        if key == "config" {
            bail!("config files cannot include other config files");
        }
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            bail!("unknown key {key:?} for {name} in {}", Path::new(&path).display());
        };
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" => injected.push(format!("--{key}").into()),
                "false" => {}
                _ => bail!("{key} expects true or false, got {value:?}"),
            }
        } else {
            injected.push(format!("--{key}={value}").into());
        }
    }
    let mut out = argv[..=sub_pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[sub_pos + 1..]);
    Ok(out)
}

/// Renders `args` in config-file form. Field names match flag names after
/// swapping `_` for `-`.
pub fn render(command: &str, args: &impl Serialize) -> Result<String> {
    let Value::Object(map) = serde_json::to_value(args)? else {
        bail!("arguments must serialize to a map");
    };
    let mut out = format!("# qcfs {command}\n");
    for (k, v) in map {
        let text = match v {
            Value::Null => continue,
            Value::String(s) => s,
            Value::Array(items) => items
                .iter()
                .map(|i| match i {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
            other => other.to_string(),
        };
        writeln!(out, "{} = {text}", k.replace('_', "-"))?;
    }
    Ok(out)
}

pub fn echo(dir: &Path, command: &str, args: &impl Serialize) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(ECHO_FILE);
    fs::write(&path, render(command, args)?).with_context(|| format!("writing {}", path.display()))
}
