//! `--config FILE` support. Each `key=value` line becomes `--key=value` on the
//! command line unless the user passed `--key` explicitly.

use std::ffi::OsString;
use std::path::Path;

use clap::CommandFactory;

use crate::args::Cli;
use crate::error::{CliError, CliResult};

/// Parse `key=value` lines. Blank lines and `#` comments are skipped; keys
/// may use `_` or `-`.
pub fn parse_config(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("config line {}: expected key=value", n + 1)))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            return Err(CliError::usage(format!("config line {}: empty key", n + 1)));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

fn mentions_flag(args: &[OsString], long: &str) -> bool {
    let flag = format!("--{long}");
    let with_value = format!("--{long}=");
    args.iter().any(|a| {
        let s = a.to_string_lossy();
        s == flag || s.starts_with(&with_value)
    })
}

/// Splice config-file settings into `argv` directly after the subcommand.
/// Returns `argv` untouched when no `--config` is given.
pub fn expand_argv(argv: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let cmd = Cli::command();
    let Some((pos, sub)) = argv.iter().enumerate().skip(1).find_map(|(i, a)| {
        cmd.find_subcommand(a.to_string_lossy().as_ref()).map(|s| (i, s.clone()))
    }) else {
        // Let clap report the missing subcommand.
        return Ok(argv);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::runtime(format!("cannot read config {}: {e}", path.display())))?;
    let user_args = &argv[pos + 1..];
    let mut injected = Vec::new();
    for (key, value) in parse_config(&text)? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| {
                CliError::usage(format!(
                    "config {}: unknown key {key:?} for {}",
                    path.display(),
                    sub.get_name()
                ))
            })?;
        if mentions_flag(user_args, &key) {
            continue;
        }
        if arg.get_action().takes_values() {
            injected.push(OsString::from(format!("--{key}={value}")));
        } else {
            match value.as_str() {
                "true" | "1" | "yes" => injected.push(OsString::from(format!("--{key}"))),
                "false" | "0" | "no" => {}
                _ => {
                    return Err(CliError::usage(format!(
                        "config {}: {key} expects true or false, got {value:?}",
                        path.display()
                    )))
                }
            }
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(user_args);
    Ok(out)
}
