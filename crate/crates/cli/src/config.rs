//! `--config` support: a flat TOML table whose keys are long flag names
//! (with `-` or `_`). Values fill in flags missing from the command line.

use anyhow::{anyhow, bail, Context};
use clap::{CommandFactory, Parser};

use crate::args::Cli;

pub enum ParseError {
    Clap(clap::Error),
    Config(anyhow::Error),
}

fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

fn given(argv: &[String], flag: &str) -> bool {
    let long = format!("--{flag}");
    argv.iter().any(|a| *a == long || a.starts_with(&format!("{long}=")))
}

fn scalar(key: &str, v: &toml::Value) -> anyhow::Result<String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        other => bail!("config key `{key}` has unsupported value {other}"),
    })
}

/// Flags injected from `table` for subcommand `sub`.
pub fn injected_args(argv: &[String], sub: &str, table: &toml::Table) -> anyhow::Result<Vec<String>> {
    let root = Cli::command();
    let cmd = root.find_subcommand(sub).ok_or_else(|| anyhow!("unknown subcommand {sub}"))?;
    let mut out = Vec::new();
    for (key, value) in table {
        let flag = key.replace('_', "-");
        if flag == "config" {
            bail!("config files cannot nest --config");
        }
        let arg = cmd
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(flag.as_str()))
            .ok_or_else(|| anyhow!("config key `{key}` is not a flag of `{sub}`"))?;
        if given(argv, &flag) {
            continue;
        }
        let takes_value = arg.get_action().takes_values();
        match value {
            toml::Value::Boolean(b) if !takes_value => {
                if *b {
                    out.push(format!("--{flag}"));
                }
            }
            toml::Value::Array(items) => {
                for it in items {
                    out.push(format!("--{flag}={}", scalar(key, it)?));
                }
            }
            v => out.push(format!("--{flag}={}", scalar(key, v)?)),
        }
    }
    Ok(out)
}

pub fn parse(argv: &[String]) -> Result<Cli, ParseError> {
    let cli = Cli::try_parse_from(argv).map_err(ParseError::Clap)?;
    let Some(path) = config_path(argv) else { return Ok(cli) };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading config {path}"))
        .map_err(ParseError::Config)?;
    let table: toml::Table = text
        .parse()
        .with_context(|| format!("parsing config {path}"))
        .map_err(ParseError::Config)?;
    let extra = injected_args(argv, cli.command.name(), &table).map_err(ParseError::Config)?;
    let mut full = argv.to_vec();
    full.extend(extra);
    Cli::try_parse_from(&full).map_err(ParseError::Clap)
}
