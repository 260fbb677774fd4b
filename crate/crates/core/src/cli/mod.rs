//! The `yaart` command line: one subcommand per pipeline step.
//!
//! Every subcommand takes a flat set of keys, given as `--key value` or
//! `--key=value`, optionally preloaded from a `key = value` file named by
//! `--config`; command-line values override the file. Exit codes: 0 on
//! success, 1 on a runtime failure, 2 on a configuration error.

mod commands;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, ArgAction, Command};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// A failed run: bad configuration or a failure while working.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// One accepted key of a subcommand.
#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub name: &'static str,
    /// `None` marks a required key.
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        default: Some(default),
        help,
    }
}

const fn required(name: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        default: None,
        help,
    }
}

/// Optional keys with no default use the empty string.
const fn optional(name: &'static str, help: &'static str) -> KeySpec {
    key(name, "", help)
}

/// A subcommand, its keys and what it does.
pub struct CommandSpec {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: Vec<KeySpec>,
    run: fn(&Settings) -> CliResult<()>,
}

/// Resolved key values of one invocation.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    command: String,
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn is_set(&self, key: &str) -> bool {
        !self.raw(key).is_empty()
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::Config(format!("{}: key {key} = {raw:?}: {e}", self.command)))
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.is_set(key) {
            self.get(key).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> CliResult<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| {
                p.trim().parse().map_err(|e| {
                    CliError::Config(format!("{}: key {key} = {raw:?}: {e}", self.command))
                })
            })
            .collect()
    }

    /// A path that must exist when the run starts.
    pub fn input_path(&self, key: &str) -> CliResult<PathBuf> {
        let p = PathBuf::from(self.raw(key));
        if !p.exists() {
            return Err(CliError::Config(format!(
                "{}: key {key}: path {} does not exist",
                self.command,
                p.display()
            )));
        }
        Ok(p)
    }

    pub fn opt_input_path(&self, key: &str) -> CliResult<Option<PathBuf>> {
        if self.is_set(key) {
            self.input_path(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn output_path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.raw(key))
    }

    /// Turn a validation failure into a configuration error.
    pub fn check(&self, r: crate::Result<()>) -> CliResult<()> {
        r.map_err(|e| CliError::Config(format!("{}: {e}", self.command)))
    }
}

pub fn commands() -> Vec<CommandSpec> {
    commands::all()
}

fn build(cmd: &CommandSpec) -> Command {
    let mut c = Command::new(cmd.name).about(cmd.about).arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value file; command-line keys override it"),
    );
    for k in &cmd.keys {
        let help = match k.default {
            None => format!("{} (required)", k.help),
            Some("") => k.help.to_string(),
            Some(d) => format!("{} [default: {d}]", k.help),
        };
        c = c.arg(
            Arg::new(k.name)
                .long(k.name)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .help(help),
        );
    }
    c
}

fn read_config_file(path: &Path, cmd: &CommandSpec) -> CliResult<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("{}: config file {}: {e}", cmd.name, path.display()))
    })?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "{}: line {} is not key = value",
                path.display(),
                n + 1
            )));
        };
        let k = k.trim();
        if !cmd.keys.iter().any(|s| s.name == k) {
            return Err(CliError::Config(format!(
                "{}: unknown key {k:?} for {}",
                path.display(),
                cmd.name
            )));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn resolve(cmd: &CommandSpec, m: &clap::ArgMatches) -> CliResult<Settings> {
    let mut values: BTreeMap<String, String> = cmd
        .keys
        .iter()
        .filter_map(|k| k.default.map(|d| (k.name.to_string(), d.to_string())))
        .collect();
    if let Some(p) = m.get_one::<String>("config") {
        values.extend(read_config_file(Path::new(p), cmd)?);
    }
    for k in &cmd.keys {
        if let Some(v) = m.get_one::<String>(k.name) {
            values.insert(k.name.to_string(), v.clone());
        }
    }
    for k in &cmd.keys {
        if k.default.is_none() && values.get(k.name).is_none_or(|v| v.is_empty()) {
            return Err(CliError::Config(format!(
                "{}: missing required key {}",
                cmd.name, k.name
            )));
        }
    }
    Ok(Settings {
        command: cmd.name.to_string(),
        values,
    })
}

/// Run the command line and return the process exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let specs = commands();
    let app = Command::new("yaart")
        .about("Cascaded diffusion training, alignment, curation and evaluation at desk scale")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands(specs.iter().map(build));
    let m = match app.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (name, sub) = m.subcommand().expect("a subcommand is required");
    let spec = specs
        .iter()
        .find(|s| s.name == name)
        .expect("parsed subcommand is known");
    let result = resolve(spec, sub).and_then(|s| (spec.run)(&s));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("yaart {name}: {e}");
            e.exit_code()
        }
    }
}
