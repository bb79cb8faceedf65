//! The `sciedkit` command line: argument parsing, exit codes and dispatch.
//!
//! ```text
//! sciedkit <command> [--config FILE] [--seed N] [--key value]...
//! ```
//!
//! Exit codes: 0 success, 1 usage error, 2 data, configuration, policy or
//! checkpoint error, 3 training error.

mod commands;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use crate::error::Error;

pub use config::{parse_config_text, schema, Command, KeySpec, Origin, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Training(_)
        | Error::NumericInput(_)
        | Error::UndefinedLoss
        | Error::Dimension { .. }
        | Error::Contract(_) => EXIT_TRAINING,
        Error::Input(_)
        | Error::Data { .. }
        | Error::Spec(_)
        | Error::Policy(_)
        | Error::Config(_)
        | Error::BadMagic
        | Error::UnsupportedVersion { .. }
        | Error::Truncated(_)
        | Error::VocabHashMismatch(_)
        | Error::MalformedCheckpoint(_)
        | Error::Io { .. } => EXIT_DATA,
    }
}

pub fn usage() -> String {
    let mut s = String::from(
        "usage: sciedkit <command> [--config FILE] [--seed N] [--key value]...\n\ncommands:\n",
    );
    for c in Command::ALL {
        s.push_str(&format!("  {:<20}{}\n", c.name(), c.summary()));
    }
    s.push_str(
        "\nSettings come from a `key = value` file (--config) and `--key value` overrides.\n\
         `sciedkit <command> --help` lists the keys a command accepts.\n",
    );
    s
}

/// Keys accepted by `command`, with defaults.
pub fn command_help(command: Command) -> String {
    let mut s = format!("sciedkit {command}: {}\n\nkeys:\n", command.summary());
    let keys: Vec<KeySpec> = schema().into_iter().filter(|k| k.commands.contains(&command)).collect();
    let width = keys.iter().map(|k| k.key.len()).max().unwrap_or(0) + 2;
    for k in keys {
        let default = if k.required.contains(&command) {
            "required".to_string()
        } else {
            match &k.default {
                Some(d) if d.is_empty() => "default empty".into(),
                Some(d) => format!("default {d}"),
                None => "optional".into(),
            }
        };
        s.push_str(&format!("  {:<width$}{} [{default}]\n", k.key, k.help));
    }
    s
}

#[derive(Debug, Default)]
struct Args {
    config: Option<PathBuf>,
    overrides: Vec<(String, String)>,
    help: bool,
}

fn parse_args(rest: &[String]) -> Result<Args, String> {
    let mut a = Args::default();
    let mut i = 0;
    while i < rest.len() {
        let arg = &rest[i];
        if arg == "--help" || arg == "-h" {
            a.help = true;
            i += 1;
            continue;
        }
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(format!("unexpected argument {arg:?}; settings are given as --key value"));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = rest
                    .get(i + 1)
                    .ok_or_else(|| format!("--{flag} needs a value"))?;
                i += 1;
                (flag.to_string(), v.clone())
            }
        };
        i += 1;
        if key.is_empty() {
            return Err("empty flag name".into());
        }
        if key == "config" {
            if a.config.is_some() {
                return Err("--config given twice".into());
            }
            a.config = Some(PathBuf::from(value));
        } else {
            if a.overrides.iter().any(|(k, _)| *k == key) {
                return Err(format!("--{key} given twice"));
            }
            a.overrides.push((key, value));
        }
    }
    Ok(a)
}

/// Runs the command line `args` (without the program name) and returns the
/// process exit code. Normal output goes to `out`, diagnostics to `err`.
pub fn run(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let Some(first) = args.first() else {
        let _ = write!(err, "{}", usage());
        return EXIT_USAGE;
    };
    match first.as_str() {
        "-h" | "--help" | "help" => {
            let _ = write!(out, "{}", usage());
            return EXIT_OK;
        }
        "-V" | "--version" => {
            let _ = writeln!(out, "sciedkit {}", env!("CARGO_PKG_VERSION"));
            return EXIT_OK;
        }
        _ => {}
    }
    let Some(command) = Command::parse(first) else {
        let _ = writeln!(err, "error: unknown command {first:?}\n");
        let _ = write!(err, "{}", usage());
        return EXIT_USAGE;
    };
    let parsed = match parse_args(&args[1..]) {
        Ok(a) => a,
        Err(m) => {
            let _ = writeln!(err, "error: {m}\n");
            let _ = write!(err, "{}", usage());
            return EXIT_USAGE;
        }
    };
    if parsed.help {
        let _ = write!(out, "{}", command_help(command));
        return EXIT_OK;
    }
    let result = load_config(command, parsed).and_then(|rc| commands::execute(&rc, out));
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(command: Command, args: Args) -> crate::Result<RunConfig> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            parse_config_text(&text, path)?
        }
        None => Vec::new(),
    };
    RunConfig::resolve(command, file, args.overrides)
}
