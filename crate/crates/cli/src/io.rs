//! File helpers and the validation-error marker.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use tracevote_core::orchestrator::RunError;
use tracevote_core::trace::{
    apply_answer_key, parse_answer_key, parse_trace_log_with, ParseMode, QuestionBundle,
    TraceError,
};

/// Bad input or configuration; exits with status 2.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

pub fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<Invalid>()
            || matches!(c.downcast_ref::<RunError>(), Some(RunError::InvalidConfig(_)))
            || matches!(
                c.downcast_ref::<TraceError>(),
                Some(
                    TraceError::Malformed { .. }
                        | TraceError::Validation { .. }
                        | TraceError::DuplicateTrace { .. }
                        | TraceError::MalformedKey { .. }
                )
            )
            || c.is::<toml::de::Error>()
    })
}

pub fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

/// Error chain joined with ": ", skipping causes already quoted by the
/// message above them.
pub fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&msg)) {
            parts.push(msg);
        }
    }
    parts.join(": ")
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Reads a trace log and applies an optional answer key.
pub fn load_bundles(log: &Path, key: Option<&Path>, lenient: bool) -> Result<Vec<QuestionBundle>> {
    let mode = if lenient { ParseMode::Lenient } else { ParseMode::Strict };
    let mut bundles = parse_trace_log_with(open(log)?, mode)
        .with_context(|| format!("reading {}", log.display()))?;
    if let Some(key) = key {
        let key = parse_answer_key(open(key)?).with_context(|| format!("reading {}", key.display()))?;
        apply_answer_key(&mut bundles, &key);
    }
    for b in &bundles {
        if !b.rejected.is_empty() {
            log::warn!("{}: {} truncated trace(s) set aside", b.question_id, b.rejected.len());
        }
    }
    Ok(bundles)
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(value)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    match path {
        Some(p) => {
            let mut out = create(p)?;
            serde_json::to_writer_pretty(&mut out, value)?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            serde_json::to_writer_pretty(&mut out, value)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}
