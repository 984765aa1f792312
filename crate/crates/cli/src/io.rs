use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rollsim_core::config::ConfigError;
use rollsim_core::sim::SimError;
use rollsim_core::trace::{Trace, TraceError};
use serde::Serialize;
use tempfile::NamedTempFile;

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or input data: exit 2.
    Config(String),
    /// No feasible allocation: exit 3.
    Infeasible(String),
    /// Filesystem trouble: exit 4.
    Io(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Infeasible(_) => 3,
            Failure::Io(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Config(_) => "config",
            Failure::Infeasible(_) => "infeasible",
            Failure::Io(_) => "io",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Infeasible(m) | Failure::Io(m) => m,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind(), "code": self.code(), "message": self.message() }).to_string()
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

pub fn io_failure(path: &Path, e: impl fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Io(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::Io(_) => Failure::Io(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Infeasible { .. } => Failure::Infeasible(e.to_string()),
            SimError::Config(c) => c.into(),
            other => Failure::Config(other.to_string()),
        }
    }
}

pub fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(io_failure(path, "no such file"))
    }
}

pub fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

pub fn read_trace(path: &Path) -> Result<Trace, Failure> {
    let f = File::open(path).map_err(|e| io_failure(path, e))?;
    Trace::read_jsonl(BufReader::new(f)).map_err(|e| match e {
        TraceError::Io(io) => io_failure(path, io),
        other => Failure::Config(format!("{}: {other}", path.display())),
    })
}

/// Write through a temporary file in the target directory, then rename it
/// into place so readers never see a partial file.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), Failure> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let err = |e: std::io::Error| io_failure(path, e);
    let tmp = NamedTempFile::new_in(dir).map_err(err)?;
    let mut w = BufWriter::new(tmp);
    fill(&mut w).map_err(err)?;
    let tmp = w.into_inner().map_err(|e| err(e.into_error()))?;
    tmp.as_file().sync_all().map_err(err)?;
    tmp.persist(path).map_err(|e| err(e.error))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")
    })
}

/// `run.json` becomes `run.r3.json` for replica 3.
pub fn replica_path(path: &Path, i: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.r{i}.{}", ext.to_string_lossy()),
        None => format!("{stem}.r{i}"),
    };
    path.with_file_name(name)
}

/// Left-aligned first column, right-aligned numbers.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                s.push_str(&format!("{c:<w$}"));
            } else {
                s.push_str(&format!("  {c:>w$}"));
            }
        }
        s.trim_end().to_owned()
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
