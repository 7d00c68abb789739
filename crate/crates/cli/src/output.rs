//! Report envelopes, CSV tables, PGM images and machine-readable errors.

use std::fmt;
use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

/// Tool version embedded in every report; a build may append a
/// `git describe` string through `SMOOTHCERT_GIT_DESCRIBE`.
pub fn version() -> String {
    match option_env!("SMOOTHCERT_GIT_DESCRIBE") {
        Some(d) => format!("{} ({d})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

#[derive(Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub tool: &'static str,
    pub version: String,
    pub command: &'a str,
    pub config_hash: &'a str,
    pub results: T,
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Comma-separated table with a header row; cells are written verbatim.
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self { text: header.join(",") + "\n" }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

/// Optional float as a CSV cell (empty when absent).
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Binary 8-bit PGM of a `h × w` plane with values in `[0, 1]`.
pub fn write_pgm(path: &Path, plane: &[f64], h: usize, w: usize) -> Result<()> {
    assert_eq!(plane.len(), h * w, "plane size must match dimensions");
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(plane.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Marker context for configuration and usage failures.
#[derive(Debug)]
pub struct ConfigError;

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("invalid configuration")
    }
}

/// Stable error category and process exit code.
pub fn classify(err: &anyhow::Error) -> (&'static str, i32) {
    if err.downcast_ref::<ConfigError>().is_some() {
        return ("config", 2);
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<smoothcert::Error>() {
            match e {
                smoothcert::Error::Diverged { .. } | smoothcert::Error::AttackDiverged { .. } => return ("diverged", 4),
                smoothcert::Error::Rten(_) => return ("bad_input", 5),
                smoothcert::Error::InvalidConfig(_) => return ("config", 2),
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == ErrorKind::NotFound {
                return ("missing_input", 3);
            }
        }
    }
    ("runtime", 1)
}

pub fn error_json(err: &anyhow::Error) -> Value {
    let (kind, code) = classify(err);
    let causes: Vec<String> = err.chain().map(|c| c.to_string()).collect();
    json!({ "error": { "kind": kind, "exit_code": code, "message": format!("{err:#}"), "causes": causes } })
}
