use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct Assertion {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub limit: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Assertion {
    /// Passes iff `value ≤ limit`.
    pub fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Assertion { name: name.into(), pass: value <= limit, value, limit, detail: None }
    }

    pub fn holds(name: &str, pass: bool) -> Self {
        Assertion { name: name.into(), pass, value: f64::from(u8::from(pass)), limit: 1.0, detail: None }
    }

    pub fn with_detail(mut self, d: impl Into<String>) -> Self {
        self.detail = Some(d.into());
        self
    }
}

/// What a verb hands back: measured quantities, assertions and CSV dumps.
#[derive(Default)]
pub struct Outcome {
    pub results: Value,
    pub assertions: Vec<Assertion>,
    /// `(suffix, contents)`; the first entry goes to the `fields` path.
    pub csv: Vec<(String, String)>,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub tool: &'static str,
    pub version: &'static str,
    pub verb: String,
    /// SHA-256 of the config file bytes, when a file was given.
    pub config_sha256: Option<String>,
    /// SHA-256 of the effective configuration (file plus flag overrides) as
    /// canonical JSON.
    pub effective_sha256: String,
    pub inputs: Value,
    pub results: Value,
    pub assertions: Vec<Assertion>,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is serialisable");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json().as_bytes())
    }
}

/// Fixed-format float for CSV cells.
pub fn cell(v: f64) -> String {
    format!("{v:.17e}")
}
