//! Versioned JSON envelope for structured reports.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::TOOL_VERSION;
use crate::error::{Error, Result};

pub const REPORT_FORMAT: &str = "resprune-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report<T> {
    pub format: String,
    pub version: u32,
    /// What the body holds, e.g. `importance` or `eval`.
    pub kind: String,
    pub tool_version: String,
    pub config_digest: String,
    pub body: T,
}

impl<T> Report<T> {
    pub fn new(kind: impl Into<String>, config_digest: impl Into<String>, body: T) -> Self {
        Self {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            kind: kind.into(),
            tool_version: TOOL_VERSION.into(),
            config_digest: config_digest.into(),
            body,
        }
    }
}

impl<T: Serialize> Report<T> {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}

/// Envelope fields only; the body is left unparsed.
#[derive(Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    kind: String,
}

impl<T: DeserializeOwned> Report<T> {
    /// Parses a report, checking the envelope before the body so a version
    /// mismatch is reported as such even when the body layout changed.
    pub fn from_json(text: &str, kind: Option<&str>) -> Result<Self> {
        let env: Envelope = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("report envelope: {e}")))?;
        if env.format != REPORT_FORMAT {
            return Err(Error::Parse(format!(
                "not a report: format {:?}",
                env.format
            )));
        }
        if env.version != REPORT_VERSION {
            return Err(Error::Version {
                found: env.version,
                expected: REPORT_VERSION,
            });
        }
        if let Some(k) = kind.filter(|k| *k != env.kind) {
            return Err(Error::Parse(format!(
                "expected a {k} report, found {}",
                env.kind
            )));
        }
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("{} report: {e}", env.kind)))
    }
}

pub fn save_report<T: Serialize>(path: &Path, report: &Report<T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, report.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn load_report<T: DeserializeOwned>(path: &Path, kind: Option<&str>) -> Result<Report<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::io(path, e),
    })?;
    Report::from_json(&text, kind)
}
