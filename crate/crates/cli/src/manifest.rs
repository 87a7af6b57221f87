//! Run manifests: what was run, on what, and when.

use std::path::Path;

use serde::Serialize;

use crate::error::CliError;

/// Written before any training starts, so an interrupted run still records
/// its inputs. Timestamps live here and nowhere else; every other artifact
/// is a pure function of the inputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub started_at: String,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub cohort_config: Option<String>,
    pub cells_file: Option<String>,
    pub clinical_file: Option<String>,
    pub n_patients: Option<usize>,
    pub n_cores: Option<usize>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            started_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            config_hash: None,
            seed: None,
            cohort_config: None,
            cells_file: None,
            clinical_file: None,
            n_patients: None,
            n_cores: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(higine::pipeline::RUN_MANIFEST_FILE);
        write_json(&path, self)
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
