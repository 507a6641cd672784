use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

use crate::args::{Command, BUILD_ID};
use crate::error::{CliError, CliResult};
use crate::output::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to repeat a run: the command with its resolved
/// parameters, the digests of what it read and of what it wrote.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub parameters: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started: String,
    pub finished: String,
}

impl RunManifest {
    pub fn new(command: &Command, seed: Option<u64>, inputs: Vec<FileDigest>, outputs: Vec<FileDigest>, started: String) -> CliResult<Self> {
        let tagged = serde_json::to_value(command)?;
        let parameters = tagged.get("parameters").cloned().unwrap_or(serde_json::Value::Null);
        Ok(Self {
            tool: "bscm".into(),
            version: BUILD_ID.into(),
            command: command.name().into(),
            parameters,
            seed,
            inputs,
            outputs,
            started,
            finished: timestamp(),
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::usage(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::usage(format!("malformed manifest {}: {e}", path.display())))
    }

    /// The recorded command, after checking that its inputs are unchanged.
    pub fn command(&self) -> CliResult<Command> {
        for input in &self.inputs {
            let bytes = std::fs::read(&input.path)
                .map_err(|e| CliError::usage(format!("manifest input {} is unreadable: {e}", input.path)))?;
            if sha256_hex(&bytes) != input.sha256 {
                return Err(CliError::usage(format!("manifest input {} changed since the recorded run", input.path)));
            }
        }
        let tagged = serde_json::json!({ "command": self.command, "parameters": self.parameters });
        serde_json::from_value(tagged).map_err(|e| CliError::usage(format!("manifest parameters do not describe a run: {e}")))
    }
}

/// RFC 3339 time of now, or of `$SOURCE_DATE_EPOCH` when set so that
/// manifests are reproducible too.
pub fn timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs() as i64).unwrap_or(0));
    OffsetDateTime::from_unix_timestamp(secs)
        .ok()
        .and_then(|t| t.format(&Rfc3339).ok())
        .unwrap_or_else(|| secs.to_string())
}
