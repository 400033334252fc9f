//! Provenance blocks stamped on every output file.
//!
//! A block names the tool and version, the effective configuration with its
//! SHA-256, and the SHA-256 of every input file by role. Paths and clock
//! times are left out so reruns on identical inputs are byte-identical.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use markertrack::Error;

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub role: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: serde_json::Value,
    pub config_sha256: String,
    pub inputs: Vec<InputDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, Error> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    Ok(sha256_hex(&bytes))
}

impl Provenance {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        let config = serde_json::to_value(config).expect("config serializes");
        let canonical = serde_json::to_vec(&config).expect("value serializes");
        Self {
            tool: "markertrack",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_owned(),
            config_sha256: sha256_hex(&canonical),
            config,
            inputs: Vec::new(),
        }
    }

    pub fn with_input(mut self, role: &str, path: &Path) -> Result<Self, Error> {
        self.inputs.push(InputDigest {
            role: role.to_owned(),
            sha256: file_sha256(path)?,
        });
        Ok(self)
    }

    /// `#`-prefixed lines for the top of a CSV file.
    pub fn csv_header(&self) -> String {
        let mut out = format!("# {} {}\n# command: {}\n", self.tool, self.version, self.command);
        out.push_str(&format!("# config_sha256: {}\n", self.config_sha256));
        out.push_str(&format!(
            "# config: {}\n",
            serde_json::to_string(&self.config).expect("value serializes")
        ));
        for i in &self.inputs {
            out.push_str(&format!("# input {}: sha256 {}\n", i.role, i.sha256));
        }
        out
    }
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: &'a T,
}

/// Pretty JSON object with a leading `provenance` member. `body` must
/// serialize as a map.
pub fn write_json(path: &Path, provenance: &Provenance, body: &impl Serialize) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(&Stamped { provenance, body }).map_err(|e| Error::Parse {
        what: "output",
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_csv(path: &Path, provenance: &Provenance, body: &str) -> Result<(), Error> {
    write_text(path, &format!("{}{body}", provenance.csv_header()))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}
