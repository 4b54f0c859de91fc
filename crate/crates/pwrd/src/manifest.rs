//! Run manifests: enough to re-run a command and check its inputs.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub subcommand: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    /// Every setting with defaults filled in.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<InputDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path.display().to_string(), e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

impl RunManifest {
    pub fn new(
        subcommand: &str,
        argv: &[String],
        config: &impl Serialize,
        seed: Option<u64>,
        inputs: &[&Path],
    ) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            argv: argv.to_vec(),
            config: serde_json::to_value(config)?,
            seed,
            inputs: inputs
                .iter()
                .map(|p| Ok(InputDigest { path: p.display().to_string(), sha256: sha256_file(p)? }))
                .collect::<Result<_>>()?,
        })
    }

    /// Fails if any recorded input no longer matches its checksum.
    pub fn verify_inputs(&self) -> Result<()> {
        for input in &self.inputs {
            if sha256_file(Path::new(&input.path))? != input.sha256 {
                return Err(Error::ChecksumMismatch(input.path.clone()));
            }
        }
        Ok(())
    }
}
