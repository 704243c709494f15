//! Run manifests written next to every output file.

use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunManifest {
    /// The command line, arguments separated by spaces.
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub version: String,
    /// Input files with the SHA-256 of their content.
    pub inputs: Vec<(PathBuf, String)>,
    /// RFC 3339, UTC.
    pub timestamp: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

impl RunManifest {
    pub fn new(command: String, config: Option<&Path>, seed: Option<u64>, inputs: &[&Path]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| Ok((p.to_path_buf(), sha256_file(p)?)))
            .collect::<Result<_>>()?;
        Ok(RunManifest {
            command,
            config: config.map(Path::to_path_buf),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command = {}", self.command);
        if let Some(c) = &self.config {
            let _ = writeln!(out, "config = {}", c.display());
        }
        if let Some(s) = self.seed {
            let _ = writeln!(out, "seed = {s}");
        }
        let _ = writeln!(out, "version = {}", self.version);
        for (p, h) in &self.inputs {
            let _ = writeln!(out, "input = {} sha256:{h}", p.display());
        }
        let _ = writeln!(out, "timestamp = {}", self.timestamp);
        out
    }

    /// Writes `<output>.manifest` and returns its path.
    pub fn write_for(&self, output: &Path) -> Result<PathBuf> {
        let mut name = output.as_os_str().to_owned();
        name.push(".manifest");
        let path = PathBuf::from(name);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
