//! Stage manifests: each stage directory records the content hashes of what it
//! read and wrote, so later stages can refuse stale or missing inputs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    /// Input path (as given) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name, relative to the stage directory, to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

impl Manifest {
    pub fn new(stage: &str, seed: u64, config_hash: String) -> Self {
        Manifest {
            stage: stage.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_hash,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Hashes every listed output in `dir` and writes the manifest last, so a
    /// manifest exists only for a completed stage.
    pub fn finish(mut self, dir: &Path, outputs: &[&str]) -> Result<Self> {
        for name in outputs {
            self.outputs.insert((*name).to_string(), sha256_file(&dir.join(name))?);
        }
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(self)
    }
}

/// Loads the manifest of a finished stage and verifies every recorded output.
/// `remedy` names the command that regenerates the stage.
pub fn require_stage(dir: &Path, remedy: &str) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::MissingArtifact { path, remedy: format!("stage has not run; run `{remedy}` first") });
    }
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&path)?).map_err(|e| Error::MissingArtifact {
        path: path.clone(),
        remedy: format!("unreadable manifest ({e}); rerun `{remedy}`"),
    })?;
    for (name, digest) in &m.outputs {
        let p = dir.join(name);
        if !p.is_file() {
            return Err(Error::MissingArtifact { path: p, remedy: format!("output deleted; rerun `{remedy}`") });
        }
        if &sha256_file(&p)? != digest {
            return Err(Error::MissingArtifact {
                path: p,
                remedy: format!("contents changed since the stage ran; rerun `{remedy}`"),
            });
        }
    }
    Ok(m)
}

/// Fails with a remediation message when `path` does not exist.
pub fn require_file(path: &Path, remedy: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::MissingArtifact { path: path.to_path_buf(), remedy: remedy.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stale_and_missing_outputs_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "alpha").unwrap();
        assert!(matches!(require_stage(dir.path(), "hcr synth"), Err(Error::MissingArtifact { .. })));
        Manifest::new("synth", 1, "h".into()).finish(dir.path(), &["a.txt"]).unwrap();
        let m = require_stage(dir.path(), "hcr synth").unwrap();
        assert_eq!(m.outputs["a.txt"], sha256_file(&dir.path().join("a.txt")).unwrap());
        std::fs::write(dir.path().join("a.txt"), "beta").unwrap();
        match require_stage(dir.path(), "hcr synth") {
            Err(e @ Error::MissingArtifact { .. }) => {
                assert_eq!(e.exit_code(), 3);
                assert!(e.to_string().contains("hcr synth"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, "abc").unwrap();
        assert_eq!(sha256_file(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
