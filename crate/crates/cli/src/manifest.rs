//! Per-run manifests linking configuration digests to artifact files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const RUN_MANIFEST_FILE: &str = "run.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub kind: String,
    pub experiment_digest: String,
    /// Detector configuration and vocabulary digest of the produced checkpoint.
    pub config_digest: String,
    pub shots: Option<usize>,
    pub seed: Option<u64>,
    pub policy: Option<String>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn new(kind: &str, experiment_digest: String, config_digest: String) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            kind: kind.to_string(),
            experiment_digest,
            config_digest,
            shots: None,
            seed: None,
            policy: None,
            artifacts: Vec::new(),
        }
    }

    /// Hashes every regular file below `dir` (except the manifest itself) in sorted
    /// path order and writes the manifest.
    pub fn write(mut self, dir: &Path) -> Result<RunManifest> {
        let mut files = BTreeMap::new();
        collect_files(dir, dir, &mut files)?;
        files.remove(RUN_MANIFEST_FILE);
        self.artifacts = files
            .into_iter()
            .map(|(rel, path)| {
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                Ok(Artifact {
                    path: rel,
                    sha256: hex::encode(Sha256::digest(&bytes)),
                })
            })
            .collect::<Result<_>>()?;
        let path = dir.join(RUN_MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&self)?).map_err(|e| Error::io(&path, e))?;
        Ok(self)
    }

    pub fn read(dir: &Path) -> Result<RunManifest> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, std::path::PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("inside root");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            out.insert(rel, path);
        }
    }
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_nested_files_sorted_with_hashes() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("ckpt")).unwrap();
        std::fs::write(dir.path().join("report.json"), "{}").unwrap();
        std::fs::write(dir.path().join("ckpt/tensors.bin"), b"abc").unwrap();
        let m = RunManifest::new("finetune", "e".into(), "c".into()).write(dir.path()).unwrap();
        let paths: Vec<&str> = m.artifacts.iter().map(|a| a.path.as_str()).collect();
        assert_eq!(paths, ["ckpt/tensors.bin", "report.json"]);
        assert_eq!(m.artifacts[0].sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(RunManifest::read(dir.path()).unwrap(), m);
        let again = RunManifest::new("finetune", "e".into(), "c".into()).write(dir.path()).unwrap();
        assert_eq!(again, m);
    }
}
