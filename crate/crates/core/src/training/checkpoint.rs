//! Checkpoint directory: `manifest.json` (stage, config, vocabulary, metadata, tensor
//! list with trainability flags, digests) and `tensors.bin` (named little-endian tensors).

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::freeze::FinetuneLayers;
use crate::detector::{Branch, Detector, DetectorConfig, ParameterStore, Stage};
use crate::error::{Error, Result};
use crate::synthdata::ClassVocabulary;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
const MAGIC: &[u8; 8] = b"ITFATNSR";
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    /// Optimizer steps taken in the stage that produced the checkpoint.
    pub step: usize,
    pub seed: u64,
    pub config_digest: String,
    pub surgery_seed: Option<u64>,
    pub freeze_policy: Option<FinetuneLayers>,
    pub shots: Option<usize>,
    pub support_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterStore,
    pub config: DetectorConfig,
    pub vocabulary: ClassVocabulary,
    pub metadata: CheckpointMetadata,
}

/// SHA-256 of the canonical JSON of the detector configuration and vocabulary.
pub fn config_digest(config: &DetectorConfig, vocab: &ClassVocabulary) -> String {
    let doc = serde_json::json!({ "detector": config, "vocabulary": vocab });
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))
}

impl Checkpoint {
    /// Fresh base-stage checkpoint.
    pub fn init_base(config: DetectorConfig, vocabulary: ClassVocabulary, seed: u64) -> Result<Self> {
        let params = ParameterStore::init_base(&config, &vocabulary, seed)?;
        let metadata = CheckpointMetadata {
            seed,
            config_digest: config_digest(&config, &vocabulary),
            ..Default::default()
        };
        Ok(Self { params, config, vocabulary, metadata })
    }

    pub fn stage(&self) -> Stage {
        self.params.stage()
    }

    pub fn detector(&self) -> Result<Detector<'_>> {
        Detector::new(&self.config, &self.params)
    }

    /// Stage/name consistency, head widths and finiteness.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let novel_names = [
            Branch::Novel.fc_w(1),
            Branch::Novel.fc_b(1),
            Branch::Novel.fc_w(2),
            Branch::Novel.fc_b(2),
            Branch::Novel.cls_w(),
        ];
        let present = novel_names.iter().filter(|n| self.params.contains(n)).count();
        match self.stage() {
            Stage::Base if present > 0 => {
                return Err(Error::Integrity("base-stage checkpoint carries novel-branch tensors".into()))
            }
            Stage::Branched if present < novel_names.len() => {
                return Err(Error::Integrity("branched checkpoint is missing novel-branch tensors".into()))
            }
            _ => {}
        }
        if self.params.view2(&Branch::Base.cls_w())?.nrows() != self.vocabulary.num_base() + 1 {
            return Err(Error::Dimension("base classifier rows do not match the vocabulary".into()));
        }
        if self.stage() == Stage::Branched
            && self.params.view2(&Branch::Novel.cls_w())?.nrows() != self.vocabulary.num_novel()
        {
            return Err(Error::Dimension("novel classifier rows do not match the vocabulary".into()));
        }
        if !self.params.all_finite() {
            return Err(Error::Integrity("checkpoint contains non-finite values".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    stage: Stage,
    detector: DetectorConfig,
    vocabulary: ClassVocabulary,
    metadata: CheckpointMetadata,
    config_digest: String,
    tensors_sha256: String,
    tensors: Vec<TensorEntry>,
}

fn encode_tensors(params: &ParameterStore) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F64);
        buf.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Integrity("tensor archive is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode_tensors(buf: &[u8]) -> Result<Vec<(String, ArrayD<f64>)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Integrity("tensor archive has a bad magic header".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_FORMAT_VERSION });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
            .to_string();
        if r.take(1)?[0] != DTYPE_F64 {
            return Err(Error::Integrity(format!("tensor {name} has an unknown element type")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Integrity(format!("tensor {name} has an absurd shape")))?;
        let bytes = r.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("tensor too large".into()))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Integrity(e.to_string()))?;
        out.push((name, arr));
    }
    if r.pos != buf.len() {
        return Err(Error::Integrity("trailing bytes after the last tensor".into()));
    }
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    ckpt.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin = encode_tensors(&ckpt.params);
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        stage: ckpt.stage(),
        detector: ckpt.config.clone(),
        vocabulary: ckpt.vocabulary.clone(),
        metadata: ckpt.metadata.clone(),
        config_digest: config_digest(&ckpt.config, &ckpt.vocabulary),
        tensors_sha256: hex::encode(Sha256::digest(&bin)),
        tensors: ckpt
            .params
            .iter()
            .map(|(name, p)| TensorEntry {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                dtype: "f64".into(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let bin_path = dir.join(TENSORS_FILE);
    fs::write(&bin_path, &bin).map_err(|e| Error::io(&bin_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&man_path, text).map_err(|e| Error::io(&man_path, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let man_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("manifest is not valid JSON: {e}")))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    match version {
        Some(v) if v == CHECKPOINT_FORMAT_VERSION as u64 => {}
        Some(v) => return Err(Error::Version { found: v as u32, expected: CHECKPOINT_FORMAT_VERSION }),
        None => return Err(Error::Integrity("manifest has no format_version".into())),
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| Error::Integrity(format!("malformed manifest: {e}")))?;
    let digest = config_digest(&manifest.detector, &manifest.vocabulary);
    if digest != manifest.config_digest {
        return Err(Error::Integrity("config digest mismatch".into()));
    }
    let bin_path = dir.join(TENSORS_FILE);
    let bin = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if hex::encode(Sha256::digest(&bin)) != manifest.tensors_sha256 {
        return Err(Error::Integrity("tensor archive digest mismatch".into()));
    }
    let tensors = decode_tensors(&bin)?;
    if tensors.len() != manifest.tensors.len() {
        return Err(Error::Integrity("manifest and archive list different tensor counts".into()));
    }
    let mut params = ParameterStore::empty(manifest.stage);
    for ((name, arr), entry) in tensors.into_iter().zip(&manifest.tensors) {
        if name != entry.name || arr.shape() != entry.shape.as_slice() || entry.dtype != "f64" {
            return Err(Error::Integrity(format!("tensor {name} disagrees with the manifest")));
        }
        params.insert(name, arr, entry.trainable);
    }
    let ckpt = Checkpoint {
        params,
        config: manifest.detector,
        vocabulary: manifest.vocabulary,
        metadata: manifest.metadata,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::DatasetConfig;

    fn ckpt() -> Checkpoint {
        let vocab = DatasetConfig::default().vocabulary().unwrap();
        let config = DetectorConfig { roi_feature_dim: 16, backbone_channels: vec![4, 8, 8, 8], rpn_channels: 8, ..Default::default() };
        Checkpoint::init_base(config, vocab, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ckpt();
        c.params.set_trainable("reg.W", false).unwrap();
        c.metadata.step = 17;
        save_checkpoint(&c, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        for name in c.params.names() {
            assert!(back.params.tensor_bits_equal(&c.params, name), "{name}");
            assert_eq!(back.params.is_trainable(name), c.params.is_trainable(name));
        }
        assert_eq!(back, c);
    }

    #[test]
    fn corrupted_archive_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ckpt(), dir.path()).unwrap();
        let path = dir.path().join(TENSORS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn edited_config_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ckpt(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"cosine_scale\": 20.0", "\"cosine_scale\": 10.0");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ckpt(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Version { found: 99, expected: 1 })));
    }
}
