//! Binary weight blob plus a TOML metadata sidecar (`<path>.toml`).
//!
//! Blob layout: `b"TMUW"`, format version (u32 LE), arch tag length (u32 LE),
//! arch tag bytes, parameter count (u64 LE), then the parameters as f32 LE.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{build_model, Arch, Provenance, TrainedModel};
use crate::error::{Error, Result};
use crate::nn::ImageShape;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TMUW";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub arch: Arch,
    pub arch_tag: String,
    pub num_classes: usize,
    pub input_shape: ImageShape,
    pub seed: u64,
    pub content_hash: String,
    pub provenance: Provenance,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<CheckpointMeta> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tag = model.arch.tag();
    let params = model.network.params();
    let mut blob = Vec::with_capacity(24 + tag.len() + 4 * params.len());
    blob.extend_from_slice(MAGIC);
    blob.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    blob.extend_from_slice(&(tag.len() as u32).to_le_bytes());
    blob.extend_from_slice(tag.as_bytes());
    blob.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        blob.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, &blob).map_err(|e| Error::io(path, e))?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        arch: model.arch.clone(),
        arch_tag: tag,
        num_classes: model.num_classes(),
        input_shape: model.network.input_shape(),
        seed: model.seed,
        content_hash: model.content_hash(),
        provenance: model.provenance.clone(),
    };
    let side = sidecar_path(path);
    fs::write(&side, toml::to_string(&meta)?).map_err(|e| Error::io(&side, e))?;
    Ok(meta)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint blob is truncated".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = toml::from_str(&text)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: meta.format_version, expected: FORMAT_VERSION });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format(format!("{} is not a weight blob", path.display())));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let tag_len = r.u32()? as usize;
    let tag = String::from_utf8_lossy(r.take(tag_len)?).into_owned();
    if tag != meta.arch_tag || tag != meta.arch.tag() {
        return Err(Error::CheckpointMismatch(format!("blob arch `{tag}` disagrees with sidecar `{}`", meta.arch_tag)));
    }
    let n = r.u64()? as usize;
    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("parameter count overflow".into()))?)?;
    if r.at != bytes.len() {
        return Err(Error::Format("trailing bytes after weights".into()));
    }
    let params: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();

    let mut model = build_model(&meta.arch, meta.input_shape, meta.num_classes, meta.seed)?;
    if model.network.num_params() != n {
        return Err(Error::CheckpointMismatch(format!(
            "arch `{tag}` has {} parameters, blob holds {n}",
            model.network.num_params()
        )));
    }
    model.network.set_params(params)?;
    model.provenance = meta.provenance;
    let hash = model.content_hash();
    if hash != meta.content_hash {
        return Err(Error::CheckpointMismatch(format!(
            "content hash {hash} does not match sidecar {}",
            meta.content_hash
        )));
    }
    Ok(model)
}

/// Loads a checkpoint and rejects it unless it was saved for `arch`.
pub fn load_checkpoint_expecting(path: &Path, arch: &Arch) -> Result<TrainedModel> {
    let model = load_checkpoint(path)?;
    if &model.arch != arch {
        return Err(Error::CheckpointMismatch(format!(
            "expected arch `{}`, checkpoint holds `{}`",
            arch.tag(),
            model.arch.tag()
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modeling::{train, TrainConfig};

    fn small_model() -> TrainedModel {
        let tt = crate::data::synthetic::gaussian_blobs(&Default::default());
        let m = build_model(&Arch::Mlp { hidden: vec![8] }, tt.train.shape(), 2, 11).unwrap();
        let cfg = TrainConfig { epochs: 1, lr_milestones: vec![], ..TrainConfig::default() };
        train(&m, &tt.train, &cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = small_model();
        let meta = save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let a: Vec<u32> = m.network.params().iter().map(|p| p.to_bits()).collect();
        let b: Vec<u32> = back.network.params().iter().map(|p| p.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.provenance, m.provenance);
        assert_eq!(meta.content_hash, back.content_hash());
        assert_eq!(back.provenance.history, vec!["train".to_string()]);
    }

    #[test]
    fn wrong_arch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_checkpoint(&small_model(), &path).unwrap();
        let err = load_checkpoint_expecting(&path, &Arch::Mlp { hidden: vec![9] }).unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch(_)));
    }

    #[test]
    fn version_bump_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_checkpoint(&small_model(), &path).unwrap();
        let side = sidecar_path(&path);
        let text = fs::read_to_string(&side).unwrap().replace("format_version = 1", "format_version = 2");
        fs::write(&side, text).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::VersionMismatch { found: 2, .. })));
    }

    #[test]
    fn tampered_weights_fail_the_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_checkpoint(&small_model(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointMismatch(_))));
    }
}
