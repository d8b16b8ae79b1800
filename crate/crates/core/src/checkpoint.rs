//! Single-file checkpoints: safetensors weights plus string metadata with a
//! format tag and version, written atomically.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use candle_core::{Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub const FORMAT_KEY: &str = "format";
pub const VERSION_KEY: &str = "version";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(format: &str, version: u32) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert(FORMAT_KEY.to_string(), format.to_string());
        metadata.insert(VERSION_KEY.to_string(), version.to_string());
        Self {
            tensors: BTreeMap::new(),
            metadata,
        }
    }

    pub fn with_tensors(mut self, prefix: &str, tensors: BTreeMap<String, Tensor>) -> Self {
        for (k, v) in tensors {
            self.tensors.insert(format!("{prefix}{k}"), v);
        }
        self
    }

    pub fn set_json<T: serde::Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.metadata.insert(key.to_string(), serde_json::to_string(value)?);
        Ok(())
    }

    pub fn json<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let raw = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("metadata key `{key}` missing")))?;
        Ok(serde_json::from_str(raw)?)
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        let contiguous: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.contiguous()?)))
            .collect::<Result<_>>()?;
        let mut bytes = safetensors::serialize(contiguous.iter().map(|(k, v)| (k.as_str(), v)), Some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        canonicalize_header(&mut bytes)?;
        Ok(bytes)
    }

    /// Writes to a temporary sibling and renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    /// Loads and checks the format tag and version.
    pub fn load(path: &Path, format: &str, version: u32) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        let ck = Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let found = ck.metadata.get(FORMAT_KEY).map(String::as_str).unwrap_or("<none>");
        if found != format {
            return Err(Error::Checkpoint(format!(
                "{} is a `{found}` checkpoint, expected `{format}`",
                path.display()
            )));
        }
        let v = ck.metadata.get(VERSION_KEY).and_then(|v| v.parse::<u32>().ok());
        if v != Some(version) {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported {format} version {v:?} (this build reads {version})",
                path.display()
            )));
        }
        Ok(ck)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, meta) =
            safetensors::SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let metadata = meta
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?
            .into_iter()
            .collect();
        Ok(Self { tensors, metadata })
    }
}

/// The metadata map goes through a `HashMap`, so its key order in the JSON
/// header varies between runs. Rewriting the header with sorted keys (same
/// length, same offsets) makes identical checkpoints byte-identical.
fn canonicalize_header(bytes: &mut [u8]) -> Result<()> {
    let bad = || Error::Checkpoint("malformed safetensors header".into());
    let len = u64::from_le_bytes(bytes.get(..8).ok_or_else(bad)?.try_into().expect("8 bytes")) as usize;
    let header = bytes.get(8..8 + len).ok_or_else(bad)?;
    let value: serde_json::Value = serde_json::from_slice(header)?;
    let sorted = serde_json::to_vec(&value)?;
    if sorted.len() > len {
        return Err(bad());
    }
    let slot = &mut bytes[8..8 + len];
    slot[..sorted.len()].copy_from_slice(&sorted);
    slot[sorted.len()..].fill(b' ');
    Ok(())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = std::fs::File::create(&tmp).at(&tmp)?;
        f.write_all(bytes).at(&tmp)?;
        f.sync_all().at(&tmp)?;
    }
    std::fs::rename(&tmp, path).at(path)
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).at(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn round_trip_keeps_tensors_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.safetensors");
        let mut ck = Checkpoint::new("thing", 2);
        ck.tensors.insert("a.w".into(), Tensor::arange(0f32, 6.0, &Device::Cpu).unwrap().reshape((2, 3)).unwrap());
        ck.tensors.insert("b".into(), Tensor::ones(2, DType::F64, &Device::Cpu).unwrap());
        ck.set_json("scale", &0.25f64).unwrap();
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p, "thing", 2).unwrap();
        assert_eq!(back.json::<f64>("scale").unwrap(), 0.25);
        assert_eq!(back.section("a.").keys().collect::<Vec<_>>(), vec!["w"]);
        assert_eq!(
            back.tensors["a.w"].to_vec2::<f32>().unwrap(),
            vec![vec![0.0, 1.0, 2.0], vec![3.0, 4.0, 5.0]]
        );
        assert!(Checkpoint::load(&p, "other", 2).is_err());
        assert!(Checkpoint::load(&p, "thing", 3).is_err());
        assert_eq!(file_sha256(&p).unwrap().len(), 64);
        assert!(!dir.path().join("m.safetensors.tmp").exists());
    }
}
