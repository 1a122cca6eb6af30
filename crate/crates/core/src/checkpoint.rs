//! Versioned weight archives.
//!
//! An archive is a safetensors file whose tensors are namespaced by section
//! (`mapper_id/`, `discriminator/`, `opt_g/`, ...) and whose header carries
//! a single metadata entry holding a JSON header block. Keeping a single
//! entry makes the file bytes a deterministic function of the contents.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "twinlatent";

/// Metadata stored alongside the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub format_version: u32,
    /// What the archive holds: `"gan"`, `"train-state"`, `"provider"`, ...
    pub kind: String,
    /// Provider tag for embedder / pose archives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
    /// Kind-specific configuration block.
    pub config: serde_json::Value,
}

impl ArchiveHeader {
    pub fn new<C: Serialize>(kind: &str, provider: Option<&str>, config: &C) -> Result<Self> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            provider: provider.map(str::to_string),
            config: serde_json::to_value(config)?,
        })
    }

    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.config.clone())?)
    }
}

/// In-memory archive: sections of named tensors plus the header.
#[derive(Clone)]
pub struct Archive {
    pub header: ArchiveHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new(header: ArchiveHeader) -> Self {
        Self {
            header,
            tensors: BTreeMap::new(),
        }
    }

    pub fn add_store(&mut self, section: &str, store: &ParamStore) {
        for (name, t) in store.tensors() {
            self.tensors.insert(format!("{section}/{name}"), t.clone());
        }
    }

    pub fn add_tensors(&mut self, section: &str, items: impl IntoIterator<Item = (String, Tensor)>) {
        for (name, t) in items {
            self.tensors.insert(format!("{section}/{name}"), t);
        }
    }

    /// All tensors of one section, with the section prefix stripped.
    pub fn section(&self, section: &str) -> BTreeMap<String, Tensor> {
        let prefix = format!("{section}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|n| (n.to_string(), v.clone())))
            .collect()
    }

    pub fn store(&self, section: &str) -> Result<ParamStore> {
        ParamStore::from_tensors(self.section(section))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&self.header)?;
        let info = HashMap::from([(HEADER_KEY.to_string(), header)]);
        let data: Vec<(&String, Tensor)> = self
            .tensors
            .iter()
            .map(|(k, v)| v.contiguous().map(|t| (k, t)))
            .collect::<candle_core::Result<_>>()?;
        safetensors::serialize(data, Some(info))
            .map_err(|e| Error::Numeric(format!("archive serialization failed: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        crate::io_util::write_atomic(path, &bytes)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes)
            .map_err(|e| Error::format(origin, format!("not a weight archive: {e}")))?;
        let (_, meta) = SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::format(origin, format!("bad archive header: {e}")))?;
        let raw = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| Error::format(origin, "archive header block missing"))?;
        let header: ArchiveHeader = serde_json::from_str(raw)
            .map_err(|e| Error::format(origin, format!("archive header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::format(
                origin,
                format!(
                    "unsupported archive format version {} (expected {FORMAT_VERSION})",
                    header.format_version
                ),
            ));
        }
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            use candle_core::safetensors::Load;
            tensors.insert(name, view.load(&Device::Cpu)?);
        }
        Ok(Self { header, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_preserves_tensors_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.safetensors");
        let mut store = ParamStore::new();
        store.insert(
            "fc.weight",
            candle_core::Var::new(&[[1.5f32, -2.0], [0.25, 4.0]], &Device::Cpu).unwrap(),
        );
        let header = ArchiveHeader::new("test", Some("oracle"), &serde_json::json!({"n": 3})).unwrap();
        let mut a = Archive::new(header.clone());
        a.add_store("net", &store);
        a.save(&path).unwrap();
        let b = Archive::load(&path).unwrap();
        assert_eq!(b.header, header);
        let back = b.store("net").unwrap();
        assert_eq!(back.checksum().unwrap(), store.checksum().unwrap());
        // Bytes are a pure function of the contents.
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"definitely not safetensors").unwrap();
        assert!(matches!(Archive::load(&path), Err(Error::Format { .. })));
    }
}
