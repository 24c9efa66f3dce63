//! Single-file checkpoint codec.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "DMOECKPT"
//! 8       4     format version (u32, currently 1)
//! 12      8     header length H in bytes (u64)
//! 20      H     header, UTF-8 JSON: {version, config, meta, tensors:[{name, dtype, shape, offset, nbytes}]}
//! 20+H    ...   payload: tensors back to back as little-endian f64, at the listed offsets
//!               (relative to the payload start), in directory order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::numcore::{ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"DMOECKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Which pipeline step produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Init,
    Specialist,
    Fused,
    Warmup,
    Joint,
    DenseBaseline,
}

impl StageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Init => "init",
            StageTag::Specialist => "specialist",
            StageTag::Fused => "fused",
            StageTag::Warmup => "warmup",
            StageTag::Joint => "joint",
            StageTag::DenseBaseline => "dense_baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: StageTag,
    /// Domain a specialist was trained on.
    pub domain: Option<String>,
    pub seed: u64,
    pub step: u64,
    /// Parameters to hold fixed in the next stage.
    #[serde(default)]
    pub frozen: Vec<String>,
}

impl CheckpointMeta {
    pub fn new(stage: StageTag, seed: u64) -> Self {
        Self { stage, domain: None, seed, step: 0, frozen: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TransformerModel,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(model: TransformerModel, meta: CheckpointMeta) -> Self {
        Self { model, meta }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.model.params
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .model
            .params
            .iter()
            .map(|(name, t)| {
                let nbytes = (t.len() * 8) as u64;
                let e = TensorEntry { name: name.clone(), dtype: "f64".into(), shape: t.shape().to_vec(), offset, nbytes };
                offset += nbytes;
                e
            })
            .collect();
        let header = Header { version: FORMAT_VERSION, config: self.model.config.clone(), meta: self.meta.clone(), tensors };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.model.params.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..payload_start])?;
        if header.version != version {
            return Err(bad("header version disagrees with preamble"));
        }
        let payload = &bytes[payload_start..];
        let mut params = ParamSet::new();
        let mut expected_offset = 0u64;
        for e in header.tensors {
            if e.dtype != "f64" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if e.nbytes != (n * 8) as u64 || e.offset != expected_offset {
                return Err(Error::Checkpoint(format!("{}: inconsistent directory entry", e.name)));
            }
            let end = (e.offset + e.nbytes) as usize;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("{}: payload truncated", e.name)));
            }
            let data = payload[e.offset as usize..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if params.insert(e.name.clone(), Tensor::new(e.shape, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", e.name)));
            }
            expected_offset += e.nbytes;
        }
        if expected_offset as usize != payload.len() {
            return Err(bad("trailing bytes after payload"));
        }
        let model = TransformerModel::from_params(header.config, params)?;
        Ok(Self { model, meta: header.meta })
    }

    /// Writes via a temporary sibling and rename, so a failed write never
    /// leaves a partial checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.partial");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing(format!("checkpoint {}", path.display()))
            } else {
                e.into()
            }
        })?;
        Self::from_bytes(&bytes)
    }
}
