//! Single-file binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "XFTC" | version u32 | config_len u64 | config JSON
//! tensor_count u64
//! per tensor: name_len u32 | name | dtype u8 (0 = f32) | rank u32 | dims u64 × rank | offset u64
//! data section: f32 values, offsets relative to its start
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XftError};
use crate::moe::{upcycle, MoeConfig};
use crate::tensor::Tensor;
use crate::transformer::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"XFTC";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Pipeline stage that produced the checkpoint, e.g. `sft` or `merge`.
    pub phase: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl CheckpointMeta {
    pub fn new(phase: &str, seed: u64) -> Self {
        Self { phase: phase.to_string(), seed, lambda: None }
    }
}

#[derive(Serialize, Deserialize)]
struct ConfigBlob {
    model: ModelConfig,
    #[serde(default)]
    moe: Option<MoeConfig>,
    meta: CheckpointMeta,
}

/// Serializes a model to bytes in checkpoint layout.
pub fn encode(model: &Model<Tensor<f32>>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    model.validate()?;
    let blob = ConfigBlob { model: model.config.clone(), moe: model.moe.clone(), meta: meta.clone() };
    let config = serde_json::to_vec(&blob).map_err(|e| XftError::Checkpoint(format!("config: {e}")))?;
    let params = model.named_params();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.len() as u64;
    }
    out.reserve(offset as usize);
    for (_, t) in &params {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes the checkpoint through a temporary file in the target directory
/// and renames it into place.
pub fn save_checkpoint(model: &Model<Tensor<f32>>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode(model, meta)?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| XftError::io(path, e))?;
    tmp.write_all(&bytes).map_err(|e| XftError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| XftError::io(path, e))?;
    tmp.persist(path).map_err(|e| XftError::io(path, e.error))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            XftError::Checkpoint(format!(
                "truncated {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

/// Parses checkpoint bytes back into a model and its metadata.
pub fn decode(buf: &[u8]) -> Result<(Model<Tensor<f32>>, CheckpointMeta)> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "header")?;
    if magic != MAGIC {
        return Err(XftError::Checkpoint(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(XftError::Checkpoint(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let config_len = r.u64("header")?;
    let config = r.take(usize::try_from(config_len).unwrap_or(usize::MAX), "config blob")?;
    let blob: ConfigBlob =
        serde_json::from_slice(config).map_err(|e| XftError::Checkpoint(format!("config blob: {e}")))?;
    blob.model.validate()?;
    if let Some(m) = &blob.moe {
        m.validate()?;
    }

    let count = r.u64("tensor directory")?;
    let mut entries = Vec::new();
    for i in 0..count {
        let name_len = r.u32("tensor directory")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor directory")?)
            .map_err(|_| XftError::Checkpoint(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let dtype = r.u8("tensor directory")?;
        if dtype != DTYPE_F32 {
            return Err(XftError::Checkpoint(format!("{name}: unsupported dtype code {dtype}")));
        }
        let rank = r.u32("tensor directory")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        let mut elems: u64 = 1;
        for _ in 0..rank {
            let d = r.u64("tensor directory")?;
            elems = elems.checked_mul(d).ok_or_else(|| XftError::Checkpoint(format!("{name}: shape overflows")))?;
            shape.push(d as usize);
        }
        let offset = r.u64("tensor directory")?;
        let bytes = elems.checked_mul(4).ok_or_else(|| XftError::Checkpoint(format!("{name}: shape overflows")))?;
        entries.push(Entry { name, shape, offset, bytes });
    }

    let data = &buf[r.pos..];
    let mut by_offset: Vec<&Entry> = entries.iter().collect();
    by_offset.sort_by_key(|e| e.offset);
    let mut end = 0u64;
    for e in &by_offset {
        if e.offset < end {
            return Err(XftError::Checkpoint(format!("{}: data at offset {} overlaps the previous tensor", e.name, e.offset)));
        }
        end = e.offset + e.bytes;
    }
    if end > data.len() as u64 {
        return Err(XftError::Checkpoint(format!(
            "truncated data section: need {end} bytes, found {}",
            data.len()
        )));
    }

    let mut tensors: HashMap<&str, &Entry> = HashMap::new();
    for e in &entries {
        if tensors.insert(&e.name, e).is_some() {
            return Err(XftError::Checkpoint(format!("tensor {} appears twice", e.name)));
        }
    }

    let dense = Model::<Tensor<f32>>::init_dense(blob.model.clone(), 0)?;
    let mut model = match &blob.moe {
        Some(cfg) => upcycle(&dense, cfg, 0)?,
        None => dense,
    };
    let mut failure: Option<XftError> = None;
    let mut seen = 0usize;
    model.visit_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let Some(e) = tensors.get(name) else {
            failure = Some(XftError::Checkpoint(format!("missing tensor {name}")));
            return;
        };
        if e.shape != t.shape() {
            failure = Some(XftError::Checkpoint(format!("{name}: shape {:?}, expected {:?}", e.shape, t.shape())));
            return;
        }
        let start = e.offset as usize;
        let raw = &data[start..start + e.bytes as usize];
        for (x, b) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *x = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
        seen += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if seen != entries.len() {
        let known: BTreeMap<String, ()> = model.named_params().into_iter().map(|(n, _)| (n, ())).collect();
        let extra = entries.iter().find(|e| !known.contains_key(&e.name)).map_or("?", |e| e.name.as_str());
        return Err(XftError::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok((model, blob.meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<Tensor<f32>>, CheckpointMeta)> {
    let buf = fs::read(path).map_err(|e| XftError::io(path, e))?;
    decode(&buf).map_err(|e| match e {
        XftError::Checkpoint(msg) => XftError::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::Activation;

    fn small() -> Model<Tensor<f32>> {
        let c = ModelConfig { vocab_size: 13, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, max_seq_len: 9, activation: Activation::Gelu };
        Model::init_dense(c, 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = small();
        let meta = CheckpointMeta { phase: "sft".into(), seed: 7, lambda: Some(0.75) };
        let bytes = encode(&m, &meta).unwrap();
        let (back, meta2) = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta2, meta);
        assert_eq!(encode(&back, &meta2).unwrap(), bytes);
    }

    #[test]
    fn moe_round_trip() {
        let m = upcycle(&small(), &MoeConfig::new(4, 2), 1).unwrap();
        let (back, _) = decode(&encode(&m, &CheckpointMeta::new("upcycle", 1)).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(back.is_moe());
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = encode(&small(), &CheckpointMeta::default()).unwrap();
        bytes[4] = 9;
        assert!(decode(&bytes).unwrap_err().to_string().contains("version"));
        bytes[0] = b'Y';
        assert!(decode(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn truncation_reports_byte_counts() {
        let bytes = encode(&small(), &CheckpointMeta::default()).unwrap();
        let msg = decode(&bytes[..bytes.len() - 10]).unwrap_err().to_string();
        assert!(msg.contains("truncated data section"), "{msg}");
        assert!(msg.contains("need") && msg.contains("found"), "{msg}");
        assert!(decode(&bytes[..20]).is_err());
    }
}
