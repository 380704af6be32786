//! Binary model checkpoints. Layout (all integers little-endian):
//!
//! magic `VITPCKPT`, u32 version, u64 + spec JSON, u64 + metadata JSON,
//! u64 tensor count, then per tensor: u32 + name, u32 ndim, u64 dims, f64
//! values; finally a 32-byte SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::persist::write_locked;
use crate::error::{Error, Result};
use crate::model::{shape_table, ArchSpec, Model, WeightStore};
use crate::surgeon::ensure_valid;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VITPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Free-form annotations stored alongside the weights, excluded from the fingerprint.
pub type Metadata = BTreeMap<String, String>;

pub fn encode_checkpoint(model: &Model, meta: &Metadata) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for json in [model.spec.canonical_json(), serde_json::to_string(meta).expect("metadata serializes")] {
        b.extend_from_slice(&(json.len() as u64).to_le_bytes());
        b.extend_from_slice(json.as_bytes());
    }
    let table = shape_table(&model.spec);
    b.extend_from_slice(&(table.len() as u64).to_le_bytes());
    for (name, _) in &table {
        let t = model.weights.get(name).expect("validated model has every tensor");
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&b);
    b.extend_from_slice(&digest);
    b
}

pub fn save_checkpoint(model: &Model, meta: &Metadata, path: &Path) -> Result<()> {
    ensure_valid(model)?;
    write_locked(path, &encode_checkpoint(model, meta))
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
    path: &'b Path,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "unexpected end of checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::format(self.path, "length overflows"))
    }

    fn string(&mut self, len: usize) -> Result<&'b str> {
        std::str::from_utf8(self.take(len)?).map_err(|_| Error::format(self.path, "invalid UTF-8"))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(Model, Metadata)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version > CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum { path: path.to_path_buf() });
    }
    let mut r = Reader { buf: body, pos: 12, path };
    let len = r.u64()?;
    let spec: ArchSpec = serde_json::from_str(r.string(len)?).map_err(|e| Error::format(path, e.to_string()))?;
    let len = r.u64()?;
    let meta: Metadata = serde_json::from_str(r.string(len)?).map_err(|e| Error::format(path, e.to_string()))?;
    spec.check()?;
    let table = shape_table(&spec);
    let count = r.u64()?;
    if count != table.len() {
        return Err(Error::format(
            path,
            format!("{count} tensors stored, spec implies {}", table.len()),
        ));
    }
    let mut weights = WeightStore::new();
    for (want_name, want_shape) in &table {
        let len = r.u32()? as usize;
        let name = r.string(len)?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        if name != want_name || &shape != want_shape {
            return Err(Error::format(
                path,
                format!("tensor {name} {shape:?} does not match expected {want_name} {want_shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        weights.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::format(path, "trailing bytes after tensor table"));
    }
    let model = Model::new(spec, weights);
    ensure_valid(&model)?;
    Ok((model, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Metadata)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
