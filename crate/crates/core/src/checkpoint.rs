//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! magic `PNETCKPT`, `u32` version, `u32` config length + UTF-8 key=value
//! config, `u32` entry count, then per entry `u32` name length, name, `u8`
//! dtype (4 or 8 bytes per element), `u32` rank and `u64` dims, followed by
//! the raw payloads in manifest order.

use std::fs;
use std::path::Path;

use pn_tensor::{DType, Element, Tensor};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ManifestEntry;

pub const MAGIC: &[u8; 8] = b"PNETCKPT";
pub const VERSION: u32 = 1;

fn dtype_tag(d: DType) -> u8 {
    d.size_of() as u8
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode<T: Element>(model: &Model<T>) -> Result<Vec<u8>> {
    if model.net.fused {
        return Err(Error::Contract("fused models are inference-only and cannot be checkpointed".into()));
    }
    if !model.store.is_materialized() {
        return Err(Error::Contract("cannot checkpoint a model without parameter values".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let cfg = model.config().kv_text();
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(cfg.as_bytes());
    let manifest = model.store.manifest();
    put_u32(&mut out, manifest.len() as u32);
    for e in &manifest {
        put_u32(&mut out, e.name.len() as u32);
        out.extend_from_slice(e.name.as_bytes());
        out.push(dtype_tag(T::DTYPE));
        put_u32(&mut out, e.shape.len() as u32);
        for d in &e.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
    }
    for t in model.store.tensors() {
        for v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint(format!("{what} is not UTF-8")))
    }
}

/// Decoded file contents; tensors are widened to 64-bit, which is exact for
/// both storage types.
pub struct Decoded {
    pub config: ModelConfig,
    pub manifest: Vec<ManifestEntry>,
    pub tensors: Vec<Tensor<f64>>,
}

pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let cfg_text = r.string("config")?;
    let config = ModelConfig::parse_kv_text(&cfg_text)
        .map_err(|e| Error::CorruptCheckpoint(format!("embedded config: {e}")))?;
    let count = r.u32("entry count")? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    let mut dtypes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let tag = r.take(1, "dtype")?[0];
        let dtype = match tag {
            4 => DType::F32,
            8 => DType::F64,
            t => return Err(Error::CorruptCheckpoint(format!("`{name}`: unknown dtype tag {t}"))),
        };
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u64("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        manifest.push(ManifestEntry { name, shape });
        dtypes.push(dtype);
    }
    let mut tensors = Vec::with_capacity(manifest.len());
    for (e, d) in manifest.iter().zip(&dtypes) {
        let n: usize = e.shape.iter().product();
        let raw = r.take(n * d.size_of(), &format!("payload of `{}`", e.name))?;
        let data: Vec<f64> = match d {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
        };
        tensors.push(Tensor::new(&e.shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Decoded { config, manifest, tensors })
}

/// Checks `found` against the model's manifest and assigns the values.
fn assign<T: Element>(model: &mut Model<T>, d: Decoded) -> Result<()> {
    let want = model.store.manifest();
    for (i, w) in want.iter().enumerate() {
        match d.manifest.get(i) {
            Some(f) if f.name == w.name && f.shape == w.shape => {}
            Some(f) => {
                return Err(Error::ShapeMismatch {
                    name: w.name.clone(),
                    expected: w.shape.clone(),
                    found: if f.name == w.name { f.shape.clone() } else { vec![] },
                })
            }
            None => return Err(Error::ShapeMismatch { name: w.name.clone(), expected: w.shape.clone(), found: vec![] }),
        }
    }
    if let Some(extra) = d.manifest.get(want.len()) {
        return Err(Error::ShapeMismatch { name: extra.name.clone(), expected: vec![], found: extra.shape.clone() });
    }
    let values = d.tensors.iter().map(|t| t.cast::<T>()).collect();
    if !model.store.is_materialized() {
        model.store.materialize(&mut rand::SeedableRng::seed_from_u64(0));
    }
    model.store.assign_all(values)
}

impl<T: Element> Model<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = encode(self)?;
        fs::write(path, bytes)?;
        Ok(())
    }

    /// Rebuilds the model described by the checkpoint's embedded config.
    pub fn load(path: impl AsRef<Path>) -> Result<Model<T>> {
        let d = decode(&fs::read(path)?)?;
        let mut m = Model::declare(&d.config)?;
        assign(&mut m, d)?;
        Ok(m)
    }

    /// Loads values into this model's existing structure. On error the
    /// model is left untouched.
    pub fn load_into(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let d = decode(&fs::read(path)?)?;
        let mut staged = self.clone();
        assign(&mut staged, d)?;
        *self = staged;
        Ok(())
    }
}
