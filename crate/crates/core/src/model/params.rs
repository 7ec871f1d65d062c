//! Named parameter tables and the checkpoint file layout.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "NCKP" | version: u32 | config_len: u32 | config JSON
//! entry_count: u32
//! per entry: kind: u8 (0 parameter, 1 buffer) | name_len: u32 | name
//!            | ndim: u32 | dims: u64 × ndim | values: f64 × Π dims
//! ```

use std::io::{Read, Write};

use crate::numerics::Tensor;

use super::{ModelConfig, ModelError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered name → tensor table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

pub(crate) fn write_checkpoint<W: Write>(
    w: &mut W,
    config: &ModelConfig,
    params: &ParamStore,
    buffers: &ParamStore,
) -> std::io::Result<()> {
    let cfg = serde_json::to_vec(config).map_err(std::io::Error::other)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&((params.len() + buffers.len()) as u32).to_le_bytes())?;
    for (kind, store) in [(0u8, params), (1u8, buffers)] {
        for (name, t) in store.names.iter().zip(&store.values) {
            w.write_all(&[kind])?;
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.bytes.len() - self.pos < n {
            return Err(ModelError::Checkpoint(format!(
                "truncated checkpoint: need {} bytes for {} at offset {}",
                n, what, self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub(crate) fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ModelConfig, ParamStore, ParamStore), ModelError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic at offset 0".into()));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = c.u32("config length")? as usize;
    let cfg: ModelConfig = serde_json::from_slice(c.take(cfg_len, "config")?)
        .map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
    let n = c.u32("entry count")?;
    let mut params = ParamStore::default();
    let mut buffers = ParamStore::default();
    for _ in 0..n {
        let kind = c.take(1, "entry kind")?[0];
        let name_len = c.u32("name length")? as usize;
        let name = String::from_utf8(c.take(name_len, "name")?.to_vec())
            .map_err(|_| ModelError::Checkpoint(format!("non-UTF-8 name before offset {}", c.pos)))?;
        let ndim = c.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64("dim")? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = c.take(count * 8, &name)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        match kind {
            0 => params.push(name, t),
            1 => buffers.push(name, t),
            k => return Err(ModelError::Checkpoint(format!("unknown entry kind {k} for {name}"))),
        };
    }
    if c.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!("{} trailing bytes at offset {}", bytes.len() - c.pos, c.pos)));
    }
    Ok((cfg, params, buffers))
}
