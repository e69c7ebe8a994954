//! `GMXW` weight archives.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "GMXW" version count
//! count × { name_len name[name_len] ndim dims[ndim] dtype data }
//! ```
//!
//! `dtype` 0 stores `f32`, 1 stores `f64`. Parameter archives use `f32`;
//! training checkpoints keep exact `f64` state.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GMXW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Self::F32),
            1 => Ok(Self::F64),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

/// Serialise named tensors into archive bytes.
pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>, dtype: Dtype) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(&mut out, FORMAT_VERSION as usize);
    put(&mut out, tensors.len());
    for (name, t) in tensors {
        put(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put(&mut out, t.shape().len());
        for &d in t.shape() {
            put(&mut out, d);
        }
        put(&mut out, dtype as usize);
        for &v in t.data() {
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("archive truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

/// Parse archive bytes into named `f64` tensors, in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a GMXW archive".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported archive version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let count = r.u32("tensor count")?;
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
        let ndim = r.u32("ndim")?;
        let dims = (0..ndim)
            .map(|_| r.u32("dims"))
            .collect::<Result<Vec<_>>>()?;
        let dtype = Dtype::from_code(r.u32("dtype")? as u32)?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let raw = r.take(numel.saturating_mul(dtype.width()), &format!("data of `{name}`"))?;
        let data = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        tensors.push((name, Tensor::new(&dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(tensors)
}

/// Write `bytes` to a temporary file next to `path`, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Save every parameter as `f32`.
pub fn save_weights(store: &ParamStore, path: &Path) -> Result<()> {
    let bytes = encode(store.iter().map(|(n, p)| (n, &p.value)), Dtype::F32);
    write_atomic(path, &bytes)
}

/// Copy `tensors` into `store`. Every name and shape is checked before the
/// store is touched.
pub fn assign(store: &mut ParamStore, tensors: &[(String, Tensor)]) -> Result<()> {
    for (name, t) in tensors {
        let p = store
            .get(name)
            .ok_or_else(|| Error::Format(format!("archive tensor `{name}` is not a model parameter")))?;
        if p.value.shape() != t.shape() {
            return Err(Error::ParamShape {
                name: name.clone(),
                expected: p.value.shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
    }
    if let Some(missing) = store.names().find(|n| !tensors.iter().any(|(m, _)| m == n)) {
        return Err(Error::Format(format!("archive lacks parameter `{missing}`")));
    }
    for (name, t) in tensors {
        let id = store.id(name).expect("checked above");
        store.param_mut(id).value = t.clone();
    }
    Ok(())
}

/// Load an archive into `store`, which is left untouched on any error.
pub fn load_weights(store: &mut ParamStore, path: &Path) -> Result<()> {
    assign(store, &read_archive(path)?)
}
