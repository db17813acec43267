//! Binary checkpoint format: `BCVL`, version (u32 LE), entry count (u32),
//! then per entry the name length, UTF-8 name, rank, dims and raw `f32` LE
//! values.

use std::collections::BTreeMap;
use std::path::Path;

use super::params::{Hyper, ModelParams, ParamTensor};
use crate::error::{Error, Result};
use crate::Scalar;

pub const MAGIC: &[u8; 4] = b"BCVL";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in &params.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corruption {
                path: self.path.to_path_buf(),
                reason: format!("truncated at byte {} (wanted {n} more)", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses checkpoint bytes; `path` is only used in error messages.
pub fn read_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<ModelParams<T>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::CheckpointFormat(format!("{}: bad magic bytes", path.display())));
    }
    let mut r = Reader { bytes, pos: 4, path };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointFormat(format!("{}: unsupported version {version}", path.display())));
    }
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::CheckpointFormat(format!("{}: parameter name is not UTF-8", path.display())))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::CheckpointFormat("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        if tensors.insert(name.clone(), ParamTensor { shape, data }).is_some() {
            return Err(Error::CheckpointFormat(format!("{}: duplicate parameter `{name}`", path.display())));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Corruption { path: path.to_path_buf(), reason: "trailing bytes after last entry".into() });
    }
    let hyper = Hyper::infer(&tensors)?;
    for spec in hyper.layout() {
        match tensors.get(&spec.name) {
            Some(t) if t.shape == spec.shape => {}
            Some(t) => {
                return Err(Error::CheckpointFormat(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    spec.name, t.shape, spec.shape
                )))
            }
            None => return Err(Error::CheckpointFormat(format!("missing parameter `{}`", spec.name))),
        }
    }
    if tensors.len() != hyper.layout().len() {
        return Err(Error::CheckpointFormat("unexpected extra parameters".into()));
    }
    Ok(ModelParams { hyper, tensors })
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&bytes, path)
}
