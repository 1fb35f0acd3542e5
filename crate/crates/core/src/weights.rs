//! `SACW` weight container: named tensors stored as little-endian f32.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Result, SacError};
use crate::params::{dims_to_shape, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: &[u8; 4] = b"SACW";
pub const WEIGHT_VERSION: u32 = 1;

/// Serializes every parameter, narrowing to 32-bit floats.
pub fn encode_weights<T: Real>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHT_MAGIC);
    buf.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| SacError::Invalid(format!("tensor name too long: {}", p.name)))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.dims.len() as u8);
        for &d in &p.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parses a container; `origin` is used in error messages.
pub fn decode_weights<T: Real>(bytes: &[u8], origin: &Path) -> Result<ParamStore<T>> {
    let bad = |m: String| SacError::format(origin, m);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(WEIGHT_MAGIC.as_slice()) {
        return Err(bad("missing SACW magic".into()));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header".into()))?;
    if version != WEIGHT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.u32().ok_or_else(|| bad("truncated header".into()))? as usize;
    let mut store = ParamStore::new();
    let mut seen = HashSet::new();
    for i in 0..count {
        let len = r
            .take(2)
            .map(|b| u16::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| bad(format!("tensor #{i}: truncated name length")))?;
        let name = r
            .take(len)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| bad(format!("tensor #{i}: truncated or non-UTF-8 name")))?
            .to_string();
        let rank = r.take(1).ok_or_else(|| bad(format!("tensor {name}: truncated rank")))?[0] as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad(format!("tensor {name}: truncated dims")))?;
        let shape = dims_to_shape(&dims).map_err(|e| bad(format!("tensor {name}: {e}")))?;
        let n: usize = dims.iter().product();
        let data = r
            .take(n.checked_mul(4).ok_or_else(|| bad(format!("tensor {name}: size overflow")))?)
            .ok_or_else(|| bad(format!("tensor {name}: truncated data (expected {n} values)")))?
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(bad(format!("tensor {name}: duplicate name")));
        }
        let tensor = Tensor::from_vec(shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
        store.insert(name, dims, tensor)?;
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes after {count} tensors", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save_weights<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let bytes = encode_weights(store)?;
    fs::write(path, bytes).map_err(|e| SacError::io(path, e))
}

pub fn load_weights<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = fs::read(path).map_err(|e| SacError::io(path, e))?;
    decode_weights(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_container_names_tensor() {
        let mut s = ParamStore::<f32>::new();
        s.insert("stem.conv.weight", vec![2, 1], Tensor::ones([2, 1, 1, 1])).unwrap();
        let bytes = encode_weights(&s).unwrap();
        let err = decode_weights::<f32>(&bytes[..bytes.len() - 1], Path::new("w.sacw")).unwrap_err();
        assert!(err.to_string().contains("stem.conv.weight"), "{err}");
        assert!(decode_weights::<f32>(b"NOPE", Path::new("w.sacw")).is_err());
    }

    #[test]
    fn round_trip_bits() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", vec![3], Tensor::from_vec([3, 1, 1, 1], vec![1.5, -0.0, f32::MIN_POSITIVE]).unwrap())
            .unwrap();
        let bytes = encode_weights(&s).unwrap();
        let back = decode_weights::<f32>(&bytes, Path::new("-")).unwrap();
        assert_eq!(encode_weights(&back).unwrap(), bytes);
    }
}
