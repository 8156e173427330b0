//! Binary checkpoint format.
//!
//! ```text
//! "DSAF" | version u32 | count u32 | count × entry
//! entry: name_len u32 | name (utf-8) | rank u32 | rank × dim u32 | f32 data
//! ```
//!
//! All integers and floats are little-endian. Entries appear in parameter
//! registration order, so saving the same store twice gives identical bytes.

use std::path::Path;

use dsaf_tensor::{Real, Tensor};

use crate::error::{io_err, DetError, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"DSAF";
pub const VERSION: u32 = 1;

pub fn encode<'a, T: Real>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(DetError::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(DetError::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DetError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| DetError::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| DetError::Checkpoint(format!("{name}: shape overflow")))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(DetError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn store_bytes<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    encode(store.entries().iter().map(|e| (e.name.as_str(), &e.value)))
}

pub fn save_store<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    std::fs::write(path, store_bytes(store)).map_err(io_err(format!("writing {}", path.display())))
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
    decode(&bytes)
}

/// Overwrites every entry of `store` from `tensors`. Extra tensors are
/// ignored only when their names start with one of `allow_extra`.
pub fn fill_store<T: Real>(
    store: &mut ParamStore<T>,
    tensors: &[(String, Tensor<f32>)],
    allow_extra: &[&str],
) -> Result<()> {
    let mut seen = vec![false; store.len()];
    for (name, t) in tensors {
        match store.find(name) {
            Some(id) => {
                let dst = store.get_mut(id);
                if dst.shape() != t.shape() {
                    return Err(DetError::Checkpoint(format!(
                        "{name}: checkpoint shape {:?} does not match model shape {:?}",
                        t.shape(),
                        dst.shape()
                    )));
                }
                *dst = t.cast();
                seen[id.index()] = true;
            }
            None if allow_extra.iter().any(|p| name.starts_with(p)) => {}
            None => return Err(DetError::Checkpoint(format!("unexpected tensor {name}"))),
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(DetError::Checkpoint(format!("missing tensor {}", store.entries()[i].name)));
    }
    Ok(())
}

pub fn load_store<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    fill_store(store, &read_file(path)?, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Detector, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_classes: 2,
            stage_channels: vec![4, 8, 8, 8, 8],
            reg_max: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_f64(vec![2], &[1.0, -2.0]).unwrap();
        let b = encode([("w", &t)]);
        assert_eq!(&b[..4], b"DSAF");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(b.len(), 12 + 4 + 1 + 4 + 4 + 8);
        assert_eq!(&b[b.len() - 4..], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (_, store) = Detector::new::<f32>(tiny(), 3).unwrap();
        let bytes = store_bytes(&store);
        let (_, mut other) = Detector::new::<f32>(tiny(), 4).unwrap();
        fill_store(&mut other, &decode(&bytes).unwrap(), &[]).unwrap();
        assert_eq!(store_bytes(&other), bytes);
    }

    #[test]
    fn detects_corruption_and_mismatch() {
        let (_, store) = Detector::new::<f32>(tiny(), 0).unwrap();
        let bytes = store_bytes(&store);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let (_, mut wider) = Detector::new::<f32>(ModelConfig { num_classes: 3, ..tiny() }, 0).unwrap();
        let err = fill_store(&mut wider, &decode(&bytes).unwrap(), &[]).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }
}
