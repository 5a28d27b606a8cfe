//! The binary checkpoint container.
//!
//! Layout: magic "ATKG", format version (u16 LE), a length-prefixed module
//! name, then repeated tensor entries (length-prefixed name, rank u32, dims
//! as u32s, 32-bit little-endian float data), closed by a CRC32 of all
//! preceding bytes. Values are stored as f32; loading widens exactly to
//! f64, and training state is snapped through f32 at save points so a
//! resumed run continues bit-for-bit.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"ATKG";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

/// An ordered set of named tensors for one module.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub module: String,
    entries: Vec<TensorEntry>,
}

impl Container {
    pub fn new(module: &str) -> Self {
        Container {
            module: module.to_string(),
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn push_array2(&mut self, name: &str, arr: &Array2<f64>) {
        self.entries.push(TensorEntry {
            name: name.to_string(),
            dims: vec![arr.nrows() as u32, arr.ncols() as u32],
            data: arr.iter().map(|&v| v as f32).collect(),
        });
    }

    pub fn push_array1(&mut self, name: &str, arr: &Array1<f64>) {
        self.entries.push(TensorEntry {
            name: name.to_string(),
            dims: vec![arr.len() as u32],
            data: arr.iter().map(|&v| v as f32).collect(),
        });
    }

    pub fn push_scalars(&mut self, name: &str, values: &[f64]) {
        self.entries.push(TensorEntry {
            name: name.to_string(),
            dims: vec![values.len() as u32],
            data: values.iter().map(|&v| v as f32).collect(),
        });
    }

    pub fn get(&self, name: &str) -> Result<&TensorEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "tensor {name:?} missing from module {:?}",
                    self.module
                ))
            })
    }

    pub fn has(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    pub fn array2(&self, name: &str) -> Result<Array2<f64>> {
        let e = self.get(name)?;
        if e.dims.len() != 2 {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has rank {}, expected 2",
                e.dims.len()
            )));
        }
        let (r, c) = (e.dims[0] as usize, e.dims[1] as usize);
        Array2::from_shape_vec((r, c), e.data.iter().map(|&v| v as f64).collect())
            .map_err(|err| Error::Checkpoint(format!("tensor {name:?}: {err}")))
    }

    pub fn array1(&self, name: &str) -> Result<Array1<f64>> {
        let e = self.get(name)?;
        if e.dims.len() != 1 {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has rank {}, expected 1",
                e.dims.len()
            )));
        }
        Ok(Array1::from(
            e.data.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        ))
    }

    pub fn scalars(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.array1(name)?.to_vec())
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let v = self.scalars(name)?;
        if v.len() != 1 {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has {} values, expected 1",
                v.len()
            )));
        }
        Ok(v[0])
    }

    fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        write_str(&mut buf, &self.module);
        for e in &self.entries {
            write_str(&mut buf, &e.name);
            buf.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                buf.extend_from_slice(&d.to_le_bytes());
            }
            for &v in &e.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Container> {
        let buf = fs::read(path)?;
        let display = path.display();
        if buf.len() < 10 || &buf[0..4] != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{display}: not a checkpoint container (bad magic)"
            )));
        }
        let body_len = buf.len() - 4;
        let stored_crc = u32::from_le_bytes(buf[body_len..].try_into().unwrap());
        let actual_crc = crc32fast::hash(&buf[..body_len]);
        if stored_crc != actual_crc {
            return Err(Error::Checkpoint(format!(
                "{display}: CRC mismatch (stored {stored_crc:08x}, computed {actual_crc:08x})"
            )));
        }
        let version = u16::from_le_bytes(buf[4..6].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{display}: unsupported container version {version}"
            )));
        }
        let mut off = 6;
        let module = read_str(&buf, &mut off, body_len)
            .ok_or_else(|| Error::Checkpoint(format!("{display}: truncated module name")))?;
        let mut entries = Vec::new();
        while off < body_len {
            let name = read_str(&buf, &mut off, body_len)
                .ok_or_else(|| Error::Checkpoint(format!("{display}: truncated tensor name")))?;
            if body_len - off < 4 {
                return Err(Error::Checkpoint(format!("{display}: truncated rank")));
            }
            let rank = u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize;
            off += 4;
            if body_len - off < rank * 4 {
                return Err(Error::Checkpoint(format!("{display}: truncated dims")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()));
                off += 4;
            }
            let count = dims.iter().map(|&d| d as usize).product::<usize>();
            if body_len - off < count * 4 {
                return Err(Error::Checkpoint(format!(
                    "{display}: truncated data for tensor {name:?}"
                )));
            }
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()));
                off += 4;
            }
            entries.push(TensorEntry { name, dims, data });
        }
        Ok(Container { module, entries })
    }
}

/// Store optimizer state (step count and moment buffers) under a prefix.
pub fn push_adam(c: &mut Container, prefix: &str, opt: &crate::opt::Adam) {
    c.push_scalars(&format!("{prefix}/t"), &[opt.t as f64]);
    c.push_scalars(&format!("{prefix}/nbuf"), &[opt.m.len() as f64]);
    for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
        c.push_scalars(&format!("{prefix}/m{i}"), m);
        c.push_scalars(&format!("{prefix}/v{i}"), v);
    }
}

/// Restore optimizer state stored by [`push_adam`].
pub fn read_adam(c: &Container, prefix: &str, lr: f64) -> Result<crate::opt::Adam> {
    let mut opt = crate::opt::Adam::new(lr);
    opt.t = c.scalar(&format!("{prefix}/t"))? as u64;
    let nbuf = c.scalar(&format!("{prefix}/nbuf"))? as usize;
    for i in 0..nbuf {
        opt.m.push(c.scalars(&format!("{prefix}/m{i}"))?);
        opt.v.push(c.scalars(&format!("{prefix}/v{i}"))?);
    }
    Ok(opt)
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn read_str(buf: &[u8], off: &mut usize, limit: usize) -> Option<String> {
    if limit - *off < 2 {
        return None;
    }
    let len = u16::from_le_bytes(buf[*off..*off + 2].try_into().unwrap()) as usize;
    *off += 2;
    if limit - *off < len {
        return None;
    }
    let s = String::from_utf8(buf[*off..*off + len].to_vec()).ok()?;
    *off += len;
    Some(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn container_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("gen.atkg");
        let mut c = Container::new("generator");
        let a2 = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.25);
        let a1 = Array1::from(vec![1.5, -2.25, 0.0]);
        c.push_array2("gen/W_f", &a2);
        c.push_array1("gen/b_f", &a1);
        c.push_scalars("gen/meta", &[64.0, 256.0]);
        c.write(&path).unwrap();
        let back = Container::read(&path).unwrap();
        assert_eq!(back.module, "generator");
        assert_eq!(back.array2("gen/W_f").unwrap(), a2);
        assert_eq!(back.array1("gen/b_f").unwrap(), a1);
        assert_eq!(back.scalars("gen/meta").unwrap(), vec![64.0, 256.0]);
        assert!(back.get("gen/missing").is_err());
    }

    #[test]
    fn f32_precision_is_preserved_exactly() {
        // values that are exactly representable in f32 survive the round
        // trip bit-for-bit after widening
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.atkg");
        let vals: Vec<f64> = vec![0.5, -0.25, 1.0 / 1024.0, 3.0];
        let mut c = Container::new("m");
        c.push_scalars("t", &vals);
        c.write(&path).unwrap();
        let back = Container::read(&path).unwrap();
        assert_eq!(back.scalars("t").unwrap(), vals);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.atkg");
        let mut c = Container::new("m");
        c.push_scalars("t", &[1.0, 2.0, 3.0]);
        c.write(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        fs::write(&path, &bytes).unwrap();
        let err = Container::read(&path).unwrap_err();
        assert!(err.to_string().contains("CRC"), "{err}");
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.atkg");
        let mut c = Container::new("m");
        c.push_scalars("t", &[1.0, 2.0, 3.0]);
        c.write(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 6);
        fs::write(&path, &bytes).unwrap();
        assert!(Container::read(&path).is_err());
    }
}
