//! Binary tensor and checkpoint files, with atomic writes.
//!
//! Tensor file (all integers little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `LTSF` |
//! | 2 | version (1) |
//! | 1 | dtype code (0 = f32, 1 = f64) |
//! | 1 | ndim |
//! | 8·ndim | shape, u64 each |
//! | rest | row-major payload |
//!
//! Checkpoint: magic `LTCK`, u16 version, u16 kind length + UTF-8 kind,
//! 32-byte config hash, u32 entry count, then per entry a u16 name length,
//! the UTF-8 name and a complete tensor file block.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{DlspfError, Result};
use crate::tensor::{DType, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"LTSF";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LTCK";
pub const FORMAT_VERSION: u16 = 1;

fn format_err(msg: impl Into<String>) -> DlspfError {
    DlspfError::Format(msg.into())
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| format_err(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(format_err("too many dimensions"));
    }
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(t.dtype().code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t.dtype() {
        DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t.data().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    Ok(())
}

pub fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + t.len() * t.dtype().size());
    encode_tensor(t, &mut out)?;
    Ok(out)
}

/// Cursor over a byte slice.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| format_err("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format_err("name is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        if self.take(4)? != TENSOR_MAGIC {
            return Err(format_err("bad tensor magic"));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported tensor format version {version}")));
        }
        let dtype = DType::from_code(self.u8()?)?;
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(usize::try_from(self.u64()?).map_err(|_| format_err("dimension overflows usize"))?);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| format_err("shape overflows"))?;
        let bytes = self.take(n.checked_mul(dtype.size()).ok_or_else(|| format_err("payload overflows"))?)?;
        let data: Vec<f64> = match dtype {
            DType::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
            DType::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect(),
        };
        Ok(Tensor::new(&shape, data)?.to_dtype(dtype))
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let t = r.tensor()?;
    if r.pos != bytes.len() {
        return Err(format_err("trailing bytes after tensor payload"));
    }
    Ok(t)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    atomic_write(path, &tensor_bytes(t)?)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

/// Named tensors with a model kind and the hash of the producing config.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_hash: [u8; 32],
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str, config_hash: [u8; 32], tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let c = Checkpoint { kind: kind.to_string(), config_hash, tensors };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, _) in &self.tensors {
            if name.len() > u16::MAX as usize || !seen.insert(name.as_str()) {
                return Err(format_err(format!("duplicate or oversized tensor name {name:?}")));
            }
        }
        if self.kind.len() > u16::MAX as usize {
            return Err(format_err("model kind is too long"));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind.len() as u16).to_le_bytes());
        out.extend_from_slice(self.kind.as_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor(t, &mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(format_err("bad checkpoint magic"));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version}")));
        }
        let kind = r.string()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            tensors.push((name, r.tensor()?));
        }
        if r.pos != bytes.len() {
            return Err(format_err("trailing bytes after checkpoint"));
        }
        Checkpoint::new(&kind, config_hash, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_header_layout() {
        let t = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let b = tensor_bytes(&t).unwrap();
        assert_eq!(&b[..4], b"LTSF");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 1);
        assert_eq!(b[7], 1);
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(b.len(), 16 + 16);
    }

    #[test]
    fn rejects_corrupt_input() {
        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = tensor_bytes(&t).unwrap();
        assert!(decode_tensor(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad).is_err());
        let mut bad = b;
        bad[6] = 9;
        assert!(decode_tensor(&bad).is_err());
    }

    #[test]
    fn checkpoint_rejects_duplicate_names() {
        let t = Tensor::zeros(&[1]);
        assert!(Checkpoint::new("x", [0; 32], vec![("a".into(), t.clone()), ("a".into(), t)]).is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("f.bin");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
