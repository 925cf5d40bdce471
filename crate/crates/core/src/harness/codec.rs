//! The `MPDT` tensor container.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "MPDT" | version | config length | config (UTF-8) | tensor count |
//!   per tensor: name length | name (UTF-8) | rank | dims... | f32 LE data
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CodecError, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MPDT";
pub const VERSION: u32 = 1;

/// A config blob plus an ordered table of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }
}

fn put_u32(out: &mut Vec<u8>, x: usize) -> std::result::Result<(), CodecError> {
    let x = u32::try_from(x).map_err(|_| CodecError::Malformed(format!("{x} does not fit in u32")))?;
    out.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

pub fn encode(file: &TensorFile) -> std::result::Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, file.config.len())?;
    out.extend_from_slice(file.config.as_bytes());
    put_u32(&mut out, file.tensors.len())?;
    for (name, t) in &file.tensors {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        out.reserve(4 * t.numel());
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CodecError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(CodecError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, what: &str) -> std::result::Result<String, CodecError> {
        let n = self.u32()?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CodecError::Malformed(format!("{what} is not UTF-8")))
    }
}

pub fn decode(buf: &[u8]) -> std::result::Result<TensorFile, CodecError> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(CodecError::BadMagic {
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(CodecError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let config = r.string("config")?;
    let count = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CodecError::Malformed(format!("`{name}` shape {shape:?} overflows")))?;
        let bytes = r.take(numel)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| CodecError::Malformed(e.to_string()))?;
        tensors.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(CodecError::Malformed(format!(
            "{} trailing bytes after the tensor table",
            buf.len() - r.pos
        )));
    }
    Ok(TensorFile { config, tensors })
}

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map_or("out".into(), |n| n.to_string_lossy().into_owned());
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn save_tensors(path: &Path, file: &TensorFile) -> Result<()> {
    write_atomic(path, &encode(file)?)
}

pub fn load_tensors(path: &Path) -> Result<TensorFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}
