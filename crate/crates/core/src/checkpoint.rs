//! Named-tensor container files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"TIVODECK"                    magic
//! u32                            format version
//! u32 + UTF-8                    manifest text
//! per tensor, in manifest order:
//!   u32 rank, rank × u32 dims, prod(dims) × f64 values
//! ```
//!
//! The manifest is line oriented: `format_version=<n>`, one `meta <key>=<value>`
//! line per metadata entry and one `tensor <name> <d0>x<d1>...` line per tensor.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TIVODECK";
pub const FORMAT_VERSION: u32 = 1;

/// Writes `rank`, dims and fp64 payload.
pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Byte-counting reader so format errors can report where they happened.
pub struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    pub fn new(inner: R) -> Self {
        Cursor { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset,
            reason: reason.into(),
        }
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let mut filled = 0;
        while filled < n {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    self.offset += filled as u64;
                    return Err(self.fail(format!("truncated: needed {n} bytes, got {filled}")));
                }
                Ok(k) => filled += k,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += n as u64;
        Ok(buf)
    }

    pub fn u16(&mut self) -> Result<u16> {
        let b = self.bytes(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    /// True when no bytes remain.
    pub fn at_end(&mut self) -> Result<bool> {
        let mut probe = [0u8; 1];
        loop {
            match self.inner.read(&mut probe) {
                Ok(0) => return Ok(true),
                Ok(_) => return Ok(false),
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

const MAX_RANK: u32 = 8;

pub fn read_tensor<T: Scalar, R: Read>(r: &mut Cursor<R>) -> Result<Tensor<T>> {
    let rank = r.u32()?;
    if rank > MAX_RANK {
        return Err(r.fail(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let n: usize = shape.iter().product();
    if n > (1 << 28) {
        return Err(r.fail(format!("implausible tensor size {n}")));
    }
    let raw = r.bytes(n * 8)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor::new(&shape, data)
}

/// Metadata plus named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint<T> {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == '=')
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new() -> Self {
        Checkpoint {
            metadata: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), t.detach()));
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Input(format!("checkpoint lacks metadata {key:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Input(format!("checkpoint lacks tensor {name:?}")))
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn manifest(&self) -> Result<String> {
        let mut m = format!("format_version={FORMAT_VERSION}\n");
        for (k, v) in &self.metadata {
            if !valid_token(k) || v.contains('\n') {
                return Err(Error::Input(format!("unserializable metadata {k:?}")));
            }
            m.push_str(&format!("meta {k}={v}\n"));
        }
        for (name, t) in &self.tensors {
            if !valid_token(name) {
                return Err(Error::Input(format!("unserializable tensor name {name:?}")));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            m.push_str(&format!("tensor {name} {}\n", dims.join("x")));
        }
        Ok(m)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let manifest = self.manifest()?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(manifest.len() as u32).to_le_bytes())?;
        w.write_all(manifest.as_bytes())?;
        for (_, t) in &self.tensors {
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Cursor::new(r);
        if r.bytes(8)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.fail(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let mlen = r.u32()? as usize;
        let manifest = String::from_utf8(r.bytes(mlen)?)
            .map_err(|_| r.fail("manifest is not UTF-8"))?;
        let mut ck = Checkpoint::new();
        let mut declared = Vec::new();
        for line in manifest.lines() {
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| r.fail(format!("bad manifest line {line:?}")))?;
                ck.metadata.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let (name, dims) = rest
                    .split_once(' ')
                    .ok_or_else(|| r.fail(format!("bad manifest line {line:?}")))?;
                let shape: Vec<usize> = if dims.is_empty() {
                    vec![]
                } else {
                    dims.split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| r.fail(format!("bad dims in {line:?}")))?
                };
                declared.push((name.to_string(), shape));
            } else if line.starts_with("format_version=") {
                continue;
            } else if !line.is_empty() {
                return Err(r.fail(format!("unknown manifest line {line:?}")));
            }
        }
        for (name, shape) in declared {
            let t = read_tensor(&mut r)?;
            if t.shape() != shape.as_slice() {
                return Err(r.fail(format!(
                    "tensor {name}: manifest says {shape:?}, payload has {:?}",
                    t.shape()
                )));
            }
            ck.tensors.push((name, t));
        }
        if !r.at_end()? {
            return Err(r.fail("trailing bytes after last tensor"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Hex SHA-256 digest, used for config and vocabulary fingerprints.
pub fn digest_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
