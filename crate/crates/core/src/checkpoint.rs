//! Little-endian binary container shared by weight-store, controller and search
//! checkpoints.
//!
//! ```text
//! file     := magic:"BNASCKPT" version:u32 count:u32 section*count
//! section  := tag:[u8;4] len:u64 payload:[u8;len]
//! table    := count:u32 header*count buffers
//! header   := name_len:u32 name:utf8 ndim:u32 dims:u64*ndim aux:u8
//! buffers  := per header in order: data:f64*numel, then aux buffers of f64*numel each
//! ```
//!
//! Every integer and float is little-endian. Readers reject unknown versions, missing
//! sections and any truncation.

use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"BNASCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("missing section `{0}`")]
    MissingSection(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.f64(*x);
        }
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0, base: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                offset: self.base + self.pos,
                needed: n,
                available: self.buf.len() - self.pos,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Malformed("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| CheckpointError::Malformed("invalid utf-8".into()))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn finish(&self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(CheckpointError::Malformed(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

/// One named tensor with optional auxiliary buffers (optimizer state).
#[derive(Clone, Debug, PartialEq)]
pub struct TableEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub aux: Vec<Vec<f64>>,
}

pub fn write_table(w: &mut Writer, entries: &[TableEntry]) {
    w.u32(entries.len() as u32);
    for e in entries {
        w.bytes(e.name.as_bytes());
        w.u32(e.shape.len() as u32);
        for &d in &e.shape {
            w.u64(d as u64);
        }
        w.u8(e.aux.len() as u8);
    }
    for e in entries {
        w.f64s(&e.data);
        for a in &e.aux {
            w.f64s(a);
        }
    }
}

pub fn read_table(r: &mut Reader<'_>) -> Result<Vec<TableEntry>> {
    let n = r.u32()? as usize;
    let mut headers = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let aux = r.u8()? as usize;
        headers.push((name, shape, aux));
    }
    let mut out = Vec::with_capacity(headers.len());
    for (name, shape, aux) in headers {
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("shape overflow for {name}")))?;
        let data = r.f64s(numel)?;
        let aux = (0..aux).map(|_| r.f64s(numel)).collect::<Result<Vec<_>>>()?;
        out.push(TableEntry { name, shape, data, aux });
    }
    Ok(out)
}

/// Ordered `(tag, payload)` sections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub sections: Vec<([u8; 4], Vec<u8>)>,
}

impl Container {
    pub fn push(&mut self, tag: &[u8; 4], payload: Vec<u8>) {
        self.sections.push((*tag, payload));
    }

    pub fn section(&self, tag: &[u8; 4]) -> Result<&[u8]> {
        self.sections
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, p)| p.as_slice())
            .ok_or_else(|| CheckpointError::MissingSection(String::from_utf8_lossy(tag).into_owned()))
    }

    pub fn has(&self, tag: &[u8; 4]) -> bool {
        self.sections.iter().any(|(t, _)| t == tag)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(self.sections.len() as u32);
        for (tag, payload) in &self.sections {
            w.buf.extend_from_slice(tag);
            w.u64(payload.len() as u64);
            w.buf.extend_from_slice(payload);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, expected: VERSION });
        }
        let count = r.u32()? as usize;
        let mut sections = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = r.u64()? as usize;
            sections.push((tag, r.take(len)?.to_vec()));
        }
        r.finish()?;
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

/// Reader positioned inside a section, reporting absolute offsets is not needed by
/// callers, so sections are parsed with a fresh reader.
pub fn section_reader(payload: &[u8]) -> Reader<'_> {
    Reader::new(payload)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trip() {
        let entries = vec![
            TableEntry {
                name: "a".into(),
                shape: vec![2, 2],
                data: vec![1.0, -2.0, 3.5, f64::MIN_POSITIVE],
                aux: vec![vec![0.0; 4]],
            },
            TableEntry { name: "bé".into(), shape: vec![1], data: vec![7.0], aux: vec![] },
        ];
        let mut w = Writer::new();
        write_table(&mut w, &entries);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes);
        assert_eq!(read_table(&mut r).unwrap(), entries);
        assert!(r.is_empty());
    }

    #[test]
    fn container_rejects_version_and_truncation() {
        let mut c = Container::default();
        c.push(b"TEST", vec![1, 2, 3]);
        let mut bytes = c.to_bytes();
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(Container::from_bytes(cut), Err(CheckpointError::Truncated { .. })));
        bytes[8] = 9;
        assert!(matches!(Container::from_bytes(&bytes), Err(CheckpointError::Version { found: 9, .. })));
        assert!(matches!(Container::from_bytes(b"nope"), Err(CheckpointError::BadMagic)));
    }
}
