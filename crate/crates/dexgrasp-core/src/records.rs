//! Binary record container: magic "DGYS", little-endian payloads.
//!
//! One format serves grasp records and parameter checkpoints; a `kind`
//! word after the version distinguishes them. Strings are u32
//! length-prefixed UTF-8; float arrays are u32 length-prefixed f64
//! little-endian. Serialization is byte-deterministic.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DGYS";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordKind {
    Grasp = 1,
    Checkpoint = 2,
}

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn with_header(kind: RecordKind) -> Self {
        let mut w = ByteWriter::default();
        w.buf.extend_from_slice(&MAGIC);
        w.u32(VERSION);
        w.u32(kind as u32);
        w
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

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f64_slice(&mut self, xs: &[f64]) {
        self.u32(xs.len() as u32);
        for &x in xs {
            self.f64(x);
        }
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        self.f64_slice(t.data());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        ByteReader { data, pos: 0 }
    }

    /// Validate the magic/version header and return the record kind word.
    pub fn header(&mut self) -> Result<u32> {
        let magic = self.take(4)?;
        if magic != MAGIC {
            return Err(Error::Parse("bad magic, not a DGYS file".into()));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported DGYS version {version}")));
        }
        self.u32()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Parse("truncated DGYS payload".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Parse("invalid UTF-8 string".into()))
    }

    pub fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let data = self.f64_vec()?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Parse("tensor shape does not match payload".into()));
        }
        Ok(Tensor::new(shape, data))
    }

    pub fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

/// Named-tensor checkpoint: `meta` is an opaque echo of the producing
/// configuration; tensors are stored in the given order.
pub fn write_checkpoint(meta: &str, tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut w = ByteWriter::with_header(RecordKind::Checkpoint);
    w.str(meta);
    w.u32(tensors.len() as u32);
    for (name, t) in tensors {
        w.str(name);
        w.tensor(t);
    }
    w.finish()
}

pub fn read_checkpoint(data: &[u8]) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut r = ByteReader::new(data);
    let kind = r.header()?;
    if kind != RecordKind::Checkpoint as u32 {
        return Err(Error::Parse(format!("expected checkpoint record, found kind {kind}")));
    }
    let meta = r.str()?;
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        let t = r.tensor()?;
        out.push((name, t));
    }
    Ok((meta, out))
}
