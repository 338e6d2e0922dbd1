//! Little-endian binary encoding shared by the checkpoint and store formats.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn with_header(magic: &[u8; 4], version: u32) -> Self {
        let mut e = Encoder::default();
        e.buf.extend_from_slice(magic);
        e.u32(version);
        e
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

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
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
        self.buf.extend_from_slice(v);
    }

    pub fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    /// Shape-prefixed row-major tensor.
    pub fn matrix(&mut self, m: &Matrix) {
        self.usize(m.rows);
        self.usize(m.cols);
        self.f64s(&m.data);
    }

    pub fn vector(&mut self, v: &[f64]) {
        self.usize(v.len());
        self.f64s(v);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Decoder<'a> {
    /// Validates magic and version, returning a decoder positioned after them.
    pub fn open(
        buf: &'a [u8],
        magic: &[u8; 4],
        version: u32,
        what: &'static str,
    ) -> Result<Self> {
        let mut d = Decoder { buf, pos: 0, what };
        let m = d.take(4)?;
        if m != magic {
            return Err(Error::Format(format!(
                "{what}: bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = d.u32()?;
        if v != version {
            return Err(Error::Format(format!(
                "{what}: unsupported version {v}, expected {version}"
            )));
        }
        Ok(d)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "{}: truncated at byte {} (needed {n} more)",
                self.what, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
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

    pub fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("{}: size {v} overflows", self.what)))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::Format(format!("{}: tensor length {n} overflows", self.what))
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Format(format!("{}: invalid utf-8 string", self.what)))
    }

    pub fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format(format!("{}: matrix shape overflows", self.what)))?;
        Ok(Matrix::from_vec(rows, cols, self.f64s(n)?))
    }

    /// Reads a matrix and checks it against an expected shape.
    pub fn matrix_shaped(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let m = self.matrix()?;
        if (m.rows, m.cols) != (rows, cols) {
            return Err(Error::Format(format!(
                "{}: tensor {name} has shape {}x{}, expected {rows}x{cols}",
                self.what, m.rows, m.cols
            )));
        }
        Ok(m)
    }

    pub fn vector(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        self.f64s(n)
    }

    pub fn vector_sized(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        let v = self.vector()?;
        if v.len() != len {
            return Err(Error::Format(format!(
                "{}: tensor {name} has length {}, expected {len}",
                self.what,
                v.len()
            )));
        }
        Ok(v)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}
