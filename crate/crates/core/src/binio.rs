//! Little-endian readers and writers shared by the dataset and checkpoint formats.

use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes());
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], path: &Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::parse(&self.path, self.offset(), message)
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.error(format!(
                "truncated {what}: needs {n} bytes, {} remain",
                self.bytes.len() - self.pos
            ))),
        }
    }

    pub fn expect(&mut self, magic: &[u8], what: &str) -> Result<()> {
        let start = self.pos;
        if self.take(magic.len(), what)? != magic {
            self.pos = start;
            return Err(self.error(format!("bad {what}")));
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn usize(&mut self, what: &str) -> Result<usize> {
        let start = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| {
            self.pos = start;
            self.error(format!("{what} {v} does not fit in memory"))
        })
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn str(&mut self, what: &str) -> Result<String> {
        let n = self.usize(what)?;
        let start = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| {
            self.pos = start;
            self.error(format!("{what} is not UTF-8"))
        })
    }

    pub fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let start = self.pos;
        let ndim = self.u32(what)? as usize;
        if ndim > 8 {
            self.pos = start;
            return Err(self.error(format!("{what}: implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.usize(what)?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| self.error(format!("{what}: shape {shape:?} exceeds the remaining bytes")))?;
        let data_start = self.pos;
        let data = (0..numel).map(|_| self.f64(what)).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| {
            self.pos = data_start;
            self.error(format!("{what}: {e}"))
        })
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation_offset() {
        let mut w = ByteWriter::new();
        w.u32(7);
        w.str("name");
        w.tensor(&Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap());
        let bytes = w.into_bytes();
        let path = Path::new("mem");
        let mut r = ByteReader::new(&bytes, path);
        assert_eq!(r.u32("a").unwrap(), 7);
        assert_eq!(r.str("b").unwrap(), "name");
        assert_eq!(r.tensor("c").unwrap().data(), &[1.5, -2.0]);
        assert!(r.is_at_end());
        let cut = &bytes[..bytes.len() - 3];
        let mut r = ByteReader::new(cut, path);
        r.u32("a").unwrap();
        r.str("b").unwrap();
        match r.tensor("c") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4 + 12 + 4 + 16),
            other => panic!("{other:?}"),
        }
    }
}
