//! Little-endian helpers shared by the on-disk formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Reader that tracks the byte offset so format errors can point at it.
pub(crate) struct LeReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> LeReader<R> {
    pub fn new(inner: R) -> Self {
        LeReader { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::format(self.offset, format!("unexpected end of file reading {N} bytes")))?;
        self.offset += N as u64;
        Ok(buf)
    }

    pub fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let at = self.offset;
        let got = self.bytes::<8>()?;
        if &got != expected {
            return Err(Error::format(
                at,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes::<8>()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes::<4>()?))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut raw = vec![0u8; n * 4];
        self.fill(&mut raw)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    pub fn i8s(&mut self, n: usize) -> Result<Vec<i8>> {
        let mut raw = vec![0u8; n];
        self.fill(&mut raw)?;
        Ok(raw.into_iter().map(|b| b as i8).collect())
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::format(self.offset, format!("unexpected end of file reading {} bytes", buf.len())))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    /// True when no bytes remain.
    pub fn at_eof(&mut self) -> Result<bool> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(true),
            Ok(_) => Err(Error::format(self.offset, "trailing bytes after payload")),
            Err(e) => Err(Error::format(self.offset, e.to_string())),
        }
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s<'a>(out: &mut Vec<u8>, vals: impl IntoIterator<Item = &'a f32>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
