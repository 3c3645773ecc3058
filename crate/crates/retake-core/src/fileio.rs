//! Little-endian binary container plumbing shared by the RTKF feature format
//! and the RTKW weight format. Errors carry the byte offset at which parsing
//! failed.

use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at byte {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: u64,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("unsupported format version {version} at byte {offset}")]
    UnsupportedVersion { offset: u64, version: u16 },
    #[error("truncated file at byte {offset}: {needed} more bytes expected")]
    Truncated { offset: u64, needed: u64 },
    #[error("dimension overflow at byte {offset}: {what}")]
    DimensionOverflow { offset: u64, what: String },
    #[error("non-finite value at byte {offset}")]
    NonFinite { offset: u64 },
    #[error("trailing data at byte {offset}")]
    TrailingData { offset: u64 },
    #[error("invalid field at byte {offset}: {what}")]
    InvalidField { offset: u64, what: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Byte reader that tracks its offset for error reporting.
pub struct Reader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<(), FormatError> {
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => {
                    return Err(FormatError::Truncated {
                        offset: self.offset + read as u64,
                        needed: (buf.len() - read) as u64,
                    })
                }
                Ok(n) => read += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn expect_magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let at = self.offset;
        let mut found = [0u8; 4];
        self.fill(&mut found)?;
        if found != expected {
            return Err(FormatError::BadMagic {
                offset: at,
                expected,
                found,
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        let mut b = [0u8; 1];
        self.fill(&mut b)?;
        Ok(b[0])
    }

    pub fn u16_le(&mut self) -> Result<u16, FormatError> {
        let mut b = [0u8; 2];
        self.fill(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn u64_le(&mut self) -> Result<u64, FormatError> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f64_le(&mut self) -> Result<f64, FormatError> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    /// Reads `count` f32 values; rejects non-finite payload entries.
    pub fn f32_vec(&mut self, count: usize) -> Result<Vec<f32>, FormatError> {
        let mut out = Vec::with_capacity(count);
        let mut buf = [0u8; 4];
        for _ in 0..count {
            let at = self.offset;
            self.fill(&mut buf)?;
            let v = f32::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(FormatError::NonFinite { offset: at });
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Asserts end-of-stream; anything left over is a format error.
    pub fn expect_eof(&mut self) -> Result<(), FormatError> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(FormatError::TrailingData { offset: self.offset }),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => self.expect_eof(),
            Err(e) => Err(e.into()),
        }
    }
}

/// Buffered little-endian writer.
pub struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn magic(&mut self, m: [u8; 4]) -> Result<(), FormatError> {
        self.inner.write_all(&m)?;
        Ok(())
    }

    pub fn u8(&mut self, v: u8) -> Result<(), FormatError> {
        self.inner.write_all(&[v])?;
        Ok(())
    }

    pub fn u16_le(&mut self, v: u16) -> Result<(), FormatError> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn u64_le(&mut self, v: u64) -> Result<(), FormatError> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn f64_le(&mut self, v: f64) -> Result<(), FormatError> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn f32_slice(&mut self, vs: &[f32]) -> Result<(), FormatError> {
        for v in vs {
            self.inner.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), FormatError> {
        self.inner.flush()?;
        Ok(())
    }
}

/// Checked `a · b` for header dimensions.
pub fn checked_mul(a: u64, b: u64, offset: u64, what: &str) -> Result<u64, FormatError> {
    a.checked_mul(b).ok_or_else(|| FormatError::DimensionOverflow {
        offset,
        what: what.to_string(),
    })
}

/// Converts a header count to usize, rejecting values the platform cannot
/// address.
pub fn to_count(v: u64, offset: u64, what: &str) -> Result<usize, FormatError> {
    usize::try_from(v).map_err(|_| FormatError::DimensionOverflow {
        offset,
        what: what.to_string(),
    })
}
