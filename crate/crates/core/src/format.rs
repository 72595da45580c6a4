//! Binary framing shared by the on-disk artifacts.
//!
//! Every binary artifact starts with an 8-byte magic tag and a little-endian
//! `u32` format version. Integers are little-endian `u64`, floats are raw
//! little-endian IEEE-754 bits (exact round-trip), strings are a `u64` byte
//! length followed by UTF-8 bytes.

use std::io::{Read, Write};

use crate::{Error, Result};

pub(crate) struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(mut inner: W, magic: &[u8; 8], version: u32) -> std::io::Result<Self> {
        inner.write_all(magic)?;
        inner.write_all(&version.to_le_bytes())?;
        Ok(Writer { inner })
    }

    pub fn u64(&mut self, x: u64) -> std::io::Result<()> {
        self.inner.write_all(&x.to_le_bytes())
    }

    pub fn usize(&mut self, x: usize) -> std::io::Result<()> {
        self.u64(x as u64)
    }

    pub fn f64s(&mut self, xs: &[f64]) -> std::io::Result<()> {
        self.usize(xs.len())?;
        for x in xs {
            self.inner.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn str(&mut self, s: &str) -> std::io::Result<()> {
        self.usize(s.len())?;
        self.inner.write_all(s.as_bytes())
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub(crate) struct Reader<R: Read> {
    inner: R,
    what: &'static str,
}

impl<R: Read> Reader<R> {
    /// Checks the magic tag and returns the reader plus the stored version.
    pub fn open(mut inner: R, magic: &[u8; 8], what: &'static str) -> Result<(Self, u32)> {
        let mut tag = [0u8; 8];
        inner.read_exact(&mut tag).map_err(|e| bad(what, e))?;
        if &tag != magic {
            return Err(Error::Format {
                what,
                message: format!(
                    "wrong magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&tag),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        let mut v = [0u8; 4];
        inner.read_exact(&mut v).map_err(|e| bad(what, e))?;
        Ok((Reader { inner, what }, u32::from_le_bytes(v)))
    }

    pub fn expect_version(what: &'static str, found: u32, supported: u32) -> Result<()> {
        if found != supported {
            return Err(Error::Format {
                what,
                message: format!("format version {found} is not supported (expected {supported})"),
            });
        }
        Ok(())
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b).map_err(|e| bad(self.what, e))?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn usize(&mut self) -> Result<usize> {
        let x = self.u64()?;
        usize::try_from(x).map_err(|_| Error::Format {
            what: self.what,
            message: format!("length {x} does not fit in memory"),
        })
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        let mut out = Vec::with_capacity(n.min(1 << 24));
        let mut b = [0u8; 8];
        for _ in 0..n {
            self.inner.read_exact(&mut b).map_err(|e| bad(self.what, e))?;
            out.push(f64::from_le_bytes(b));
        }
        Ok(out)
    }

    pub fn f64s_exact(&mut self, len: usize) -> Result<Vec<f64>> {
        let v = self.f64s()?;
        if v.len() != len {
            return Err(Error::Format {
                what: self.what,
                message: format!("expected {len} values, found {}", v.len()),
            });
        }
        Ok(v)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        if n > 1 << 30 {
            return Err(Error::Format {
                what: self.what,
                message: format!("string length {n} is implausible"),
            });
        }
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| bad(self.what, e))?;
        String::from_utf8(buf).map_err(|e| Error::Format {
            what: self.what,
            message: e.to_string(),
        })
    }

    /// Fails unless the stream is exhausted.
    pub fn end(mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::Format {
                what: self.what,
                message: "trailing bytes".into(),
            }),
            Err(e) => Err(bad(self.what, e)),
        }
    }
}

fn bad(what: &'static str, e: std::io::Error) -> Error {
    Error::Format {
        what,
        message: if e.kind() == std::io::ErrorKind::UnexpectedEof {
            "truncated file".into()
        } else {
            e.to_string()
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_magic_check() {
        let mut w = Writer::new(Vec::new(), b"TESTFMT1", 3).unwrap();
        w.str("héllo").unwrap();
        w.f64s(&[1.5, -0.0, f64::NAN]).unwrap();
        w.usize(7).unwrap();
        let buf = w.finish().unwrap();

        let (mut r, v) = Reader::open(buf.as_slice(), b"TESTFMT1", "test").unwrap();
        assert_eq!(v, 3);
        assert_eq!(r.str().unwrap(), "héllo");
        let xs = r.f64s().unwrap();
        assert_eq!(xs[1].to_bits(), (-0.0f64).to_bits());
        assert!(xs[2].is_nan());
        assert_eq!(r.usize().unwrap(), 7);
        r.end().unwrap();

        assert!(Reader::open(buf.as_slice(), b"OTHERFMT", "test").is_err());
        let (mut r, _) = Reader::open(&buf[..14], b"TESTFMT1", "test").unwrap();
        assert!(r.str().is_err());
    }
}
