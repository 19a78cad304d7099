//! Little-endian section codec shared by the index and cache snapshot files.
//!
//! Layout: `magic[8] | format u32 | body... | crc64 u64`. The checksum covers
//! every byte before it.

use crc::{Crc, CRC_64_ECMA_182};

use crate::error::{Error, Result};

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

pub(crate) fn checksum(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 8], format: u32) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(format);
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
        self.u64(v.to_bits());
    }

    pub fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }

    /// Writes a length-prefixed section produced by `body`.
    pub fn section(&mut self, tag: u8, body: impl FnOnce(&mut Writer)) {
        self.u8(tag);
        let len_at = self.buf.len();
        self.u64(0);
        let start = self.buf.len();
        body(self);
        let len = (self.buf.len() - start) as u64;
        self.buf[len_at..len_at + 8].copy_from_slice(&len.to_le_bytes());
    }

    pub fn finish(mut self) -> Vec<u8> {
        let sum = checksum(&self.buf);
        self.u64(sum);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Verifies magic, format, and the trailing checksum before any parsing.
    pub fn open(bytes: &'a [u8], magic: &[u8; 8], format: u32) -> Result<Self> {
        if bytes.len() < 8 + 4 + 8 {
            return Err(Error::Integrity(format!("file too short ({} bytes)", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8-byte tail"));
        let actual = checksum(body);
        if stored != actual {
            return Err(Error::Integrity(format!(
                "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
            )));
        }
        if &body[..8] != magic {
            return Err(Error::Integrity("bad magic".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let got = r.u32()?;
        if got != format {
            return Err(Error::Integrity(format!("unsupported format version {got}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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
        Ok(f64::from_bits(self.u64()?))
    }

    /// A length that must still fit in the remaining input, at `min_item`
    /// bytes per element.
    pub fn len(&mut self, min_item: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(min_item as u64) > remaining {
            return Err(Error::Integrity(format!("implausible length {n}")));
        }
        Ok(n as usize)
    }

    /// Opens the next section, which must carry `tag`.
    pub fn section(&mut self, tag: u8) -> Result<Reader<'a>> {
        let got = self.u8()?;
        if got != tag {
            return Err(Error::Integrity(format!("expected section {tag}, found {got}")));
        }
        let len = self.u64()?;
        let body = self.take(usize::try_from(len).map_err(|_| Error::Integrity("section too large".into()))?)?;
        Ok(Reader { buf: body, pos: 0 })
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}
