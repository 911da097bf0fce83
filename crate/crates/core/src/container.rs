//! Little-endian byte helpers shared by the binary file formats.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub(crate) fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

/// First eight bytes of the SHA-256 digest.
pub(crate) fn checksum8(data: &[u8]) -> [u8; 8] {
    let d = sha256(data);
    let mut out = [0u8; 8];
    out.copy_from_slice(&d[..8]);
    out
}

/// Splits off and verifies the trailing checksum, returning the body.
pub(crate) fn verify_checksum<'a>(bytes: &'a [u8], what: &str) -> Result<&'a [u8]> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!("{what} is truncated")));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 8);
    if checksum8(body) != sum {
        return Err(Error::Corruption(format!("{what} checksum mismatch")));
    }
    Ok(body)
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(data: &'a [u8], what: &'static str) -> Self {
        ByteReader { data, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| {
                Error::Format(format!("{} is truncated at byte {}", self.what, self.pos))
            })?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// Length prefix converted to `usize`, rejecting values larger than the
    /// remaining input divided by `unit`.
    pub(crate) fn len_u64(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        let rest = (self.data.len() - self.pos) / unit.max(1);
        if n > rest as u64 {
            return Err(Error::Format(format!(
                "{} declares {n} items, only {rest} fit",
                self.what
            )));
        }
        Ok(n as usize)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format(format!(
                "{} has {} trailing bytes",
                self.what,
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}
