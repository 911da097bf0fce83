//! Compressed image stream:
//!
//! ```text
//! "IDFZ" | version u16 | model hash [32] | shape 4 x u32 | bits u8
//!        | level count u8 | per level: lo i32, hi i32
//!        | payload length u64 | payload
//!        | escape count u32 | escapes i32...
//!        | checksum [8]
//! ```
//!
//! Little-endian throughout; the checksum is the first 8 bytes of SHA-256
//! over everything before it.

use crate::container::{checksum8, verify_checksum, ByteReader};
use crate::error::{Error, Result};
use crate::grid::Shape4;

pub const STREAM_MAGIC: &[u8; 4] = b"IDFZ";
pub const STREAM_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressedStream {
    pub model_hash: [u8; 32],
    pub shape: Shape4,
    pub bits: u32,
    /// Latent alphabet `lo..=hi` in codes, one entry per level.
    pub alphabets: Vec<(i32, i32)>,
    pub payload: Vec<u8>,
    /// Raw values of out-of-alphabet latents, in decoding order.
    pub escapes: Vec<i32>,
}

impl CompressedStream {
    /// Bits spent on the entropy-coded payload and the escape section.
    pub fn coded_bits(&self) -> u64 {
        8 * self.payload.len() as u64 + 32 * self.escapes.len() as u64
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(96 + self.payload.len() + 4 * self.escapes.len());
        out.extend_from_slice(STREAM_MAGIC);
        out.extend_from_slice(&STREAM_VERSION.to_le_bytes());
        out.extend_from_slice(&self.model_hash);
        for &d in &self.shape {
            let d =
                u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(u8::try_from(self.bits).map_err(|_| Error::Format("bit depth too large".into()))?);
        out.push(
            u8::try_from(self.alphabets.len())
                .map_err(|_| Error::Format("too many levels".into()))?,
        );
        for &(lo, hi) in &self.alphabets {
            out.extend_from_slice(&lo.to_le_bytes());
            out.extend_from_slice(&hi.to_le_bytes());
        }
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(
            &u32::try_from(self.escapes.len())
                .map_err(|_| Error::Format("too many escapes".into()))?
                .to_le_bytes(),
        );
        for e in &self.escapes {
            out.extend_from_slice(&e.to_le_bytes());
        }
        let sum = checksum8(&out);
        out.extend_from_slice(&sum);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != STREAM_MAGIC {
            return Err(Error::Format("not a compressed stream".into()));
        }
        let body = verify_checksum(bytes, "compressed stream")?;
        let mut r = ByteReader::new(&body[4..], "compressed stream");
        let version = r.u16()?;
        if version != STREAM_VERSION {
            return Err(Error::Format(format!(
                "unsupported stream version {version}"
            )));
        }
        let model_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        let bits = r.u8()? as u32;
        let levels = r.u8()? as usize;
        let mut alphabets = Vec::with_capacity(levels);
        for _ in 0..levels {
            let lo = r.i32()?;
            let hi = r.i32()?;
            if lo > hi {
                return Err(Error::Format(format!("empty alphabet {lo}..={hi}")));
            }
            alphabets.push((lo, hi));
        }
        let plen = r.len_u64(1)?;
        let payload = r.take(plen)?.to_vec();
        let n = r.u32()? as usize;
        if n > body.len() / 4 {
            return Err(Error::Format(format!("{n} escapes cannot fit")));
        }
        let escapes = (0..n).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(CompressedStream {
            model_hash,
            shape,
            bits,
            alphabets,
            payload,
            escapes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> CompressedStream {
        CompressedStream {
            model_hash: [7; 32],
            shape: [2, 8, 8, 3],
            bits: 8,
            alphabets: vec![(-1024, 1023), (-1024, 1023)],
            payload: (0..=255).collect(),
            escapes: vec![-5000, 4096],
        }
    }

    #[test]
    fn byte_roundtrip() {
        let s = example();
        let b = s.to_bytes().unwrap();
        assert_eq!(&b[..4], b"IDFZ");
        assert_eq!(b.len(), 4 + 2 + 32 + 16 + 1 + 1 + 16 + 8 + 256 + 4 + 8 + 8);
        assert_eq!(CompressedStream::from_bytes(&b).unwrap(), s);
    }

    #[test]
    fn damage_is_reported() {
        let b = example().to_bytes().unwrap();
        let mut flipped = b.clone();
        flipped[100] ^= 0x10;
        assert!(matches!(
            CompressedStream::from_bytes(&flipped),
            Err(Error::Corruption(_))
        ));
        assert!(matches!(
            CompressedStream::from_bytes(&b[..3]),
            Err(Error::Format(_))
        ));
        let mut wrong = b.clone();
        wrong[0] = b'X';
        assert!(matches!(
            CompressedStream::from_bytes(&wrong),
            Err(Error::Format(_))
        ));
    }
}
