//! Shared framing for the binary file formats: 4-byte magic, u16 version,
//! body, little-endian CRC32 of everything before the trailer.

use crate::error::{Error, Result};

/// Validates magic, then version, then checksum; returns the body between
/// the version field and the trailer.
pub(crate) fn check_frame<'b>(bytes: &'b [u8], magic: &[u8; 4], name: &'static str, version: u16) -> Result<&'b [u8]> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::BadMagic { expected: name });
    }
    if bytes.len() < 6 {
        return Err(Error::Checksum);
    }
    let found = u16::from_le_bytes([bytes[4], bytes[5]]);
    if found != version {
        return Err(Error::Version(format!("{name} version {found}, expected {version}")));
    }
    if bytes.len() < 10 {
        return Err(Error::Checksum);
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("four bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(Error::Checksum);
    }
    Ok(&payload[6..])
}

/// Appends the CRC32 trailer to a fully written frame.
pub(crate) fn seal(buf: &mut Vec<u8>) {
    let crc = crc32fast::hash(buf);
    buf.extend_from_slice(&crc.to_le_bytes());
}

pub(crate) struct Cursor<'b> {
    data: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    pub fn new(data: &'b [u8]) -> Self {
        Cursor { data, pos: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::Format(format!("record overruns the file at byte {}", self.pos)))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("exact length"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?;
        Ok(self.bytes(len)?.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    }

    /// Errors if unread bytes remain.
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn put_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    buf.reserve(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}
