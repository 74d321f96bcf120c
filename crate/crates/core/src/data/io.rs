//! `NGDS` dataset files: magic, u16 version, u32 count, u32 H, u32 W, u32 C,
//! then per sample u16 label, u32 patient id and C·H·W little-endian f32
//! pixels in channel-major order; CRC32 trailer.

use std::io::{Read, Write};
use std::path::Path;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::format::{check_frame, put_f32s, seal, Cursor};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NGDS";
pub const VERSION: u16 = 1;

pub fn write_dataset<W: Write>(ds: &LabeledImageSet, mut out: W) -> Result<()> {
    let [c, h, w] = ds.image_shape();
    let mut buf = Vec::with_capacity(22 + ds.len() * (6 + 4 * c * h * w) + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let n = u32::try_from(ds.len()).map_err(|_| Error::Format("too many samples".into()))?;
    buf.extend_from_slice(&n.to_le_bytes());
    for d in [h, w, c] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for i in 0..ds.len() {
        let label = u16::try_from(ds.label(i)).map_err(|_| Error::Format("label exceeds u16".into()))?;
        buf.extend_from_slice(&label.to_le_bytes());
        buf.extend_from_slice(&ds.patient_ids()[i].to_le_bytes());
        put_f32s(&mut buf, ds.image(i));
    }
    seal(&mut buf);
    out.write_all(&buf)?;
    Ok(())
}

/// Reads a dataset. Class names are not stored: the class count is one more
/// than the largest label (at least three) and the names are generic.
pub fn read_dataset<R: Read>(mut input: R) -> Result<LabeledImageSet> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let body = check_frame(&bytes, MAGIC, "NGDS", VERSION)?;
    let mut cur = Cursor::new(body);
    let n = cur.u32()? as usize;
    let (h, w, c) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Format(format!("invalid image shape {c}x{h}x{w}")));
    }
    let per = c * h * w;
    let mut labels = Vec::with_capacity(n);
    let mut patients = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * per);
    for _ in 0..n {
        labels.push(cur.u16()? as usize);
        patients.push(cur.u32()?);
        pixels.extend(cur.f32s(per)?);
    }
    cur.finish()?;
    let k = labels.iter().max().map_or(0, |&m| m + 1).max(3);
    let names = LabeledImageSet::generic_names(k);
    if n == 0 {
        return Ok(LabeledImageSet::empty([c, h, w], names));
    }
    LabeledImageSet::new(Tensor::new(vec![n, c, h, w], pixels)?, labels, patients, names)
}

pub fn save_dataset(ds: &LabeledImageSet, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    write_dataset(ds, &mut bytes)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    read_dataset(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};

    #[test]
    fn round_trip_and_corruption() {
        let ds = gen_synthetic(&SynthConfig { n: 12, patients: 4, ..SynthConfig::default() }, 3).unwrap();
        let mut b = Vec::new();
        write_dataset(&ds, &mut b).unwrap();
        assert_eq!(read_dataset(&b[..]).unwrap(), ds);
        assert!(matches!(read_dataset(&b[..b.len() - 1]), Err(Error::Checksum)));
        let mut bad = b.clone();
        bad[30] ^= 1;
        assert!(matches!(read_dataset(&bad[..]), Err(Error::Checksum)));
        bad = b.clone();
        bad[1] = b'X';
        assert!(matches!(read_dataset(&bad[..]), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn empty_set_round_trips() {
        let ds = gen_synthetic(&SynthConfig { n: 6, patients: 3, ..SynthConfig::default() }, 1).unwrap().subset(&[]);
        let mut b = Vec::new();
        write_dataset(&ds, &mut b).unwrap();
        let back = read_dataset(&b[..]).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.image_shape(), [1, 28, 28]);
    }
}
