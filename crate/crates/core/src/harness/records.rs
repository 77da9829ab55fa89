//! Flat binary image records: `u32` height, width and channels
//! (little-endian) followed by `H·W·C` little-endian `f64` pixels.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::spectral::ImageSample;

pub fn write_record<W: Write>(out: &mut W, img: &ImageSample) -> Result<()> {
    img.validate()?;
    for d in [img.height, img.width, img.channels] {
        let d = u32::try_from(d).map_err(|_| Error::InvalidImage(format!("dimension {d} exceeds u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    for p in &img.pixels {
        out.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one record, or `None` at a clean end of input.
pub fn read_record<R: Read>(input: &mut R) -> Result<Option<ImageSample>> {
    let mut header = [0u8; 12];
    let mut filled = 0;
    while filled < header.len() {
        let n = input.read(&mut header[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    match filled {
        0 => return Ok(None),
        12 => {}
        n => return Err(Error::InvalidImage(format!("truncated record header ({n} of 12 bytes)"))),
    }
    let dim = |k: usize| u32::from_le_bytes(header[4 * k..4 * k + 4].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let len = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| Error::InvalidImage(format!("record {h}x{w}x{c} overflows")))?;
    let mut payload = vec![0u8; len * 8];
    input
        .read_exact(&mut payload)
        .map_err(|_| Error::InvalidImage(format!("truncated record payload for {h}x{w}x{c}")))?;
    let pixels = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    ImageSample::new(h, w, c, pixels).map(Some)
}

pub fn write_records<W: Write>(out: &mut W, images: &[ImageSample]) -> Result<()> {
    for img in images {
        write_record(out, img)?;
    }
    Ok(())
}

pub fn read_records<R: Read>(input: &mut R) -> Result<Vec<ImageSample>> {
    let mut out = Vec::new();
    while let Some(img) = read_record(input)? {
        out.push(img);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let a = ImageSample::new(2, 3, 1, vec![0.0, 0.1, 0.2, 0.3, 0.4, 1.0]).unwrap();
        let b = ImageSample::new(1, 1, 3, vec![0.5, 0.25, 0.125]).unwrap();
        let mut buf = Vec::new();
        write_records(&mut buf, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(buf.len(), 12 + 48 + 12 + 24);
        assert_eq!(&buf[..4], &2u32.to_le_bytes());
        let back = read_records(&mut buf.as_slice()).unwrap();
        assert_eq!(back, vec![a, b]);
        assert!(read_records(&mut &buf[..buf.len() - 1]).is_err());
        assert!(read_records(&mut &buf[..5]).is_err());
    }
}
