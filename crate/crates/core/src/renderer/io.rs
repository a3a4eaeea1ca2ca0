//! Image files: 8-bit PGM for viewing and the raw `CRND` float format.

use std::io::{Read, Write};
use std::path::Path;

use super::RenderedImage;
use crate::error::{invalid_param, Error, Result};

const MAGIC: &[u8; 4] = b"CRND";

/// One channel as binary PGM, min-max normalized to 0..=255.
pub fn write_pgm(image: &RenderedImage, channel: usize, mut out: impl Write) -> Result<()> {
    if channel >= image.channels {
        return Err(invalid_param(format!("channel {channel} out of range ({} channels)", image.channels)));
    }
    let data = image.channel(channel);
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    write!(out, "P5\n{} {}\n255\n", image.width, image.height)?;
    let bytes: Vec<u8> = data
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

pub fn write_crnd(image: &RenderedImage, mut out: impl Write) -> Result<()> {
    let dims = [image.width, image.height, image.channels];
    out.write_all(MAGIC)?;
    for d in dims {
        let d = u32::try_from(d).map_err(|_| invalid_param("image dimension exceeds u32"))?;
        out.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(image.data.len() * 4);
    for &v in &image.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_crnd(mut input: impl Read) -> Result<RenderedImage> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header).map_err(|_| Error::Format("truncated CRND header".into()))?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("missing CRND magic".into()));
    }
    let dim = |k: usize| u32::from_le_bytes(header[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (w, h, c) = (dim(0), dim(1), dim(2));
    let n = w.checked_mul(h).and_then(|v| v.checked_mul(c)).ok_or_else(|| Error::Format("CRND size overflow".into()))?;
    let mut raw = vec![0u8; n * 4];
    input.read_exact(&mut raw).map_err(|_| Error::Format(format!("CRND body shorter than {n} values")))?;
    let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    RenderedImage::from_data(w, h, c, data)
}

pub fn save_crnd(image: &RenderedImage, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_crnd(image, std::io::BufWriter::new(f))
}

pub fn load_crnd(path: impl AsRef<Path>) -> Result<RenderedImage> {
    read_crnd(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn save_pgm(image: &RenderedImage, channel: usize, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_pgm(image, channel, std::io::BufWriter::new(f))
}
