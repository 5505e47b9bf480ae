//! Flat f64 dump of a clip: 16-byte header (`RLSD`, u32 version, u32
//! frame count, u16 height, u16 width), then frames row-major, little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{Modality, SynthVideo};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RAW_MAGIC: [u8; 4] = *b"RLSD";
pub const RAW_VERSION: u32 = 1;

pub fn write_raw(video: &SynthVideo, path: &Path) -> Result<()> {
    let first = video.frames.first().ok_or(Error::EmptySequence)?;
    let (h, w) = first.dims2("write_raw")?;
    let (h16, w16) = match (u16::try_from(h), u16::try_from(w)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Err(Error::Data(format!("frame {h}x{w} too large for raw dump"))),
    };
    let mut buf = Vec::with_capacity(16 + video.len() * h * w * 8);
    buf.extend_from_slice(&RAW_MAGIC);
    buf.extend_from_slice(&RAW_VERSION.to_le_bytes());
    buf.extend_from_slice(&(video.len() as u32).to_le_bytes());
    buf.extend_from_slice(&h16.to_le_bytes());
    buf.extend_from_slice(&w16.to_le_bytes());
    for f in &video.frames {
        if f.shape() != first.shape() {
            return Err(Error::shape("write_raw", first.shape(), f.shape()));
        }
        for v in f.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Reads a dump back. Label and modality are not stored; the caller supplies them.
pub fn read_raw(path: &Path, label: usize, modality: Modality) -> Result<SynthVideo> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || bytes[..4] != RAW_MAGIC {
        return Err(Error::Data(format!("{} is not a raw clip dump", path.display())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap()) as usize;
    let version = u32_at(4);
    if version != RAW_VERSION {
        return Err(Error::Data(format!("raw dump version {version}, expected {RAW_VERSION}")));
    }
    let (l, h, w) = (u32_at(8) as usize, u16_at(12), u16_at(14));
    if bytes.len() != 16 + l * h * w * 8 {
        return Err(Error::Data(format!(
            "raw dump holds {} payload bytes, header implies {}",
            bytes.len() - 16,
            l * h * w * 8
        )));
    }
    let mut vals = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let frames = (0..l)
        .map(|_| Tensor::new(vec![h, w], vals.by_ref().take(h * w).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthVideo {
        frames,
        label,
        modality,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, interaction_classes, Scenario};
    use rand::SeedableRng;

    #[test]
    fn round_trip_and_header() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let s = Scenario::sample(2, interaction_classes()[2], 32, 8, &mut rng).unwrap();
        let v = generate(&s, 6, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clip.raw");
        write_raw(&v, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 16 + 6 * 32 * 32 * 8);
        assert_eq!(&bytes[..4], b"RLSD");
        assert_eq!(bytes[8..12], 6u32.to_le_bytes());
        let back = read_raw(&p, 2, Modality::Appearance).unwrap();
        assert_eq!(back, v);

        std::fs::write(&p, &bytes[..100]).unwrap();
        assert!(read_raw(&p, 2, Modality::Appearance).is_err());
    }
}
