//! Little-endian binary formats for depth (`.dpt`), dense features (`.dfm`),
//! embeddings (`.emb`), and masks (`.msk`).
//!
//! ```text
//! .dpt  "DPT1" u32 height u32 width        f32[height*width]
//! .dfm  "DFM1" u32 gh u32 gw u32 c u32 ih u32 iw u8 flags  f32[gh*gw*c]
//! .emb  "EMB1" u8 kind u32 dim             f32[dim]
//! .msk  "MSK1" u32 height u32 width        u8[ceil(h*w/8)]  (MSB first)
//! ```
//! All arrays are row-major; feature maps store channels fastest.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{DenseFeatureMap, Embedding, EmbeddingKind, PixelMask};
use crate::geometry::DepthImage;

pub const DPT_MAGIC: &[u8; 4] = b"DPT1";
pub const DFM_MAGIC: &[u8; 4] = b"DFM1";
pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const MSK_MAGIC: &[u8; 4] = b"MSK1";

const DFM_FLAG_NORMALIZED: u8 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if buf.len() < 4 {
            return Err(Error::TruncatedFile {
                expected: 4,
                found: buf.len(),
            });
        }
        if &buf[..4] != magic {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&buf[..4]).into_owned(),
            });
        }
        Ok(Self { buf, pos: 4 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| Error::InvalidData("size overflow".into()))?;
        if end > self.buf.len() {
            return Err(Error::TruncatedFile {
                expected: end,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::InvalidData("size overflow".into()))?;
        let b = self.take(bytes)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn product(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidData("header dimensions overflow".into()))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    out.reserve(vals.len() * 4);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingAsset(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn encode_depth(depth: &DepthImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + depth.values.len() * 4);
    out.extend_from_slice(DPT_MAGIC);
    put_u32(&mut out, depth.height);
    put_u32(&mut out, depth.width);
    put_f32s(&mut out, &depth.values);
    out
}

pub fn decode_depth(buf: &[u8]) -> Result<DepthImage> {
    let mut r = Reader::new(buf, DPT_MAGIC)?;
    let height = r.u32()?;
    let width = r.u32()?;
    let values = r.f32s(product(&[height, width])?)?;
    r.finish()?;
    DepthImage::new(width, height, values)
}

pub fn encode_feature_map(map: &DenseFeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(25 + map.data().len() * 4);
    out.extend_from_slice(DFM_MAGIC);
    for d in [
        map.grid_height,
        map.grid_width,
        map.channels,
        map.image_height,
        map.image_width,
    ] {
        put_u32(&mut out, d);
    }
    out.push(if map.normalized { DFM_FLAG_NORMALIZED } else { 0 });
    put_f32s(&mut out, map.data());
    out
}

/// Header fields of a `.dfm` file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMapHeader {
    pub grid_height: usize,
    pub grid_width: usize,
    pub channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub normalized: bool,
}

fn read_dfm_header(r: &mut Reader<'_>) -> Result<FeatureMapHeader> {
    Ok(FeatureMapHeader {
        grid_height: r.u32()?,
        grid_width: r.u32()?,
        channels: r.u32()?,
        image_height: r.u32()?,
        image_width: r.u32()?,
        normalized: r.u8()? & DFM_FLAG_NORMALIZED != 0,
    })
}

pub fn decode_feature_map(buf: &[u8]) -> Result<DenseFeatureMap> {
    let mut r = Reader::new(buf, DFM_MAGIC)?;
    let h = read_dfm_header(&mut r)?;
    let data = r.f32s(product(&[h.grid_height, h.grid_width, h.channels])?)?;
    r.finish()?;
    let map = DenseFeatureMap::new(
        h.grid_height,
        h.grid_width,
        h.channels,
        h.image_height,
        h.image_width,
        h.normalized,
        data,
    )?;
    map.validate()?;
    Ok(map)
}

pub fn encode_embedding(e: &Embedding) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + e.values.len() * 4);
    out.extend_from_slice(EMB_MAGIC);
    out.push(match e.kind {
        EmbeddingKind::Image => 0,
        EmbeddingKind::Text => 1,
    });
    put_u32(&mut out, e.values.len());
    put_f32s(&mut out, &e.values);
    out
}

pub fn decode_embedding(buf: &[u8]) -> Result<Embedding> {
    let mut r = Reader::new(buf, EMB_MAGIC)?;
    let kind = match r.u8()? {
        0 => EmbeddingKind::Image,
        1 => EmbeddingKind::Text,
        k => return Err(Error::InvalidData(format!("unknown embedding kind {k}"))),
    };
    let dim = r.u32()?;
    let values = r.f32s(dim)?;
    r.finish()?;
    Ok(Embedding { kind, values })
}

pub fn encode_mask(mask: &PixelMask) -> Vec<u8> {
    let n = mask.width * mask.height;
    let mut out = Vec::with_capacity(12 + n.div_ceil(8));
    out.extend_from_slice(MSK_MAGIC);
    put_u32(&mut out, mask.height);
    put_u32(&mut out, mask.width);
    let mut packed = vec![0u8; n.div_ceil(8)];
    for (i, _) in mask.bits().iter().enumerate().filter(|(_, b)| **b) {
        packed[i / 8] |= 0x80 >> (i % 8);
    }
    out.extend_from_slice(&packed);
    out
}

pub fn decode_mask(buf: &[u8]) -> Result<PixelMask> {
    let mut r = Reader::new(buf, MSK_MAGIC)?;
    let height = r.u32()?;
    let width = r.u32()?;
    let n = product(&[height, width])?;
    let packed = r.take(n.div_ceil(8))?;
    r.finish()?;
    let bits = (0..n).map(|i| packed[i / 8] & (0x80 >> (i % 8)) != 0).collect();
    PixelMask::from_bits(width, height, bits)
}

pub fn load_depth(path: impl AsRef<Path>) -> Result<DepthImage> {
    decode_depth(&read_file(path.as_ref())?)
}

pub fn save_depth(depth: &DepthImage, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_depth(depth))
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<DenseFeatureMap> {
    decode_feature_map(&read_file(path.as_ref())?)
}

pub fn save_feature_map(map: &DenseFeatureMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_feature_map(map))
}

/// Reads only the 25-byte header of a `.dfm` file.
pub fn load_feature_map_header(path: impl AsRef<Path>) -> Result<FeatureMapHeader> {
    use std::io::Read;
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingAsset(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut buf = Vec::with_capacity(25);
    Read::take(&mut f, 25).read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&buf, DFM_MAGIC)?;
    read_dfm_header(&mut r)
}

pub fn load_embedding(path: impl AsRef<Path>) -> Result<Embedding> {
    decode_embedding(&read_file(path.as_ref())?)
}

pub fn save_embedding(e: &Embedding, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_embedding(e))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<PixelMask> {
    decode_mask(&read_file(path.as_ref())?)
}

pub fn save_mask(mask: &PixelMask, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_mask(mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_magic() {
        let mut bytes = encode_feature_map(&DenseFeatureMap::new(1, 1, 1, 1, 1, false, vec![1.0]).unwrap());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_feature_map(&bytes), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_depth(b"DFM1"), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload() {
        // header claims 4x4x8 = 128 floats but only 100 follow
        let mut bytes = Vec::new();
        bytes.extend_from_slice(DFM_MAGIC);
        for d in [4u32, 4, 8, 4, 4] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.push(0);
        bytes.extend(std::iter::repeat(0u8).take(100 * 4));
        assert_eq!(bytes.len(), 25 + 400);
        match decode_feature_map(&bytes) {
            Err(Error::TruncatedFile { expected, found }) => {
                assert_eq!(expected, 25 + 128 * 4);
                assert_eq!(found, 425);
            }
            other => panic!("expected TruncatedFile, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_a_dimension_mismatch() {
        let mut bytes = encode_embedding(&Embedding::text(vec![1.0, 2.0]));
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(decode_embedding(&bytes), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn mask_bits_are_msb_first() {
        let mut m = PixelMask::new(3, 3);
        m.set(0, 0, true);
        m.set(2, 2, true); // bit 8 -> second byte MSB
        let bytes = encode_mask(&m);
        assert_eq!(&bytes[12..], &[0x80, 0x80]);
        assert_eq!(decode_mask(&bytes).unwrap(), m);
    }

    #[test]
    fn embedding_kind_byte() {
        assert_eq!(encode_embedding(&Embedding::image(vec![1.0]))[4], 0);
        assert_eq!(encode_embedding(&Embedding::text(vec![1.0]))[4], 1);
        let mut bytes = encode_embedding(&Embedding::text(vec![1.0]));
        bytes[4] = 7;
        assert!(matches!(decode_embedding(&bytes), Err(Error::InvalidData(_))));
    }

    #[test]
    fn depth_layout() {
        let d = DepthImage::new(2, 1, vec![1.5, f32::NAN]).unwrap();
        let bytes = encode_depth(&d);
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1.5f32.to_le_bytes());
        assert_eq!(encode_depth(&decode_depth(&bytes).unwrap()), bytes);
    }
}
