//! Little-endian binary containers.
//!
//! Every file starts with a 4-byte magic, a `u32` version and a fixed number
//! of `u32` extents, followed by the row-major payload.
//!
//! | magic  | extents            | payload |
//! |--------|--------------------|---------|
//! | `VSFT` | B, T, L, D         | f32     |
//! | `VSTP` | B, T - k, L, L     | f32     |
//! | `VSMK` | B, T, L            | u16     |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{FeatureSource, PatchFeatures};
use crate::tensor::Tensor;

pub const VERSION: u32 = 1;
pub const FEATURE_MAGIC: [u8; 4] = *b"VSFT";
pub const TARGET_MAGIC: [u8; 4] = *b"VSTP";
pub const MASK_MAGIC: [u8; 4] = *b"VSMK";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VSCK";

/// Append-only little-endian encoder.
#[derive(Debug, Default)]
pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn header(&mut self, magic: [u8; 4], dims: &[u32]) {
        self.bytes(&magic);
        self.u32(VERSION);
        dims.iter().for_each(|&d| self.u32(d));
    }
}

/// Cursor over a byte slice; every read checks the remaining length.
#[derive(Debug)]
pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                expected: self.pos + n,
                actual: self.data.len(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
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
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::InvalidArgument(format!("invalid utf-8 string: {e}")))
    }

    /// Checks magic and version and returns `n` extents.
    pub fn header(&mut self, magic: [u8; 4], n: usize) -> Result<Vec<usize>> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != magic {
            return Err(Error::BadMagic {
                expected: magic,
                found,
            });
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(Error::UnsupportedVersion(v));
        }
        (0..n).map(|_| Ok(self.u32()? as usize)).collect()
    }

    /// Requires exactly `n` payload bytes to remain.
    pub fn expect_payload(&self, n: usize) -> Result<()> {
        if self.remaining() != n {
            return Err(Error::Truncated {
                expected: self.pos + n,
                actual: self.data.len(),
            });
        }
        Ok(())
    }
}

fn to_u32(dims: &[usize]) -> Result<Vec<u32>> {
    dims.iter()
        .map(|&d| u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("extent {d} exceeds u32"))))
        .collect()
}

fn read_f32_payload(r: &mut ByteReader, n: usize) -> Result<Vec<f64>> {
    r.expect_payload(n * 4)?;
    let bytes = r.take(n * 4)?;
    bytes
        .chunks_exact(4)
        .enumerate()
        .map(|(i, c)| {
            let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            if v.is_finite() {
                Ok(v as f64)
            } else {
                Err(Error::NonFinite { index: i })
            }
        })
        .collect()
}

fn write_f32_payload(w: &mut ByteWriter, values: &[f64]) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        w.bytes(&f.to_le_bytes());
    }
    Ok(())
}

/// Grid for `L` patches: the most square factorization, rows ≤ cols.
pub fn infer_grid(num_patches: usize) -> (usize, usize) {
    let mut rows = (num_patches as f64).sqrt() as usize;
    while rows > 1 && num_patches % rows != 0 {
        rows -= 1;
    }
    let rows = rows.max(1);
    (rows, num_patches / rows)
}

/// `[B, T, L, D]` features.
pub fn encode_features(blocks: &[PatchFeatures]) -> Result<Vec<u8>> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no feature blocks to write".into()))?;
    let dims = first.values.shape().to_vec();
    let mut w = ByteWriter::new();
    w.header(FEATURE_MAGIC, &to_u32(&[blocks.len(), dims[0], dims[1], dims[2]])?);
    for b in blocks {
        if b.values.shape() != dims.as_slice() {
            return Err(Error::shape("write_features", &dims, b.values.shape()));
        }
        write_f32_payload(&mut w, b.values.data())?;
    }
    Ok(w.buf)
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<PatchFeatures>> {
    let mut r = ByteReader::new(bytes);
    let d = r.header(FEATURE_MAGIC, 4)?;
    let per = d[1] * d[2] * d[3];
    let values = read_f32_payload(&mut r, d[0] * per)?;
    let grid = infer_grid(d[2]);
    values
        .chunks(per.max(1))
        .take(d[0])
        .map(|c| {
            PatchFeatures::new(
                Tensor::new(&[d[1], d[2], d[3]], c.to_vec())?,
                grid,
                FeatureSource::File,
            )
        })
        .collect()
}

pub fn write_features(path: impl AsRef<Path>, blocks: &[PatchFeatures]) -> Result<()> {
    fs::write(path, encode_features(blocks)?)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<PatchFeatures>> {
    decode_features(&fs::read(path)?)
}

/// `[B, P, L, L]` transition probabilities, one `[P, L, L]` tensor per video.
pub fn encode_targets(blocks: &[Tensor]) -> Result<Vec<u8>> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no target blocks to write".into()))?;
    let dims = first.shape().to_vec();
    if dims.len() != 3 {
        return Err(Error::InvalidArgument(format!("targets must be [P, L, L], got {dims:?}")));
    }
    let mut w = ByteWriter::new();
    w.header(TARGET_MAGIC, &to_u32(&[blocks.len(), dims[0], dims[1], dims[2]])?);
    for b in blocks {
        if b.shape() != dims.as_slice() {
            return Err(Error::shape("write_targets", &dims, b.shape()));
        }
        write_f32_payload(&mut w, b.data())?;
    }
    Ok(w.buf)
}

pub fn decode_targets(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = ByteReader::new(bytes);
    let d = r.header(TARGET_MAGIC, 4)?;
    let per = d[1] * d[2] * d[3];
    let values = read_f32_payload(&mut r, d[0] * per)?;
    (0..d[0])
        .map(|b| Tensor::new(&[d[1], d[2], d[3]], values[b * per..(b + 1) * per].to_vec()))
        .collect()
}

pub fn write_targets(path: impl AsRef<Path>, blocks: &[Tensor]) -> Result<()> {
    fs::write(path, encode_targets(blocks)?)?;
    Ok(())
}

pub fn read_targets(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    decode_targets(&fs::read(path)?)
}

/// Instance ids `[B, T, L]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskFile {
    pub num_videos: usize,
    pub num_frames: usize,
    pub num_patches: usize,
    pub ids: Vec<u16>,
}

impl MaskFile {
    pub fn video(&self, b: usize) -> &[u16] {
        let n = self.num_frames * self.num_patches;
        &self.ids[b * n..(b + 1) * n]
    }
}

pub fn encode_masks(m: &MaskFile) -> Result<Vec<u8>> {
    if m.ids.len() != m.num_videos * m.num_frames * m.num_patches {
        return Err(Error::shape(
            "write_masks",
            &[m.ids.len()],
            &[m.num_videos, m.num_frames, m.num_patches],
        ));
    }
    let mut w = ByteWriter::new();
    w.header(MASK_MAGIC, &to_u32(&[m.num_videos, m.num_frames, m.num_patches])?);
    m.ids.iter().for_each(|id| w.bytes(&id.to_le_bytes()));
    Ok(w.buf)
}

pub fn decode_masks(bytes: &[u8]) -> Result<MaskFile> {
    let mut r = ByteReader::new(bytes);
    let d = r.header(MASK_MAGIC, 3)?;
    let n = d[0] * d[1] * d[2];
    r.expect_payload(n * 2)?;
    let ids = r
        .take(n * 2)?
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(MaskFile {
        num_videos: d[0],
        num_frames: d[1],
        num_patches: d[2],
        ids,
    })
}

pub fn write_masks(path: impl AsRef<Path>, m: &MaskFile) -> Result<()> {
    fs::write(path, encode_masks(m)?)?;
    Ok(())
}

pub fn read_masks(path: impl AsRef<Path>) -> Result<MaskFile> {
    decode_masks(&fs::read(path)?)
}
