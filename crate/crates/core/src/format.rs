//! Little-endian binary artifacts: domainness maps (`.dmap`) and feature
//! caches (`.dfea`). The model and transform formats reuse the same
//! primitives from their own modules.
//!
//! Every file starts with a four byte magic and a `u32` version.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{DomainnessMap, FeatureVector};

pub const FORMAT_VERSION: u32 = 1;

pub const DMAP_MAGIC: &[u8; 4] = b"DMAP";
pub const DFEA_MAGIC: &[u8; 4] = b"DFEA";

#[derive(Debug, Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn header(magic: &[u8; 4]) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(magic);
        w.u32(FORMAT_VERSION);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        fs::write(path, self.buf).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> ByteReader<'a> {
    /// Checks magic and version, leaving the cursor after the header.
    pub fn open(buf: &'a [u8], magic: &[u8; 4], kind: &'static str) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != magic {
            return Err(Error::Format(format!("not a {kind} file")));
        }
        let mut r = Self { buf, pos: 4, kind };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported {kind} version {version}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "truncated {} file: need {n} bytes at offset {}, have {}",
                self.kind,
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn finish(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes in {} file",
                self.remaining(),
                self.kind
            )));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_map(map: &DomainnessMap) -> Vec<u8> {
    let mut w = ByteWriter::header(DMAP_MAGIC);
    w.u32(map.height() as u32);
    w.u32(map.width() as u32);
    w.f32s(map.scores());
    w.into_inner()
}

pub fn decode_map(buf: &[u8]) -> Result<DomainnessMap> {
    let mut r = ByteReader::open(buf, DMAP_MAGIC, "DMAP")?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let scores = r.f32s(h * w)?;
    r.finish()?;
    DomainnessMap::new(h, w, scores)
}

pub fn save_map(map: &DomainnessMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_map(map)).map_err(|e| Error::io(path, e))
}

pub fn load_map(path: impl AsRef<Path>) -> Result<DomainnessMap> {
    decode_map(&read_file(path.as_ref())?)
}

/// Encodes `rows` (all of equal dimension) as a feature cache.
pub fn encode_features(rows: &[FeatureVector]) -> Result<Vec<u8>> {
    let dim = rows.first().map_or(0, FeatureVector::dim);
    let mut w = ByteWriter::header(DFEA_MAGIC);
    w.u32(rows.len() as u32);
    w.u32(dim as u32);
    for row in rows {
        crate::error::check_dim(dim, row.dim())?;
        w.f32s(row.values());
    }
    Ok(w.into_inner())
}

pub fn decode_features(buf: &[u8]) -> Result<Vec<FeatureVector>> {
    let mut r = ByteReader::open(buf, DFEA_MAGIC, "DFEA")?;
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        rows.push(FeatureVector::new(r.f32s(d)?)?);
    }
    r.finish()?;
    Ok(rows)
}

pub fn save_features(rows: &[FeatureVector], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(rows)?).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<FeatureVector>> {
    decode_features(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_map_byte_count() {
        let map = DomainnessMap::constant(2, 3, 0.0);
        let bytes = encode_map(&map);
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 24);
        assert_eq!(&bytes[..4], b"DMAP");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = encode_map(&DomainnessMap::constant(1, 1, 0.5));
        bytes[0] = b'X';
        let err = decode_map(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "not a DMAP file");
    }

    #[test]
    fn wrong_version_and_truncation() {
        let mut bytes = encode_map(&DomainnessMap::constant(2, 2, 0.5));
        bytes.pop();
        assert!(decode_map(&bytes).is_err());
        bytes[4] = 2;
        assert!(decode_map(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn feature_cache_layout() {
        let rows = vec![
            FeatureVector::new(vec![1.0, 2.0]).unwrap(),
            FeatureVector::new(vec![3.0, 4.0]).unwrap(),
            FeatureVector::new(vec![5.0, 6.0]).unwrap(),
        ];
        let bytes = encode_features(&rows).unwrap();
        assert_eq!(bytes.len(), 16 + 6 * 4);
        assert_eq!(&bytes[..4], b"DFEA");
        assert_eq!(decode_features(&bytes).unwrap(), rows);
        let ragged = vec![rows[0].clone(), FeatureVector::zeros(3)];
        assert!(encode_features(&ragged).is_err());
    }

    proptest! {
        #[test]
        fn map_round_trip_bit_exact(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let mut s = seed;
            let map = DomainnessMap::from_fn(h, w, |_, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits(((s >> 33) as u32) & 0x7f7f_ffff)
            });
            let back = decode_map(&encode_map(&map)).unwrap();
            let a: Vec<u32> = map.scores().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.scores().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
