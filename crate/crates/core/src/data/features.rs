//! `VFEA` visual feature files: magic `VFEA`, then little-endian u32
//! version, rows and cols, then `rows × cols` f32 values in row-major order.
//!
//! Files hold the raw vision-encoder output including the leading class
//! token row; [`FeatureStore`] strips it on load.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::fusion::{strip_cls, VisualFeatures};

pub const VFEA_MAGIC: &[u8; 4] = b"VFEA";
pub const VFEA_VERSION: u32 = 1;

pub fn encode_features(f: &VisualFeatures) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * f.data().len());
    out.extend_from_slice(VFEA_MAGIC);
    out.extend_from_slice(&VFEA_VERSION.to_le_bytes());
    out.extend_from_slice(&(f.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(f.cols() as u32).to_le_bytes());
    for v in f.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<VisualFeatures> {
    if bytes.len() < 16 {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..4] != VFEA_MAGIC {
        return Err(Error::format(path, "bad magic, expected VFEA"));
    }
    let version = u32_at(bytes, 4);
    if version != VFEA_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let rows = u32_at(bytes, 8) as usize;
    let cols = u32_at(bytes, 12) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "expected {expected} bytes for {rows}x{cols}, found {}",
                bytes.len()
            ),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    VisualFeatures::new(rows, cols, data).map_err(|e| Error::format(path, e.to_string()))
}

/// Directory of `<image_id>.vfea` files.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    dir: PathBuf,
}

impl FeatureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FeatureStore { dir: dir.into() }
    }

    pub fn path_for(&self, image_id: &str) -> PathBuf {
        self.dir.join(format!("{image_id}.vfea"))
    }

    /// Raw matrix as stored, class token included.
    pub fn load_raw(&self, image_id: &str) -> Result<VisualFeatures> {
        let path = self.path_for(image_id);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        decode_features(&bytes, &path)
    }

    /// Patch features with the class token removed.
    pub fn load(&self, image_id: &str) -> Result<VisualFeatures> {
        strip_cls(&self.load_raw(image_id)?)
    }

    pub fn save_raw(&self, image_id: &str, raw: &VisualFeatures) -> Result<()> {
        write_atomic(&self.path_for(image_id), &encode_features(raw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn corrupted_magic_rejected() {
        let f = VisualFeatures::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = encode_features(&f);
        bytes[0] = b'X';
        let err = decode_features(&bytes, Path::new("x.vfea")).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn truncated_and_version_rejected() {
        let f = VisualFeatures::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_features(&f);
        assert!(decode_features(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(decode_features(&bytes[..10], Path::new("x")).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(decode_features(&v2, Path::new("x")).is_err());
    }

    #[test]
    fn store_strips_class_row() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::new(dir.path());
        let raw = VisualFeatures::new(3, 1, vec![7.0, 1.0, 2.0]).unwrap();
        store.save_raw("img", &raw).unwrap();
        assert_eq!(store.load_raw("img").unwrap(), raw);
        assert_eq!(store.load("img").unwrap().data(), &[1.0, 2.0]);
        assert!(store.load("missing").is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_roundtrip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|i| f32::from_bits((seed.wrapping_mul(i as u64 + 1) as u32) & 0x3fff_ffff))
                .collect();
            let f = VisualFeatures::new(rows, cols, data).unwrap();
            let bytes = encode_features(&f);
            let back = decode_features(&bytes, Path::new("p")).unwrap();
            prop_assert_eq!(encode_features(&back), bytes);
        }
    }
}
