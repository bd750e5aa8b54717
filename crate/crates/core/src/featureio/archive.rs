//! Per-image feature archive (`R2CF`).
//!
//! Layout, little-endian: magic `R2CF`, u32 version = 1, u32 D, u32 L,
//! L × u32 layer id, u32 h_p, u32 w_p, u32 H, u32 W, f32[D] CLS, then L
//! contiguous f32[h_p·w_p·D] grids in declared layer order.

use std::path::Path;

use super::bytes::{checked_product, put_f32s, put_u32, Reader};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const ARCHIVE_MAGIC: &str = "R2CF";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureArchive {
    pub dim: usize,
    pub layer_ids: Vec<u32>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Global CLS vector, `D` values.
    pub cls: Vec<f32>,
    /// One `[h_p·w_p, D]` patch grid per tapped layer, in `layer_ids` order.
    pub layers: Vec<Tensor>,
}

impl FeatureArchive {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn layer(&self, id: u32) -> Option<&Tensor> {
        self.layer_ids.iter().position(|&l| l == id).map(|i| &self.layers[i])
    }

    pub fn layer_or_err(&self, id: u32) -> Result<&Tensor> {
        self.layer(id)
            .ok_or_else(|| Error::shape(format!("layer {id} not in archive layers {:?}", self.layer_ids)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.grid_h == 0 || self.grid_w == 0 || self.image_h == 0 || self.image_w == 0 {
            return Err(Error::shape("archive extents must be positive"));
        }
        if self.layer_ids.is_empty() || self.layer_ids.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "{} layer ids for {} grids",
                self.layer_ids.len(),
                self.layers.len()
            )));
        }
        let mut ids = self.layer_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.layer_ids.len() {
            return Err(Error::shape(format!("duplicate layer ids {:?}", self.layer_ids)));
        }
        if self.cls.len() != self.dim {
            return Err(Error::shape(format!("CLS has {} values, D = {}", self.cls.len(), self.dim)));
        }
        let expect = [self.num_patches(), self.dim];
        for (id, grid) in self.layer_ids.iter().zip(&self.layers) {
            if grid.shape() != expect {
                return Err(Error::shape(format!("layer {id} grid {:?}, expected {expect:?}", grid.shape())));
            }
        }
        Ok(())
    }

    /// Checks that `other` can share a memory bank with `self`.
    pub fn check_compatible(&self, other: &FeatureArchive) -> Result<()> {
        if self.dim != other.dim
            || self.layer_ids != other.layer_ids
            || self.grid_h != other.grid_h
            || self.grid_w != other.grid_w
        {
            return Err(Error::shape(format!(
                "archives differ: D {}/{}, layers {:?}/{:?}, grid {}x{}/{}x{}",
                self.dim,
                other.dim,
                self.layer_ids,
                other.layer_ids,
                self.grid_h,
                self.grid_w,
                other.grid_h,
                other.grid_w
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(64 + 4 * (self.dim + self.layers.len() * self.num_patches() * self.dim));
        out.extend_from_slice(ARCHIVE_MAGIC.as_bytes());
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        put_u32(&mut out, self.dim);
        put_u32(&mut out, self.layer_ids.len());
        for &id in &self.layer_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for v in [self.grid_h, self.grid_w, self.image_h, self.image_w] {
            put_u32(&mut out, v);
        }
        put_f32s(&mut out, &self.cls);
        for grid in &self.layers {
            put_f32s(&mut out, grid.data());
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        Self::from_bytes_with(buf, true)
    }

    pub fn from_bytes_with(buf: &[u8], strict: bool) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(ARCHIVE_MAGIC)?;
        r.version(ARCHIVE_VERSION)?;
        let dim = r.usize()?;
        let count = r.usize()?;
        let mut layer_ids = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            layer_ids.push(r.u32()?);
        }
        let (grid_h, grid_w, image_h, image_w) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
        let cls = r.f32s(dim)?;
        let per_layer = checked_product(&[grid_h, grid_w, dim])?;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            layers.push(Tensor::new(vec![grid_h * grid_w, dim], r.f32s(per_layer)?)?);
        }
        r.finish(strict)?;
        let archive = FeatureArchive {
            dim,
            layer_ids,
            grid_h,
            grid_w,
            image_h,
            image_w,
            cls,
            layers,
        };
        archive.validate()?;
        Ok(archive)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::from(e).at(path))?;
        Self::from_bytes(&buf).map_err(|e| e.at(path))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::from(e).at(path))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_archive(seed: u64, dim: usize, layers: &[u32], gh: usize, gw: usize) -> FeatureArchive {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_vec = |n: usize| (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        FeatureArchive {
            dim,
            layer_ids: layers.to_vec(),
            grid_h: gh,
            grid_w: gw,
            image_h: gh * 4,
            image_w: gw * 4,
            cls: rand_vec(dim),
            layers: layers
                .iter()
                .map(|_| Tensor::new(vec![gh * gw, dim], rand_vec(gh * gw * dim)).unwrap())
                .collect(),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let a = random_archive(1, 8, &[6, 12, 18, 24], 3, 5);
        let bytes = a.to_bytes().unwrap();
        let b = FeatureArchive::from_bytes(&bytes).unwrap();
        assert_eq!(a.cls.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.cls.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(a.layers.iter().zip(&b.layers).all(|(x, y)| x.bitwise_eq(y)));
        assert_eq!(bytes, b.to_bytes().unwrap());
    }

    #[test]
    fn header_layout_is_pinned() {
        let a = random_archive(2, 4, &[24], 1, 2);
        let bytes = a.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"R2CF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 24);
        // 5 header words + 4 extents + CLS + one 1×2×4 grid
        assert_eq!(bytes.len(), 4 + 4 * 4 + 4 * 4 + 4 * 4 + 4 * 8);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = random_archive(3, 4, &[1], 2, 2).to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(FeatureArchive::from_bytes(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = random_archive(3, 4, &[1], 2, 2).to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(FeatureArchive::from_bytes(&bytes), Err(Error::VersionMismatch { found: 2, .. })));
    }

    #[test]
    fn short_file_is_truncated() {
        let bytes = random_archive(4, 4, &[1, 2], 2, 2).to_bytes().unwrap();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(
                FeatureArchive::from_bytes(&bytes[..cut]),
                Err(Error::TruncatedFile { .. }) | Err(Error::BadMagic { .. })
            ));
        }
        assert!(matches!(
            FeatureArchive::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::TruncatedFile { .. })
        ));
    }

    #[test]
    fn trailing_garbage_only_fails_in_strict_mode() {
        let mut bytes = random_archive(5, 4, &[1], 2, 2).to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(FeatureArchive::from_bytes(&bytes), Err(Error::TrailingData(1))));
        assert!(FeatureArchive::from_bytes_with(&bytes, false).is_ok());
    }

    #[test]
    fn inconsistent_archive_cannot_be_written() {
        let mut a = random_archive(6, 4, &[1], 2, 2);
        a.cls.pop();
        assert!(matches!(a.to_bytes(), Err(Error::ShapeMismatch(_))));
    }
}
