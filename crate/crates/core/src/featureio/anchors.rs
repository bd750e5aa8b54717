//! Text anchor sets (`R2TA`): raw prompt embeddings plus their means.

use std::path::Path;

use super::bytes::{checked_product, put_f32s, put_u32, Reader};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const ANCHORS_MAGIC: &str = "R2TA";
pub const ANCHORS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TextAnchorSet {
    /// `[n_n, D]` normal prompt embeddings.
    pub normal_prompts: Tensor,
    /// `[n_a, D]` anomalous prompt embeddings.
    pub anomalous_prompts: Tensor,
    pub normal_anchor: Vec<f32>,
    pub anomalous_anchor: Vec<f32>,
}

fn row_mean(t: &Tensor) -> Vec<f32> {
    let d = t.cols();
    let mut acc = vec![0.0f64; d];
    for r in 0..t.rows() {
        for (a, &v) in acc.iter_mut().zip(t.row(r)) {
            *a += v as f64;
        }
    }
    acc.iter().map(|&v| (v / t.rows() as f64) as f32).collect()
}

impl TextAnchorSet {
    /// Builds the set and its averaged anchors from raw prompt embeddings.
    pub fn new(normal_prompts: Tensor, anomalous_prompts: Tensor) -> Result<Self> {
        if normal_prompts.rank() != 2 || anomalous_prompts.rank() != 2 {
            return Err(Error::shape("prompt embeddings must be [n, D] matrices"));
        }
        if normal_prompts.cols() != anomalous_prompts.cols() || normal_prompts.cols() == 0 {
            return Err(Error::shape(format!(
                "prompt widths {} vs {}",
                normal_prompts.cols(),
                anomalous_prompts.cols()
            )));
        }
        if normal_prompts.rows() == 0 || anomalous_prompts.rows() == 0 {
            return Err(Error::shape("at least one normal and one anomalous prompt are required"));
        }
        Ok(TextAnchorSet {
            normal_anchor: row_mean(&normal_prompts),
            anomalous_anchor: row_mean(&anomalous_prompts),
            normal_prompts,
            anomalous_prompts,
        })
    }

    pub fn dim(&self) -> usize {
        self.normal_prompts.cols()
    }

    /// Load-time check against the feature width of a paired archive.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::shape(format!("anchor width {} vs feature width {dim}", self.dim())));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ANCHORS_MAGIC.as_bytes());
        out.extend_from_slice(&ANCHORS_VERSION.to_le_bytes());
        put_u32(&mut out, self.dim());
        put_u32(&mut out, self.normal_prompts.rows());
        put_u32(&mut out, self.anomalous_prompts.rows());
        put_f32s(&mut out, self.normal_prompts.data());
        put_f32s(&mut out, self.anomalous_prompts.data());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        Self::from_bytes_with(buf, true)
    }

    pub fn from_bytes_with(buf: &[u8], strict: bool) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(ANCHORS_MAGIC)?;
        r.version(ANCHORS_VERSION)?;
        let (dim, n_n, n_a) = (r.usize()?, r.usize()?, r.usize()?);
        if n_a == 0 || n_n == 0 || dim == 0 {
            return Err(Error::shape(format!("anchor header D={dim} n_n={n_n} n_a={n_a}")));
        }
        let normal = r.f32s(checked_product(&[n_n, dim])?)?;
        let anomalous = r.f32s(checked_product(&[n_a, dim])?)?;
        r.finish(strict)?;
        TextAnchorSet::new(Tensor::new(vec![n_n, dim], normal)?, Tensor::new(vec![n_a, dim], anomalous)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::from(e).at(path))?;
        Self::from_bytes(&buf).map_err(|e| e.at(path))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::from(e).at(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TextAnchorSet {
        let n = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0]).unwrap();
        let a = Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap();
        TextAnchorSet::new(n, a).unwrap()
    }

    #[test]
    fn round_trip_and_means() {
        let s = sample();
        let back = TextAnchorSet::from_bytes(&s.to_bytes()).unwrap();
        assert!(back.normal_prompts.bitwise_eq(&s.normal_prompts));
        assert!(back.anomalous_prompts.bitwise_eq(&s.anomalous_prompts));
        assert!((back.normal_anchor[0] - 0.5).abs() < 1e-6);
        assert!((back.normal_anchor[1] - 0.5).abs() < 1e-6);
        assert_eq!(back.anomalous_anchor, vec![-1.0, 2.0]);
    }

    #[test]
    fn zero_anomalous_prompts_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[16..20].copy_from_slice(&0u32.to_le_bytes());
        bytes.truncate(20 + 3 * 2 * 4);
        assert!(matches!(TextAnchorSet::from_bytes(&bytes), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn width_mismatch_with_archive() {
        assert!(matches!(sample().check_dim(768), Err(Error::ShapeMismatch(_))));
        assert!(sample().check_dim(2).is_ok());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes();
        bytes[3] = b'X';
        assert!(matches!(TextAnchorSet::from_bytes(&bytes), Err(Error::BadMagic { .. })));
    }
}
