//! Named-tensor container (`R2CK`).
//!
//! u32 version and entry count follow the magic; each entry is a u16 name
//! length, UTF-8 name, u32 rank, rank × u32 extents, then f32 data.

use std::collections::BTreeMap;
use std::path::Path;

use super::bytes::{checked_product, put_f32s, put_u32, Reader};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &str = "R2CK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered name → tensor map. Entry order is the order of insertion, which
/// keeps the byte output stable for a stable producer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::BadFormat(format!("entry name of {} bytes", name.len())));
        }
        if self.get(&name).is_some() {
            return Err(Error::BadFormat(format!("duplicate entry {name}")));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Takes the entries out as a map for consumers that look names up.
    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.entries.into_iter().collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, self.entries.len());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            put_f32s(&mut out, t.data());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        Self::from_bytes_with(buf, true)
    }

    pub fn from_bytes_with(buf: &[u8], strict: bool) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let count = r.usize()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::BadFormat("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.usize()?;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.usize()?);
            }
            let n = checked_product(&shape)?;
            let data = r.f32s(n)?;
            ck.insert(name, Tensor::new(shape, data)?)?;
        }
        r.finish(strict)?;
        Ok(ck)
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

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("adapter.text.W_up", Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        ck.insert("meta.seed", Tensor::vector(vec![f32::from_bits(7), f32::from_bits(0)])).unwrap();
        ck
    }

    #[test]
    fn round_trip_preserves_order_and_bits() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["adapter.text.W_up", "meta.seed"]);
        assert_eq!(back.get("meta.seed").unwrap().data()[0].to_bits(), 7);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ck = sample();
        assert!(ck.insert("meta.seed", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn truncation_and_trailing_bytes() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]), Err(Error::TruncatedFile { .. })));
        let mut long = bytes.clone();
        long.extend_from_slice(b"xx");
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::TrailingData(2))));
        assert!(Checkpoint::from_bytes_with(&long, false).is_ok());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'Q';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::BadMagic { .. })));
    }
}
