//! Binary PGM masks and raw-f32 anomaly maps with JSON sidecars.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `H×W` binary ground truth, 1 marks an anomalous pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl MaskImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!("mask {height}x{width} with {} values", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::BadFormat("mask values must be 0 or 1".into()));
        }
        Ok(MaskImage { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        MaskImage {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&v| v == 1)
    }

    /// P5 encoding with 255 for anomalous pixels.
    pub fn to_pgm(&self) -> Vec<u8> {
        let pixels: Vec<u8> = self.data.iter().map(|&v| v * 255).collect();
        encode_pgm(self.width, self.height, &pixels)
    }

    pub fn from_pgm(buf: &[u8]) -> Result<Self> {
        let (width, height, pixels) = decode_pgm(buf)?;
        Ok(MaskImage {
            height,
            width,
            data: pixels.into_iter().map(|p| u8::from(p > 127)).collect(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::from(e).at(path))?;
        Self::from_pgm(&buf).map_err(|e| e.at(path))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::from(e).at(path))
    }
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses an 8-bit P5 file into `(width, height, pixels)`.
pub fn decode_pgm(buf: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::BadFormat(format!("PGM: {m}"));
    if buf.len() < 2 || &buf[..2] != b"P5" {
        return Err(bad("missing P5 signature"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments may precede each header token
        loop {
            match buf.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        let token = std::str::from_utf8(&buf[start..pos]).unwrap_or("");
        *field = token.parse().map_err(|_| bad("non-numeric header field"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad("zero extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit maxval is supported"));
    }
    if !buf.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(bad("missing separator after header"));
    }
    pos += 1;
    let n = width.checked_mul(height).ok_or_else(|| bad("extent overflow"))?;
    let body = &buf[pos..];
    if body.len() < n {
        return Err(bad(&format!("expected {n} pixels, found {}", body.len())));
    }
    if body.len() > n {
        return Err(bad(&format!("{} trailing bytes", body.len() - n)));
    }
    Ok((width, height, body.to_vec()))
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct MapSidecar {
    H: usize,
    W: usize,
}

/// Paths of the three files written for a map stem.
pub fn map_paths(stem: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".f32"), with(".json"), with(".pgm"))
}

/// Min-max scaled 8-bit preview; a flat map renders black.
pub fn map_preview(map: &Tensor) -> Vec<u8> {
    let d = map.data();
    let (lo, hi) = d
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    d.iter()
        .map(|&v| {
            if span > 0.0 {
                (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

/// Writes `<stem>.f32`, `<stem>.json` and `<stem>.pgm` for an `[H, W]` map.
pub fn write_map(map: &Tensor, stem: &Path) -> Result<()> {
    if map.rank() != 2 {
        return Err(Error::shape(format!("map must be [H, W], got {:?}", map.shape())));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let (raw, json, pgm) = map_paths(stem);
    let mut bytes = Vec::with_capacity(map.len() * 4);
    super::bytes::put_f32s(&mut bytes, map.data());
    std::fs::write(&raw, bytes).map_err(|e| Error::from(e).at(&raw))?;
    let sidecar = serde_json::to_vec(&MapSidecar { H: h, W: w })?;
    std::fs::write(&json, sidecar).map_err(|e| Error::from(e).at(&json))?;
    std::fs::write(&pgm, encode_pgm(w, h, &map_preview(map))).map_err(|e| Error::from(e).at(&pgm))
}

pub fn read_map(stem: &Path) -> Result<Tensor> {
    let (raw, json, _) = map_paths(stem);
    let side: MapSidecar = serde_json::from_slice(&std::fs::read(&json).map_err(|e| Error::from(e).at(&json))?)
        .map_err(|e| Error::from(e).at(&json))?;
    let bytes = std::fs::read(&raw).map_err(|e| Error::from(e).at(&raw))?;
    let mut r = super::bytes::Reader::new(&bytes);
    let n = super::bytes::checked_product(&[side.H, side.W])?;
    let data = r.f32s(n).map_err(|e| e.at(&raw))?;
    r.finish(true).map_err(|e| e.at(&raw))?;
    Tensor::new(vec![side.H, side.W], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_pgm_is_all_zero_mask() {
        let m = MaskImage::from_pgm(&encode_pgm(3, 2, &[0; 6])).unwrap();
        assert_eq!((m.height, m.width), (2, 3));
        assert!(!m.any());
    }

    #[test]
    fn threshold_at_127() {
        let m = MaskImage::from_pgm(&encode_pgm(4, 1, &[255, 128, 127, 0])).unwrap();
        assert_eq!(m.data, vec![1, 1, 0, 0]);
    }

    #[test]
    fn header_comments_and_odd_whitespace() {
        let mut buf = b"P5 # made by hand\n2\t1 # size\n  255\n".to_vec();
        buf.extend_from_slice(&[200, 3]);
        assert_eq!(MaskImage::from_pgm(&buf).unwrap().data, vec![1, 0]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(matches!(MaskImage::from_pgm(b"P6\n1 1\n255\n\0"), Err(Error::BadFormat(_))));
        assert!(matches!(MaskImage::from_pgm(b"P5\n2 2\n255\n\0"), Err(Error::BadFormat(_))));
        assert!(matches!(MaskImage::from_pgm(b"P5\n1 1\n65535\n\0\0"), Err(Error::BadFormat(_))));
        assert!(matches!(MaskImage::from_pgm(b"P5\n1 1\n255\n\0\0"), Err(Error::BadFormat(_))));
    }

    #[test]
    fn mask_round_trip() {
        let m = MaskImage::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(MaskImage::from_pgm(&m.to_pgm()).unwrap(), m);
    }

    #[test]
    fn map_round_trip_is_bitwise_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let map = Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0e-7, f32::MAX, 0.0, -0.0]).unwrap();
        let stem = dir.path().join("img");
        write_map(&map, &stem).unwrap();
        let back = read_map(&stem).unwrap();
        assert!(back.bitwise_eq(&map));
        let (raw, json, pgm) = map_paths(&stem);
        let first: Vec<Vec<u8>> = [&raw, &json, &pgm].iter().map(|p| std::fs::read(p).unwrap()).collect();
        write_map(&map, &stem).unwrap();
        let second: Vec<Vec<u8>> = [&raw, &json, &pgm].iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
        assert_eq!(std::fs::read_to_string(json).unwrap(), r#"{"H":2,"W":3}"#);
    }

    #[test]
    fn preview_scaling() {
        let map = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(map_preview(&map), vec![0, 128, 255]);
        assert_eq!(map_preview(&Tensor::filled(vec![1, 2], 4.0)), vec![0, 0]);
    }
}
