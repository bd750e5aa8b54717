//! Text, local visual and global visual residuals, with memory-bank
//! retrieval under a radial penalty.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featureio::{FeatureArchive, TextAnchorSet};
use crate::numerics::ops::{norm, NORM_EPS};
use crate::numerics::sparsemax::sparsemax;
use crate::numerics::{normalized, Tensor};

pub const DEFAULT_GAMMA: f64 = 0.01;

/// `R_t = â − n̂` of the averaged anchors.
pub fn build_text_residual(anchors: &TextAnchorSet) -> Result<Vec<f32>> {
    text_residual(&anchors.anomalous_anchor, &anchors.normal_anchor)
}

pub fn text_residual(anomalous: &[f32], normal: &[f32]) -> Result<Vec<f32>> {
    let a = normalized(anomalous)?;
    let n = normalized(normal)?;
    Ok(a.iter().zip(&n).map(|(x, y)| x - y).collect())
}

/// Distance of each patch center from the grid center, row-major, scaled so
/// a corner patch sits at 1. A 1×1 grid is all center.
pub fn radial_distances(grid_h: usize, grid_w: usize) -> Vec<f64> {
    let cy = (grid_h as f64 - 1.0) / 2.0;
    let cx = (grid_w as f64 - 1.0) / 2.0;
    let scale = (cy * cy + cx * cx).sqrt();
    let mut out = Vec::with_capacity(grid_h * grid_w);
    for y in 0..grid_h {
        for x in 0..grid_w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            out.push(if scale > 0.0 { (dy * dy + dx * dx).sqrt() / scale } else { 0.0 });
        }
    }
    out
}

fn unit_rows(t: &Tensor) -> Result<Vec<f64>> {
    let d = t.cols();
    let mut out = Vec::with_capacity(t.len());
    for r in 0..t.rows() {
        let row = t.row(r);
        let n = norm(row);
        if n <= NORM_EPS {
            return Err(Error::ZeroNorm);
        }
        out.extend(row.iter().map(|&v| v as f64 / n));
    }
    debug_assert_eq!(out.len(), t.rows() * d);
    Ok(out)
}

/// Dot product with four interleaved accumulators.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Per-layer reference patches of K normal images, concatenated in
/// reference order.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    pub layer_ids: Vec<u32>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub shots: usize,
    /// Raw `[K·N, D]` rows per layer, in `layer_ids` order.
    pub rows: Vec<Tensor>,
    /// Unit-normalized copies of `rows`, flattened.
    unit: Vec<Vec<f64>>,
    /// Radial distance of every bank row.
    pub radial: Vec<f64>,
    /// Mean of the references' raw CLS vectors.
    pub cls_mean: Vec<f32>,
}

impl MemoryBank {
    pub fn build(references: &[&FeatureArchive], layer_ids: &[u32]) -> Result<Self> {
        let Some(first) = references.first() else {
            return Err(Error::shape("memory bank needs at least one reference"));
        };
        for r in &references[1..] {
            first.check_compatible(r)?;
        }
        let n = first.num_patches();
        let d = first.dim;
        let mut rows = Vec::with_capacity(layer_ids.len());
        for &id in layer_ids {
            let mut data = Vec::with_capacity(references.len() * n * d);
            for r in references {
                data.extend_from_slice(r.layer_or_err(id)?.data());
            }
            rows.push(Tensor::new(vec![references.len() * n, d], data)?);
        }
        let unit = rows.iter().map(unit_rows).collect::<Result<Vec<_>>>()?;
        let per_image = radial_distances(first.grid_h, first.grid_w);
        let radial = (0..references.len()).flat_map(|_| per_image.iter().copied()).collect();
        let cls: Vec<&[f32]> = references.iter().map(|r| r.cls.as_slice()).collect();
        Ok(MemoryBank {
            layer_ids: layer_ids.to_vec(),
            grid_h: first.grid_h,
            grid_w: first.grid_w,
            shots: references.len(),
            rows,
            unit,
            radial,
            cls_mean: mean_vectors(&cls),
        })
    }

    pub fn entries(&self) -> usize {
        self.radial.len()
    }

    pub fn layer_index(&self, id: u32) -> Result<usize> {
        self.layer_ids
            .iter()
            .position(|&l| l == id)
            .ok_or_else(|| Error::shape(format!("layer {id} not in memory bank")))
    }

    /// `S(i, j) = cos(q_i, B_j) − γ·|r_q(i) − r_ref(j)|`, row-major `[N, K·N]`.
    pub fn penalized_similarity(&self, layer: usize, query: &Tensor, gamma: f64) -> Result<Vec<f64>> {
        let bank = &self.rows[layer];
        if query.cols() != bank.cols() || query.rows() != self.grid_h * self.grid_w {
            return Err(Error::shape(format!(
                "query grid {:?} vs bank {}x{}x{}",
                query.shape(),
                self.grid_h,
                self.grid_w,
                bank.cols()
            )));
        }
        let d = bank.cols();
        let m = self.entries();
        let q_unit = unit_rows(query)?;
        let r_q = radial_distances(self.grid_h, self.grid_w);
        let bank_unit = &self.unit[layer];
        let mut out = vec![0.0; query.rows() * m];
        out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            let q = &q_unit[i * d..(i + 1) * d];
            for (j, s) in row.iter_mut().enumerate() {
                let b = &bank_unit[j * d..(j + 1) * d];
                let cos = dot4(q, b);
                *s = cos.clamp(-1.0, 1.0) - gamma * (r_q[i] - self.radial[j]).abs();
            }
        });
        Ok(out)
    }

    /// Row-wise sparsemax weights of `S` and the aggregated reference grid
    /// `F_ref = W·B` over raw bank rows.
    pub fn retrieve(&self, layer: usize, similarity: &[f64]) -> Result<(Vec<f64>, Tensor)> {
        let bank = &self.rows[layer];
        let (m, d) = (self.entries(), bank.cols());
        if similarity.len() % m != 0 {
            return Err(Error::shape("similarity matrix width differs from the bank size"));
        }
        let n = similarity.len() / m;
        let mut weights = vec![0.0; similarity.len()];
        let mut aligned = vec![0.0f32; n * d];
        weights
            .par_chunks_mut(m)
            .zip(aligned.par_chunks_mut(d))
            .enumerate()
            .for_each(|(i, (w, out))| {
                w.copy_from_slice(&sparsemax(&similarity[i * m..(i + 1) * m]));
                let mut acc = vec![0.0f64; d];
                for (j, &wj) in w.iter().enumerate() {
                    if wj > 0.0 {
                        for (a, &b) in acc.iter_mut().zip(bank.row(j)) {
                            *a += wj * b as f64;
                        }
                    }
                }
                for (o, a) in out.iter_mut().zip(acc) {
                    *o = a as f32;
                }
            });
        Ok((weights, Tensor::new(vec![n, d], aligned)?))
    }

    pub fn aligned_reference(&self, layer: usize, query: &Tensor, gamma: f64) -> Result<Tensor> {
        let s = self.penalized_similarity(layer, query, gamma)?;
        Ok(self.retrieve(layer, &s)?.1)
    }
}

fn mean_vectors(vs: &[&[f32]]) -> Vec<f32> {
    let d = vs[0].len();
    let mut acc = vec![0.0f64; d];
    for v in vs {
        for (a, &x) in acc.iter_mut().zip(v.iter()) {
            *a += x as f64;
        }
    }
    acc.iter().map(|&a| (a / vs.len() as f64) as f32).collect()
}

/// `R_v(i) = q̂_i − ref̂_i` with the per-row magnitudes.
pub fn visual_residual(query: &Tensor, reference: &Tensor) -> Result<(Tensor, Vec<f32>)> {
    if query.shape() != reference.shape() || query.rank() != 2 {
        return Err(Error::shape(format!("query {:?} vs reference {:?}", query.shape(), reference.shape())));
    }
    let q = unit_rows(query)?;
    let r = unit_rows(reference)?;
    let d = query.cols();
    let diff: Vec<f64> = q.iter().zip(&r).map(|(a, b)| a - b).collect();
    let norms = diff
        .chunks(d)
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt() as f32)
        .collect();
    Ok((Tensor::from_f64(query.shape().to_vec(), &diff)?, norms))
}

/// `R_cls = f_q − mean_k f_k` over raw CLS vectors.
pub fn global_visual_residual(query_cls: &[f32], reference_cls: &[&[f32]]) -> Result<Vec<f32>> {
    if reference_cls.is_empty() {
        return Err(Error::shape("global residual needs at least one reference"));
    }
    if reference_cls.iter().any(|r| r.len() != query_cls.len()) {
        return Err(Error::shape("CLS widths differ"));
    }
    Ok(residual_from_mean(query_cls, &mean_vectors(reference_cls)))
}

fn residual_from_mean(query_cls: &[f32], mean: &[f32]) -> Vec<f32> {
    query_cls.iter().zip(mean).map(|(q, m)| q - m).collect()
}

/// Raw residuals of one query against one memory bank.
#[derive(Clone, Debug)]
pub struct ResidualBundle {
    pub text: Vec<f32>,
    pub layer_ids: Vec<u32>,
    /// `[N, D]` local residual per layer, `layer_ids` order.
    pub local: Vec<Tensor>,
    pub local_norms: Vec<Vec<f32>>,
    pub cls: Vec<f32>,
    pub cls_norm: f32,
}

impl ResidualBundle {
    pub fn compute(query: &FeatureArchive, bank: &MemoryBank, text: &[f32], gamma: f64) -> Result<Self> {
        if text.len() != query.dim {
            return Err(Error::shape(format!("text residual width {} vs D = {}", text.len(), query.dim)));
        }
        let mut local = Vec::with_capacity(bank.layer_ids.len());
        let mut local_norms = Vec::with_capacity(bank.layer_ids.len());
        for (li, &id) in bank.layer_ids.iter().enumerate() {
            let q = query.layer_or_err(id)?;
            let aligned = bank.aligned_reference(li, q, gamma)?;
            let (r, n) = visual_residual(q, &aligned)?;
            local.push(r);
            local_norms.push(n);
        }
        if bank.cls_mean.len() != query.cls.len() {
            return Err(Error::shape("CLS widths differ"));
        }
        let cls = residual_from_mean(&query.cls, &bank.cls_mean);
        Ok(ResidualBundle {
            text: text.to_vec(),
            layer_ids: bank.layer_ids.clone(),
            cls_norm: norm(&cls) as f32,
            cls,
            local,
            local_norms,
        })
    }

    pub fn layer_index(&self, id: u32) -> Result<usize> {
        self.layer_ids
            .iter()
            .position(|&l| l == id)
            .ok_or_else(|| Error::shape(format!("layer {id} not in residual bundle")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featureio::archive::tests::random_archive;
    use crate::numerics::cosine_sim;

    #[test]
    fn equal_anchors_give_zero_text_residual() {
        assert!(text_residual(&[1.0, 2.0], &[2.0, 4.0]).unwrap().iter().all(|&v| v.abs() < 1e-7));
    }

    #[test]
    fn orthogonal_anchors_give_sqrt2() {
        let r = text_residual(&[3.0, 0.0], &[0.0, 0.5]).unwrap();
        assert!((norm(&r) - 2f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn radial_center_and_corners() {
        let r = radial_distances(5, 5);
        assert_eq!(r[12], 0.0);
        for corner in [0, 4, 20, 24] {
            assert!((r[corner] - 1.0).abs() < 1e-15);
        }
        assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(radial_distances(1, 1), vec![0.0]);
        let r = radial_distances(4, 6);
        assert!((r[0] - 1.0).abs() < 1e-15 && (r[23] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_shot_bank_rows_follow_the_archive() {
        let a = random_archive(1, 8, &[6, 24], 3, 3);
        let bank = MemoryBank::build(&[&a], &[24, 6]).unwrap();
        assert!(bank.rows[0].bitwise_eq(a.layer(24).unwrap()));
        assert!(bank.rows[1].bitwise_eq(a.layer(6).unwrap()));
        assert_eq!(bank.entries(), 9);
    }

    #[test]
    fn two_shot_bank_concatenates_in_reference_order() {
        let a = random_archive(1, 4, &[1], 2, 2);
        let b = random_archive(2, 4, &[1], 2, 2);
        let bank = MemoryBank::build(&[&a, &b], &[1]).unwrap();
        assert_eq!(bank.rows[0].row(4), b.layers[0].row(0));
        assert_eq!(bank.radial.len(), 8);
        assert_eq!(bank.radial[..4], bank.radial[4..]);
    }

    #[test]
    fn incompatible_references_are_rejected() {
        let a = random_archive(1, 4, &[1], 2, 2);
        let b = random_archive(2, 4, &[1], 3, 2);
        assert!(matches!(MemoryBank::build(&[&a, &b], &[1]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn penalty_formula() {
        // corner patch query identical to a center patch reference: |Δr| = 1
        let mut a = random_archive(3, 4, &[1], 3, 3);
        let center = a.layers[0].row(4).to_vec();
        a.layers[0].row_mut(0).copy_from_slice(&center);
        let bank = MemoryBank::build(&[&a], &[1]).unwrap();
        let s = bank.penalized_similarity(0, &a.layers[0], 0.01).unwrap();
        assert!((s[4] - 0.99).abs() < 1e-12, "{}", s[4]);
        assert!((s[4 * 9 + 4] - 1.0).abs() < 1e-12);
        let plain = bank.penalized_similarity(0, &a.layers[0], 0.0).unwrap();
        let q = a.layers[0].row(2);
        let b = a.layers[0].row(7);
        assert!((plain[2 * 9 + 7] - cosine_sim(q, b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn dominant_entry_is_copied_and_ties_average() {
        let bank_arch = random_archive(4, 4, &[1], 1, 3);
        let bank = MemoryBank::build(&[&bank_arch], &[1]).unwrap();
        let (w, f) = bank.retrieve(0, &[0.0, 1.5, 0.2, 0.3, 0.3, 0.3]).unwrap();
        assert_eq!(&w[..3], &[0.0, 1.0, 0.0]);
        assert_eq!(f.row(0), bank_arch.layers[0].row(1));
        for c in 0..4 {
            let mean = (0..3).map(|r| bank_arch.layers[0].at2(r, c) as f64).sum::<f64>() / 3.0;
            assert!((f.at2(1, c) as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn visual_residual_cases() {
        let q = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let r = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, -1.0]).unwrap();
        let (res, norms) = visual_residual(&q, &r).unwrap();
        assert_eq!(res.row(0), &[0.0, 0.0]);
        assert_eq!(norms, vec![0.0, 2.0]);
    }

    #[test]
    fn global_residual_uses_raw_vectors() {
        let r = global_visual_residual(&[2.0, 4.0], &[&[1.0, 1.0], &[3.0, 3.0]]).unwrap();
        assert_eq!(r, vec![0.0, 2.0]);
        assert_eq!(global_visual_residual(&[1.0, 1.0], &[&[1.0, 1.0]]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn self_bank_gives_zero_residual_when_others_are_far() {
        // orthogonal patch features: the self-similarity gap is 1
        let d = 4;
        let mut a = random_archive(5, d, &[1], 2, 2);
        let mut data = vec![0.0f32; 4 * d];
        for i in 0..4 {
            data[i * d + i] = 1.0 + i as f32;
        }
        a.layers[0] = Tensor::new(vec![4, d], data).unwrap();
        let bank = MemoryBank::build(&[&a], &[1]).unwrap();
        let b = ResidualBundle::compute(&a, &bank, &[1.0, 0.0, 0.0, 0.0], 0.0).unwrap();
        assert!(b.local_norms[0].iter().all(|&n| n < 1e-6));
        assert!(b.cls.iter().all(|&v| v == 0.0));
    }
}
