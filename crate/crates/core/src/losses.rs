//! Training objectives, built as tape expressions over adapted residuals.

use crate::error::{Error, Result};
use crate::featureio::{FeatureArchive, MaskImage};
use crate::numerics::{Tape, Tensor, Var};
use crate::residuals::ResidualBundle;
use crate::scoring::{AdaptedVars, BranchConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchLabel {
    Normal,
    Anomalous,
    Ignore,
}

/// Image label plus grid-resolution patch labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionTarget {
    pub label: u8,
    pub patches: Vec<PatchLabel>,
    pub n0: usize,
    pub n1: usize,
}

impl SupervisionTarget {
    pub fn from_labels(label: u8, patches: Vec<PatchLabel>) -> Self {
        let n0 = patches.iter().filter(|&&p| p == PatchLabel::Normal).count();
        let n1 = patches.iter().filter(|&&p| p == PatchLabel::Anomalous).count();
        SupervisionTarget { label, patches, n0, n1 }
    }

    /// A normal image: every patch is normal.
    pub fn normal(patches: usize) -> Self {
        Self::from_labels(0, vec![PatchLabel::Normal; patches])
    }

    pub fn from_mask(label: u8, mask: &MaskImage, grid_h: usize, grid_w: usize) -> Result<Self> {
        Ok(Self::from_labels(label, downsample_mask(mask, grid_h, grid_w)?))
    }

    /// `1/N₀` on normal patches, zero elsewhere; all zero when `N₀ = 0`.
    fn normal_weights(&self) -> Vec<f64> {
        self.weights(PatchLabel::Normal, self.n0)
    }

    fn anomalous_weights(&self) -> Vec<f64> {
        self.weights(PatchLabel::Anomalous, self.n1)
    }

    fn weights(&self, which: PatchLabel, count: usize) -> Vec<f64> {
        self.patches
            .iter()
            .map(|&p| if p == which && count > 0 { 1.0 / count as f64 } else { 0.0 })
            .collect()
    }
}

/// Mean mask coverage per grid cell: above one half is anomalous, exactly
/// zero is normal, anything between is ignored.
pub fn downsample_mask(mask: &MaskImage, grid_h: usize, grid_w: usize) -> Result<Vec<PatchLabel>> {
    if grid_h == 0 || grid_w == 0 || mask.height < grid_h || mask.width < grid_w {
        return Err(Error::shape(format!(
            "mask {}x{} for a {grid_h}x{grid_w} grid",
            mask.height, mask.width
        )));
    }
    let mut out = Vec::with_capacity(grid_h * grid_w);
    for gy in 0..grid_h {
        let (y0, y1) = (gy * mask.height / grid_h, (gy + 1) * mask.height / grid_h);
        for gx in 0..grid_w {
            let (x0, x1) = (gx * mask.width / grid_w, (gx + 1) * mask.width / grid_w);
            let mut hits = 0usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    hits += mask.get(y, x) as usize;
                }
            }
            let total = (y1 - y0) * (x1 - x0);
            out.push(if hits == 0 {
                PatchLabel::Normal
            } else if 2 * hits > total {
                PatchLabel::Anomalous
            } else {
                PatchLabel::Ignore
            });
        }
    }
    Ok(out)
}

/// `Σ wᵢ·relu(xᵢ)` over a `[N]` vector, or `None` when every weight is 0.
fn masked_hinge(tape: &mut Tape, x: Var, weights: Vec<f64>) -> Result<Option<Var>> {
    if weights.iter().all(|&w| w == 0.0) {
        return Ok(None);
    }
    let r = tape.relu(x);
    Ok(Some(tape.weighted_sum(r, weights)?))
}

fn sum_terms(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    if terms.is_empty() {
        return tape.constant_f64(vec![1], vec![0.0]);
    }
    tape.sum_of(&terms)
}

/// Image-level two-sided hinge: normal pushes `x` below 0, anomalous pushes
/// it up to `target`.
fn global_hinge(tape: &mut Tape, x: Var, label: u8, target: f64) -> Var {
    if label == 0 {
        tape.relu(x)
    } else {
        let gap = tape.rsub(target, x);
        tape.relu(gap)
    }
}

/// `1 − cos(a, b)` for two `[1, D]` vectors.
fn cosine_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let ua = tape.normalize(a)?;
    let ub = tape.normalize(b)?;
    let c = tape.row_dot(ua, ub)?;
    Ok(tape.rsub(1.0, c))
}

/// Text-branch objective: global and per-layer cosine hinges against the
/// adapted text residual plus the drift regularizer.
pub fn loss_text(
    tape: &mut Tape,
    query: &FeatureArchive,
    layers: &[u32],
    adapted: Var,
    raw: Var,
    target: &SupervisionTarget,
) -> Result<Var> {
    let unit = tape.normalize(adapted)?;
    let cls = tape.constant(&Tensor::new(vec![1, query.dim], query.cls.clone())?);
    let cls = tape.normalize(cls)?;
    let c = tape.row_dot(cls, unit)?;
    let mut terms = vec![global_hinge(tape, c, target.label, 1.0)];

    for &l in layers {
        let f = tape.constant(query.layer_or_err(l)?);
        let f = tape.normalize(f)?;
        let cos = tape.row_dot(f, unit)?;
        if let Some(t) = masked_hinge(tape, cos, target.normal_weights())? {
            terms.push(t);
        }
        let gap = tape.rsub(1.0, cos);
        if let Some(t) = masked_hinge(tape, gap, target.anomalous_weights())? {
            terms.push(t);
        }
    }
    terms.push(cosine_distance(tape, adapted, raw)?);
    sum_terms(tape, terms)
}

/// Visual-branch objective: normal magnitudes toward zero, anomalous
/// magnitudes toward the raw residual magnitudes.
pub fn loss_vis(tape: &mut Tape, adapted: &[Var], raw_norms: &[&[f32]], target: &SupervisionTarget) -> Result<Var> {
    if adapted.len() != raw_norms.len() {
        return Err(Error::shape("one raw magnitude list per adapted layer"));
    }
    let mut terms = Vec::new();
    for (&r, raw) in adapted.iter().zip(raw_norms) {
        let mag = tape.row_norm(r);
        let w0 = target.normal_weights();
        if w0.iter().any(|&w| w != 0.0) {
            terms.push(tape.weighted_sum(mag, w0)?);
        }
        let w1 = target.anomalous_weights();
        if w1.iter().any(|&w| w != 0.0) {
            let raw = tape.constant(&Tensor::vector(raw.to_vec()));
            let diff = tape.sub(mag, raw)?;
            let diff = tape.abs(diff);
            terms.push(tape.weighted_sum(diff, w1)?);
        }
    }
    sum_terms(tape, terms)
}

/// Which residual-branch modality receives gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateSide {
    Text,
    Visual,
}

/// Residual-branch objective with the other modality gradient-stopped.
/// `res_visual` follows `layers`.
pub fn loss_res(
    tape: &mut Tape,
    res_text: Var,
    res_visual: &[Var],
    res_cls: Var,
    bundle: &ResidualBundle,
    layers: &[u32],
    target: &SupervisionTarget,
    side: UpdateSide,
) -> Result<Var> {
    if res_visual.len() != layers.len() {
        return Err(Error::shape("one residual-branch grid per layer"));
    }
    let unit = tape.normalize(res_text)?;
    let (unit, visual, cls) = match side {
        UpdateSide::Text => {
            let v: Vec<Var> = res_visual.iter().map(|&v| tape.detach(v)).collect();
            (unit, v, tape.detach(res_cls))
        }
        UpdateSide::Visual => (tape.detach(unit), res_visual.to_vec(), res_cls),
    };

    let p_cls = tape.row_dot(cls, unit)?;
    let mut terms = vec![global_hinge(tape, p_cls, target.label, bundle.cls_norm as f64)];
    let mut raw_norms = Vec::with_capacity(layers.len());
    for (&v, &l) in visual.iter().zip(layers) {
        let raw = tape.constant(&Tensor::vector(bundle.local_norms[bundle.layer_index(l)?].clone()));
        raw_norms.push(raw);
        let p = tape.row_dot(v, unit)?;
        if let Some(t) = masked_hinge(tape, p, target.normal_weights())? {
            terms.push(t);
        }
        let gap = tape.sub(raw, p)?;
        if let Some(t) = masked_hinge(tape, gap, target.anomalous_weights())? {
            terms.push(t);
        }
    }

    match side {
        UpdateSide::Text => {
            let raw_t = tape.constant(&Tensor::new(vec![1, bundle.text.len()], bundle.text.clone())?);
            terms.push(cosine_distance(tape, res_text, raw_t)?);
        }
        UpdateSide::Visual => {
            let mag = tape.row_norm(cls);
            let d = tape.offset(mag, -(bundle.cls_norm as f64));
            terms.push(tape.abs(d));
            for (&v, &raw) in visual.iter().zip(&raw_norms) {
                let mag = tape.row_norm(v);
                let d = tape.sub(mag, raw)?;
                let d = tape.abs(d);
                terms.push(tape.mean(d)?);
            }
        }
    }
    sum_terms(tape, terms)
}

/// Per-sample loss components as tape scalars.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub text: Var,
    pub vis: Var,
    pub res: Var,
    pub total: Var,
}

/// `ℒ_text + ℒ_vis + ℒ_res` for one sample.
pub fn loss_total(
    tape: &mut Tape,
    query: &FeatureArchive,
    bundle: &ResidualBundle,
    adapted: &AdaptedVars,
    cfg: &BranchConfig,
    target: &SupervisionTarget,
    side: UpdateSide,
) -> Result<LossParts> {
    let d = bundle.text.len();
    let raw_t = tape.constant(&Tensor::new(vec![1, d], bundle.text.clone())?);
    let text = loss_text(tape, query, &cfg.visual_layers, adapted.text, raw_t, target)?;
    let norms = cfg
        .visual_layers
        .iter()
        .map(|&l| Ok(bundle.local_norms[bundle.layer_index(l)?].as_slice()))
        .collect::<Result<Vec<_>>>()?;
    let vis = loss_vis(tape, &adapted.visual, &norms, target)?;
    let res = loss_res(
        tape,
        adapted.res_text,
        &adapted.res_visual,
        adapted.res_cls,
        bundle,
        &cfg.residual_layers,
        target,
        side,
    )?;
    let total = tape.sum_of(&[text, vis, res])?;
    Ok(LossParts { text, vis, res, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Precision;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> MaskImage {
        let mut m = MaskImage::zeros(h, w);
        for &(y, x) in on {
            m.data[y * w + x] = 1;
        }
        m
    }

    #[test]
    fn mask_downsampling_rules() {
        assert!(downsample_mask(&MaskImage::zeros(4, 4), 2, 2).unwrap().iter().all(|&p| p == PatchLabel::Normal));
        let full = MaskImage::new(4, 4, vec![1; 16]).unwrap();
        assert!(downsample_mask(&full, 2, 2).unwrap().iter().all(|&p| p == PatchLabel::Anomalous));
        // top-left cell half covered, top-right three quarters, bottom-left one pixel
        let m = mask(4, 4, &[(0, 0), (1, 0), (0, 2), (0, 3), (1, 2), (3, 1)]);
        let l = downsample_mask(&m, 2, 2).unwrap();
        assert_eq!(l, vec![PatchLabel::Ignore, PatchLabel::Anomalous, PatchLabel::Ignore, PatchLabel::Normal]);
        let t = SupervisionTarget::from_labels(1, l);
        assert_eq!((t.n0, t.n1), (1, 1));
    }

    fn archive_2x1(cls: [f32; 2], patches: [[f32; 2]; 2]) -> FeatureArchive {
        FeatureArchive {
            dim: 2,
            layer_ids: vec![1],
            grid_h: 1,
            grid_w: 2,
            image_h: 1,
            image_w: 2,
            cls: cls.to_vec(),
            layers: vec![Tensor::new(vec![2, 2], patches.concat()).unwrap()],
        }
    }

    #[test]
    fn normal_image_with_negative_cosines_has_zero_text_loss() {
        let q = archive_2x1([-1.0, 0.0], [[-1.0, 0.2], [0.0, 1.0]]);
        let mut t = Tape::new(Precision::F64);
        let r = t.constant_f64(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let l = loss_text(&mut t, &q, &[1], r, r, &SupervisionTarget::normal(2)).unwrap();
        assert!(t.scalar(l).abs() < 1e-15);
    }

    #[test]
    fn text_loss_hand_case() {
        let q = archive_2x1([1.0, 1.0], [[1.0, 0.0], [0.0, 1.0]]);
        let target = SupervisionTarget::from_labels(1, vec![PatchLabel::Normal, PatchLabel::Anomalous]);
        let mut t = Tape::new(Precision::F64);
        let adapted = t.constant_f64(vec![1, 2], vec![0.6, 0.8]).unwrap();
        let raw = t.constant_f64(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let l = loss_text(&mut t, &q, &[1], adapted, raw, &target).unwrap();
        let cls_cos = (0.6 + 0.8) / 2f64.sqrt();
        let expect = (1.0 - cls_cos).max(0.0) + 0.6 + (1.0 - 0.8) + (1.0 - 0.6);
        assert!((t.scalar(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn anomalous_patch_aligned_with_text_has_zero_local_term() {
        let q = archive_2x1([0.0, 1.0], [[0.0, 1.0], [0.0, 2.0]]);
        let target = SupervisionTarget::from_labels(1, vec![PatchLabel::Anomalous; 2]);
        let mut t = Tape::new(Precision::F64);
        let r = t.constant_f64(vec![1, 2], vec![0.0, 3.0]).unwrap();
        let l = loss_text(&mut t, &q, &[1], r, r, &target).unwrap();
        assert!(t.scalar(l).abs() < 1e-15);
    }

    #[test]
    fn vis_loss_hand_case_and_identity() {
        let target = SupervisionTarget::from_labels(1, vec![PatchLabel::Normal, PatchLabel::Anomalous, PatchLabel::Ignore]);
        let mut t = Tape::new(Precision::F64);
        let r = t.constant_f64(vec![3, 2], vec![3.0, 4.0, 0.0, 2.0, 9.0, 9.0]).unwrap();
        let l = loss_vis(&mut t, &[r], &[&[5.0, 0.5, 1.0]], &target).unwrap();
        assert!((t.scalar(l) - (5.0 + 1.5)).abs() < 1e-12);
        // identity adapters: anomalous term vanishes, normal zero rows add nothing
        let r = t.constant_f64(vec![3, 2], vec![0.0, 0.0, 0.0, 2.0, 9.0, 9.0]).unwrap();
        let l = loss_vis(&mut t, &[r], &[&[0.0, 2.0, 1.0]], &target).unwrap();
        assert_eq!(t.scalar(l), 0.0);
    }

    fn bundle() -> ResidualBundle {
        ResidualBundle {
            text: vec![1.0, 0.0],
            layer_ids: vec![1],
            local: vec![Tensor::new(vec![2, 2], vec![-0.5, 0.0, 0.3, 0.4]).unwrap()],
            local_norms: vec![vec![0.5, 0.5]],
            cls: vec![2.0, 0.0],
            cls_norm: 2.0,
        }
    }

    #[test]
    fn res_loss_hand_case_with_both_regularizers() {
        let b = bundle();
        let target = SupervisionTarget::from_labels(1, vec![PatchLabel::Normal, PatchLabel::Anomalous]);
        for side in [UpdateSide::Text, UpdateSide::Visual] {
            let mut t = Tape::new(Precision::F64);
            let rt = t.constant_f64(vec![1, 2], b.text.iter().map(|&v| v as f64).collect()).unwrap();
            let rv = t.constant(&b.local[0]);
            let rc = t.constant_f64(vec![1, 2], b.cls.iter().map(|&v| v as f64).collect()).unwrap();
            let l = loss_res(&mut t, rt, &[rv], rc, &b, &[1], &target, side).unwrap();
            // P_cls = 2 meets target 2; normal P = −0.5 → 0; anomalous P = 0.3 → 0.5 − 0.3 (f32 inputs);
            // regularizers vanish for identity adapters
            assert!((t.scalar(l) - 0.2).abs() < 1e-6, "{side:?}: {}", t.scalar(l));
        }
    }

    #[test]
    fn empty_sets_contribute_nothing() {
        let t0 = SupervisionTarget::from_labels(0, vec![PatchLabel::Ignore; 2]);
        let mut t = Tape::new(Precision::F64);
        let r = t.constant_f64(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let l = loss_vis(&mut t, &[r], &[&[0.0, 0.0]], &t0).unwrap();
        assert_eq!(t.scalar(l), 0.0);
    }
}
