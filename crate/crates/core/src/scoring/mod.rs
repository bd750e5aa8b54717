//! Text, visual and residual branch maps, their fusion, and the per-image
//! scoring pipeline.

pub mod identities;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterBank, BoundAdapters, Slot};
use crate::error::{Error, Result};
use crate::featureio::{FeatureArchive, TextAnchorSet};
use crate::numerics::ops::NORM_EPS;
use crate::numerics::{bilinear_upsample, gaussian_blur, top_fraction_mean, Precision, Tape, Tensor, Var};
use crate::residuals::{build_text_residual, MemoryBank, ResidualBundle, DEFAULT_GAMMA};

pub const TOP_FRACTION: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Identity,
    Learned,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Mode::Identity),
            "learned" => Ok(Mode::Learned),
            _ => Err(Error::ConfigInvalid(format!("unknown mode {s:?}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Identity => "identity",
            Mode::Learned => "learned",
        })
    }
}

/// Branch weights in (text, visual, residual) order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub pixel: [f64; 3],
    pub image: [f64; 3],
}

impl FusionWeights {
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Identity => FusionWeights {
                pixel: [0.1, 1.0, 1.0],
                image: [1.0, 1.0, 1.0],
            },
            Mode::Learned => FusionWeights {
                pixel: [0.1, 1.0, 0.1],
                image: [1.0, 1.0, 0.1],
            },
        }
    }

    /// Parses `pixel=a,b,c image=d,e,f`; either part may be omitted, in
    /// which case it keeps the value from `base`.
    pub fn parse(spec: &str, base: FusionWeights) -> Result<Self> {
        let bad = |m: String| Error::ConfigInvalid(format!("weights {spec:?}: {m}"));
        let mut out = base;
        for part in spec.split_whitespace() {
            let (key, vals) = part.split_once('=').ok_or_else(|| bad(format!("{part:?} lacks '='")))?;
            let nums = vals
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| bad(format!("{v:?} is not a number"))))
                .collect::<Result<Vec<_>>>()?;
            let arr: [f64; 3] = nums.try_into().map_err(|_| bad("expected three values".into()))?;
            if arr.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(bad("weights must be finite and non-negative".into()));
            }
            match key {
                "pixel" => out.pixel = arr,
                "image" => out.image = arr,
                _ => return Err(bad(format!("unknown key {key:?}"))),
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub text_layers: Vec<u32>,
    pub visual_layers: Vec<u32>,
    pub residual_layers: Vec<u32>,
    pub weights: FusionWeights,
    pub gamma: f64,
    pub top_fraction: f64,
}

impl BranchConfig {
    /// Text uses the deepest tapped layer, the visual branch all layers, and
    /// the residual branch all layers when learned, the deepest otherwise.
    pub fn for_mode(mode: Mode, layer_ids: &[u32]) -> Result<Self> {
        let &last = layer_ids
            .iter()
            .max()
            .ok_or_else(|| Error::ConfigInvalid("no tapped layers".into()))?;
        Ok(BranchConfig {
            text_layers: vec![last],
            visual_layers: layer_ids.to_vec(),
            residual_layers: match mode {
                Mode::Identity => vec![last],
                Mode::Learned => layer_ids.to_vec(),
            },
            weights: FusionWeights::for_mode(mode),
            gamma: DEFAULT_GAMMA,
            top_fraction: TOP_FRACTION,
        })
    }

    /// Layers the memory bank must hold.
    pub fn bank_layers(&self) -> Vec<u32> {
        let mut out = self.visual_layers.clone();
        for &l in &self.residual_layers {
            if !out.contains(&l) {
                out.push(l);
            }
        }
        out
    }

    pub fn validate(&self, available: &[u32]) -> Result<()> {
        for (name, ls) in [
            ("text", &self.text_layers),
            ("visual", &self.visual_layers),
            ("residual", &self.residual_layers),
        ] {
            if ls.is_empty() {
                return Err(Error::ConfigInvalid(format!("{name} branch has no layers")));
            }
            if let Some(l) = ls.iter().find(|l| !available.contains(l)) {
                return Err(Error::ConfigInvalid(format!("{name} branch layer {l} not in archives {available:?}")));
            }
        }
        let w = self.weights.pixel.iter().chain(&self.weights.image);
        if w.clone().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::ConfigInvalid("fusion weights must be non-negative".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::ConfigInvalid(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::ConfigInvalid(format!("top fraction {} not in (0, 1]", self.top_fraction)));
        }
        Ok(())
    }
}

/// Adapted residuals as tape handles: vectors are `[1, D]`, grids `[N, D]`.
/// `visual` follows `visual_layers`, `res_visual` follows `residual_layers`.
#[derive(Clone, Debug)]
pub struct AdaptedVars {
    pub text: Var,
    pub res_text: Var,
    pub visual: Vec<Var>,
    pub res_visual: Vec<Var>,
    pub res_cls: Var,
}

/// Pushes raw residuals through the adapters (or passes them through when
/// `adapters` is `None`).
pub fn adapt_residuals(
    tape: &mut Tape,
    adapters: Option<&BoundAdapters>,
    bundle: &ResidualBundle,
    cfg: &BranchConfig,
    grid: (usize, usize),
) -> Result<AdaptedVars> {
    let d = bundle.text.len();
    let rt = tape.constant(&Tensor::new(vec![1, d], bundle.text.clone())?);
    let rcls = tape.constant(&Tensor::new(vec![1, d], bundle.cls.clone())?);
    let apply = |tape: &mut Tape, slot: Slot, x: Var| -> Result<Var> {
        match adapters {
            Some(b) => b.forward(tape, slot, x, grid),
            None => Ok(x),
        }
    };
    let text = apply(tape, Slot::Text, rt)?;
    let res_text = apply(tape, Slot::ResText, rt)?;
    let res_cls = apply(tape, Slot::ResCls, rcls)?;
    let mut visual = Vec::with_capacity(cfg.visual_layers.len());
    for &l in &cfg.visual_layers {
        let x = tape.constant(&bundle.local[bundle.layer_index(l)?]);
        visual.push(apply(tape, Slot::Visual(l), x)?);
    }
    let mut res_visual = Vec::with_capacity(cfg.residual_layers.len());
    for &l in &cfg.residual_layers {
        let x = tape.constant(&bundle.local[bundle.layer_index(l)?]);
        res_visual.push(apply(tape, Slot::ResVisual(l), x)?);
    }
    Ok(AdaptedVars {
        text,
        res_text,
        visual,
        res_visual,
        res_cls,
    })
}

fn unit64(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= NORM_EPS {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn cos_with_unit(row: &[f32], unit: &[f64]) -> Result<f64> {
    let n = crate::numerics::norm(row);
    if n <= NORM_EPS {
        return Err(Error::ZeroNorm);
    }
    let d: f64 = row.iter().zip(unit).map(|(&a, b)| a as f64 * b).sum();
    Ok((d / n).clamp(-1.0, 1.0))
}

/// Layer-mean cosine between each query patch and the adapted text
/// residual, plus the CLS cosine.
pub fn text_branch_grid(query: &FeatureArchive, layers: &[u32], text: &[f64]) -> Result<(Vec<f64>, f64)> {
    let u = unit64(text)?;
    let n = query.num_patches();
    let mut grid = vec![0.0; n];
    for &l in layers {
        let f = query.layer_or_err(l)?;
        for (i, g) in grid.iter_mut().enumerate() {
            *g += cos_with_unit(f.row(i), &u)?;
        }
    }
    grid.iter_mut().for_each(|g| *g /= layers.len() as f64);
    Ok((grid, cos_with_unit(&query.cls, &u)?))
}

/// Layer-mean squared norm of the adapted local residuals.
pub fn visual_branch_grid(locals: &[&[f64]], dim: usize) -> Vec<f64> {
    let n = locals[0].len() / dim;
    let mut grid = vec![0.0; n];
    for r in locals {
        for (g, row) in grid.iter_mut().zip(r.chunks(dim)) {
            *g += row.iter().map(|v| v * v).sum::<f64>();
        }
    }
    grid.iter_mut().for_each(|g| *g /= locals.len() as f64);
    grid
}

/// Layer-mean projection of the adapted residual-branch visual residuals
/// onto the unit adapted text residual, plus the global projection.
pub fn residual_branch_grid(locals: &[&[f64]], cls: &[f64], text: &[f64]) -> Result<(Vec<f64>, f64)> {
    let u = unit64(text)?;
    let dim = u.len();
    let n = locals[0].len() / dim;
    let mut grid = vec![0.0; n];
    for r in locals {
        for (g, row) in grid.iter_mut().zip(r.chunks(dim)) {
            *g += row.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    grid.iter_mut().for_each(|g| *g /= locals.len() as f64);
    Ok((grid, cls.iter().zip(&u).map(|(a, b)| a * b).sum()))
}

/// Grid-resolution branch outputs before upsampling.
#[derive(Clone, Debug)]
pub struct BranchGrids {
    pub grid_h: usize,
    pub grid_w: usize,
    pub text: Vec<f64>,
    pub visual: Vec<f64>,
    pub residual: Vec<f64>,
    pub text_cls: f64,
    pub residual_cls: f64,
}

#[derive(Clone, Debug)]
pub struct AnomalyOutput {
    pub m_text: Tensor,
    pub m_vis: Tensor,
    pub m_res: Tensor,
    pub m: Tensor,
    pub s_text: f64,
    pub s_vis: f64,
    pub s_res: f64,
    pub s: f64,
}

/// Upsampled, smoothed `H×W` map of a grid.
pub fn postprocess(grid: &[f64], grid_h: usize, grid_w: usize, image_h: usize, image_w: usize) -> Result<Tensor> {
    let g = Tensor::from_f64(vec![grid_h, grid_w], grid)?;
    gaussian_blur(&bilinear_upsample(&g, image_h, image_w)?)
}

/// Weighted sum of equally-shaped maps.
pub fn weighted_map(maps: [&Tensor; 3], weights: [f64; 3]) -> Result<Tensor> {
    let shape = maps[0].shape().to_vec();
    if maps.iter().any(|m| m.shape() != shape) {
        return Err(Error::shape("branch maps differ in shape"));
    }
    let data: Vec<f64> = (0..maps[0].len())
        .map(|i| maps.iter().zip(weights).map(|(m, w)| w * m.data()[i] as f64).sum())
        .collect();
    Tensor::from_f64(shape, &data)
}

/// Smooths each branch map, derives image scores from the smoothed maps,
/// then fuses maps and scores with the configured weights.
pub fn fuse_and_postprocess(
    grids: &BranchGrids,
    image_h: usize,
    image_w: usize,
    cfg: &BranchConfig,
) -> Result<AnomalyOutput> {
    let (gh, gw) = (grids.grid_h, grids.grid_w);
    let m_text = postprocess(&grids.text, gh, gw, image_h, image_w)?;
    let m_vis = postprocess(&grids.visual, gh, gw, image_h, image_w)?;
    let m_res = postprocess(&grids.residual, gh, gw, image_h, image_w)?;
    let tf = cfg.top_fraction;
    let s_text = 0.5 * grids.text_cls + 0.5 * top_fraction_mean(m_text.data(), tf)?;
    let s_vis = top_fraction_mean(m_vis.data(), tf)?;
    let s_res = 0.5 * grids.residual_cls + 0.5 * top_fraction_mean(m_res.data(), tf)?;
    let m = weighted_map([&m_text, &m_vis, &m_res], cfg.weights.pixel)?;
    let [a, b, c] = cfg.weights.image;
    let s = a * s_text + b * s_vis + c * s_res;
    if !m.is_finite() || !s.is_finite() {
        return Err(Error::shape("non-finite anomaly output"));
    }
    Ok(AnomalyOutput {
        m_text,
        m_vis,
        m_res,
        m,
        s_text,
        s_vis,
        s_res,
        s,
    })
}

/// Scores query archives against memory banks of normal references.
#[derive(Clone, Debug)]
pub struct Scorer {
    pub cfg: BranchConfig,
    pub adapters: AdapterBank,
    text_residual: Vec<f32>,
    dim: usize,
}

impl Scorer {
    pub fn new(anchors: &TextAnchorSet, adapters: AdapterBank, cfg: BranchConfig) -> Result<Self> {
        let dim = anchors.dim();
        if let AdapterBank::Learned(l) = &adapters {
            if l.dim != dim {
                return Err(Error::shape(format!("adapter width {} vs anchor width {dim}", l.dim)));
            }
            cfg.validate(&l.layer_ids)?;
        }
        Ok(Scorer {
            text_residual: build_text_residual(anchors)?,
            cfg,
            adapters,
            dim,
        })
    }

    pub fn text_residual(&self) -> &[f32] {
        &self.text_residual
    }

    pub fn build_bank(&self, references: &[&FeatureArchive]) -> Result<MemoryBank> {
        if let Some(r) = references.first() {
            self.check_archive(r)?;
        }
        MemoryBank::build(references, &self.cfg.bank_layers())
    }

    fn check_archive(&self, a: &FeatureArchive) -> Result<()> {
        if a.dim != self.dim {
            return Err(Error::shape(format!("archive width {} vs anchor width {}", a.dim, self.dim)));
        }
        self.cfg.validate(&a.layer_ids)
    }

    pub fn branch_grids(&self, query: &FeatureArchive, bank: &MemoryBank) -> Result<BranchGrids> {
        self.check_archive(query)?;
        let bundle = ResidualBundle::compute(query, bank, &self.text_residual, self.cfg.gamma)?;
        let mut tape = Tape::inference(Precision::F32);
        let bound = match &self.adapters {
            AdapterBank::Identity => None,
            AdapterBank::Learned(l) => Some(l.bind(&mut tape, |_| false)),
        };
        let grid = (query.grid_h, query.grid_w);
        let a = adapt_residuals(&mut tape, bound.as_ref(), &bundle, &self.cfg, grid)?;

        let (text, text_cls) = text_branch_grid(query, &self.cfg.text_layers, tape.value(a.text))?;
        let vis: Vec<&[f64]> = a.visual.iter().map(|&v| tape.value(v)).collect();
        let visual = visual_branch_grid(&vis, self.dim);
        let res: Vec<&[f64]> = a.res_visual.iter().map(|&v| tape.value(v)).collect();
        let (residual, residual_cls) = residual_branch_grid(&res, tape.value(a.res_cls), tape.value(a.res_text))?;
        Ok(BranchGrids {
            grid_h: query.grid_h,
            grid_w: query.grid_w,
            text,
            visual,
            residual,
            text_cls,
            residual_cls,
        })
    }

    pub fn score(&self, query: &FeatureArchive, bank: &MemoryBank) -> Result<AnomalyOutput> {
        let grids = self.branch_grids(query, bank)?;
        fuse_and_postprocess(&grids, query.image_h, query.image_w, &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::LearnedAdapters;
    use crate::featureio::archive::tests::random_archive;

    fn anchors(dim: usize) -> TextAnchorSet {
        let mut n = vec![0.0f32; dim];
        let mut a = vec![0.0f32; dim];
        n[0] = 1.0;
        a[1] = 1.0;
        TextAnchorSet::new(Tensor::new(vec![1, dim], n).unwrap(), Tensor::new(vec![1, dim], a).unwrap()).unwrap()
    }

    #[test]
    fn mode_defaults() {
        let c = BranchConfig::for_mode(Mode::Identity, &[6, 12, 18, 24]).unwrap();
        assert_eq!(c.text_layers, vec![24]);
        assert_eq!(c.residual_layers, vec![24]);
        assert_eq!(c.weights.pixel, [0.1, 1.0, 1.0]);
        let c = BranchConfig::for_mode(Mode::Learned, &[6, 12, 18, 24]).unwrap();
        assert_eq!(c.residual_layers, vec![6, 12, 18, 24]);
        assert_eq!(c.weights.image, [1.0, 1.0, 0.1]);
    }

    #[test]
    fn weight_parsing() {
        let base = FusionWeights::for_mode(Mode::Identity);
        let w = FusionWeights::parse("pixel=0,1,0 image=1,2,3", base).unwrap();
        assert_eq!(w.pixel, [0.0, 1.0, 0.0]);
        assert_eq!(w.image, [1.0, 2.0, 3.0]);
        assert_eq!(FusionWeights::parse("image=1,1,0", base).unwrap().pixel, base.pixel);
        assert!(FusionWeights::parse("pixel=1,2", base).is_err());
        assert!(FusionWeights::parse("pixel=1,-2,0", base).is_err());
        assert!(FusionWeights::parse("depth=1,1,1", base).is_err());
    }

    #[test]
    fn zero_text_residual_is_an_error() {
        let q = random_archive(1, 4, &[1], 2, 2);
        assert!(matches!(text_branch_grid(&q, &[1], &[0.0; 4]), Err(Error::ZeroNorm)));
        assert!(matches!(residual_branch_grid(&[&[0.0; 16]], &[0.0; 4], &[0.0; 4]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn constant_patches_give_constant_text_map() {
        let mut q = random_archive(2, 4, &[1], 2, 2);
        let row = q.layers[0].row(0).to_vec();
        for i in 1..4 {
            q.layers[0].row_mut(i).copy_from_slice(&row);
        }
        let text = [0.3, -0.1, 0.5, 0.2];
        let (grid, cls) = text_branch_grid(&q, &[1], &text).unwrap();
        assert!(grid.iter().all(|&g| g == grid[0]));
        let cfg = BranchConfig::for_mode(Mode::Identity, &[1]).unwrap();
        let grids = BranchGrids {
            grid_h: 2,
            grid_w: 2,
            text: grid.clone(),
            visual: vec![0.0; 4],
            residual: vec![0.0; 4],
            text_cls: cls,
            residual_cls: 0.0,
        };
        let out = fuse_and_postprocess(&grids, 8, 8, &cfg).unwrap();
        assert!((out.s_text - (0.5 * cls + 0.5 * grid[0])).abs() < 1e-6);
    }

    #[test]
    fn projection_cases() {
        // orthogonal → 0; parallel with magnitude c → c
        let (g, cls) = residual_branch_grid(&[&[0.0, 3.0, 2.0, 0.0]], &[5.0, 1.0], &[2.0, 0.0]).unwrap();
        assert_eq!(g, vec![0.0, 2.0]);
        assert_eq!(cls, 5.0);
    }

    #[test]
    fn visual_grid_of_antipodal_residual_is_four() {
        let g = visual_branch_grid(&[&[2.0, 0.0, 0.0, 0.0]], 2);
        assert_eq!(g, vec![4.0, 0.0]);
    }

    fn grids_with(text: f64, visual: f64, residual: f64) -> BranchGrids {
        BranchGrids {
            grid_h: 2,
            grid_w: 2,
            text: vec![text; 4],
            visual: vec![visual; 4],
            residual: vec![residual; 4],
            text_cls: 0.0,
            residual_cls: 0.0,
        }
    }

    #[test]
    fn identity_weights_on_unit_maps() {
        let cfg = BranchConfig::for_mode(Mode::Identity, &[1]).unwrap();
        let out = fuse_and_postprocess(&grids_with(1.0, 1.0, 1.0), 6, 6, &cfg).unwrap();
        assert!(out.m.data().iter().all(|&v| (v - 2.1).abs() < 1e-6));
    }

    #[test]
    fn visual_only_weights_select_the_visual_map() {
        let mut cfg = BranchConfig::for_mode(Mode::Identity, &[1]).unwrap();
        cfg.weights = FusionWeights {
            pixel: [0.0, 1.0, 0.0],
            image: [0.0, 1.0, 0.0],
        };
        let mut g = grids_with(0.3, 0.0, 0.9);
        g.visual = vec![0.1, 0.5, 0.2, 0.7];
        let out = fuse_and_postprocess(&g, 8, 8, &cfg).unwrap();
        assert!(out.m.bitwise_eq(&out.m_vis));
        assert_eq!(out.s, out.s_vis);
    }

    #[test]
    fn learned_scorer_at_init_matches_identity_scorer() {
        let q = random_archive(3, 8, &[6, 24], 3, 3);
        let r = random_archive(4, 8, &[6, 24], 3, 3);
        let cfg = BranchConfig::for_mode(Mode::Learned, &[6, 24]).unwrap();
        let ident = Scorer::new(&anchors(8), AdapterBank::Identity, cfg.clone()).unwrap();
        let learned = Scorer::new(
            &anchors(8),
            AdapterBank::Learned(LearnedAdapters::init(8, &[6, 24], 9).unwrap()),
            cfg,
        )
        .unwrap();
        let bank = ident.build_bank(&[&r]).unwrap();
        let a = ident.score(&q, &bank).unwrap();
        let b = learned.score(&q, &bank).unwrap();
        assert!(a.m.bitwise_eq(&b.m));
        assert_eq!(a.s.to_bits(), b.s.to_bits());
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let q = random_archive(3, 8, &[24], 3, 3);
        let s = Scorer::new(&anchors(4), AdapterBank::Identity, BranchConfig::for_mode(Mode::Identity, &[24]).unwrap())
            .unwrap();
        assert!(matches!(s.build_bank(&[&q]), Err(Error::ShapeMismatch(_))));
    }
}
