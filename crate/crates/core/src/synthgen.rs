//! Seeded synthetic datasets with anomalies planted directly in feature
//! space, for end-to-end runs without a backbone.
//!
//! Every category owns a random base pattern per layer and position, with
//! rows of roughly unit norm. A normal sample is the base plus Gaussian
//! noise plus a random mix of a few nuisance directions shared by all
//! categories. An anomalous sample additionally shifts one contiguous block
//! of patches by `μ·d` in every layer. The text anchors are placed so that
//! their residual points along `d`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featureio::{DatasetManifest, FeatureArchive, MaskImage, Role, SampleEntry, TextAnchorSet};
use crate::featureio::manifest::MANIFEST_VERSION;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionSharing {
    Global,
    PerCategory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub seen: usize,
    pub unseen: usize,
    pub train_normal: usize,
    pub train_anomalous: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    pub references: usize,
    pub dim: usize,
    pub grid: usize,
    pub layer_ids: Vec<u32>,
    /// Pixels per patch side.
    pub patch_px: usize,
    /// Anomalous block side range in patches, inclusive.
    pub block_min: usize,
    pub block_max: usize,
    pub mu: f64,
    pub eta: f64,
    pub nuisance_rank: usize,
    pub nuisance_scale: f64,
    /// Grid radius of the box filter that smooths nuisance coefficients;
    /// 0 draws them independently per patch.
    pub nuisance_smooth: usize,
    /// Angle (radians) between the anchors' residual and the global
    /// anomaly direction, tilted toward the first nuisance direction.
    pub text_tilt: f64,
    /// Share of `μ·d` added to the CLS vector of anomalous images.
    pub cls_shift: f64,
    pub sharing: DirectionSharing,
    /// Reject configurations where `μ ≤ η·√D`.
    pub strong: bool,
}

impl SynthConfig {
    /// The strong-separation preset (`μ = 2`, `η = 0.05`).
    pub fn strong(seed: u64) -> Self {
        SynthConfig {
            seed,
            seen: 4,
            unseen: 2,
            train_normal: 40,
            train_anomalous: 40,
            test_normal: 12,
            test_anomalous: 12,
            references: 4,
            dim: 64,
            grid: 16,
            layer_ids: vec![6, 12, 18, 24],
            patch_px: 4,
            block_min: 2,
            block_max: 4,
            mu: 2.0,
            eta: 0.05,
            nuisance_rank: 4,
            nuisance_scale: 5.0,
            nuisance_smooth: 2,
            text_tilt: 0.35,
            cls_shift: 0.25,
            sharing: DirectionSharing::Global,
            strong: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.seen == 0 || self.unseen == 0 {
            return bad("need at least one seen and one unseen category".into());
        }
        if self.dim == 0 || self.dim % 4 != 0 {
            return bad(format!("D = {} must be a positive multiple of 4", self.dim));
        }
        let directions = 1 + self.seen + self.unseen + self.nuisance_rank + 1;
        if directions > self.dim {
            return bad(format!("D = {} is too small for {directions} orthogonal directions", self.dim));
        }
        if self.grid == 0 || self.patch_px == 0 || self.layer_ids.is_empty() {
            return bad("grid, patch size and layer list must be non-empty".into());
        }
        if self.block_min == 0 || self.block_min > self.block_max || self.block_max > self.grid {
            return bad(format!("block range {}..={} on a {} grid", self.block_min, self.block_max, self.grid));
        }
        if self.train_normal + self.train_anomalous == 0 || self.test_normal + self.test_anomalous == 0 {
            return bad("empty train or test split".into());
        }
        if self.references == 0 {
            return bad("need at least one reference per unseen category".into());
        }
        for (name, v) in [("mu", self.mu), ("eta", self.eta), ("nuisance", self.nuisance_scale), ("cls shift", self.cls_shift)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if !(0.0..=0.45).contains(&self.text_tilt) {
            return bad(format!("text tilt {} outside [0, 0.45] rad", self.text_tilt));
        }
        if self.strong && self.mu <= self.eta * (self.dim as f64).sqrt() {
            return bad(format!("strong mode needs mu > eta*sqrt(D), got {} <= {}", self.mu, self.eta * (self.dim as f64).sqrt()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `count` orthonormal random vectors via Gram-Schmidt.
fn orthonormal(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = gaussian(rng, dim, 1.0);
        for u in &out {
            let c = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

/// Directions shared by the whole dataset.
struct Geometry {
    global: Vec<f64>,
    per_category: Vec<Vec<f64>>,
    nuisance: Vec<Vec<f64>>,
    text_base: Vec<f64>,
}

impl Geometry {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let cats = cfg.seen + cfg.unseen;
        let mut basis = orthonormal(rng, cfg.dim, 1 + cats + cfg.nuisance_rank + 1);
        let text_base = basis.pop().expect("sized above");
        let nuisance = basis.split_off(1 + cats);
        let side = basis.split_off(1);
        let global = basis.pop().expect("sized above");
        let per_category = side
            .iter()
            .map(|e| {
                let v: Vec<f64> = global.iter().zip(e).map(|(g, e)| g + 0.1 * e).collect();
                let n = dot(&v, &v).sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        Geometry {
            global,
            per_category,
            nuisance,
            text_base,
        }
    }

    fn direction(&self, cfg: &SynthConfig, category: usize) -> &[f64] {
        match cfg.sharing {
            DirectionSharing::Global => &self.global,
            DirectionSharing::PerCategory => &self.per_category[category],
        }
    }
}

/// Normal and anomalous prompt sets around `cos θ·u ± sin θ·t`, where `t`
/// is the global direction tilted toward the first nuisance direction.
fn make_anchors(cfg: &SynthConfig, geo: &Geometry, rng: &mut ChaCha8Rng) -> Result<TextAnchorSet> {
    let (s, c) = 0.3f64.sin_cos();
    let (ts, tc) = cfg.text_tilt.sin_cos();
    let t: Vec<f64> = match geo.nuisance.first() {
        Some(u) => geo.global.iter().zip(u).map(|(g, u)| tc * g + ts * u).collect(),
        None => geo.global.clone(),
    };
    let prompts = 4;
    let mut rows = |sign: f64| -> Result<Tensor> {
        let mut data = Vec::with_capacity(prompts * cfg.dim);
        for _ in 0..prompts {
            let noise = gaussian(rng, cfg.dim, 0.02);
            for k in 0..cfg.dim {
                data.push((c * geo.text_base[k] + sign * s * t[k] + noise[k]) as f32);
            }
        }
        Tensor::new(vec![prompts, cfg.dim], data)
    };
    let normal = rows(-1.0)?;
    let anomalous = rows(1.0)?;
    TextAnchorSet::new(normal, anomalous)
}

/// Patch block `(y0, x0, side)` in grid units.
type Block = (usize, usize, usize);

struct Category {
    index: usize,
    base: Vec<Vec<f64>>,
    cls: Vec<f64>,
}

/// Nuisance coefficients `[N, rank]`, box-smoothed over the grid and
/// rescaled so each keeps standard deviation `nuisance_scale`.
fn nuisance_field(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (g, k, r) = (cfg.grid, cfg.nuisance_rank, cfg.nuisance_smooth as isize);
    let raw = gaussian(rng, g * g * k, cfg.nuisance_scale);
    if r == 0 {
        return raw;
    }
    let mut out = vec![0.0; g * g * k];
    for y in 0..g as isize {
        for x in 0..g as isize {
            let mut count = 0.0f64;
            for yy in (y - r).max(0)..=(y + r).min(g as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(g as isize - 1) {
                    let src = (yy as usize * g + xx as usize) * k;
                    let dst = (y as usize * g + x as usize) * k;
                    for j in 0..k {
                        out[dst + j] += raw[src + j];
                    }
                    count += 1.0;
                }
            }
            let dst = (y as usize * g + x as usize) * k;
            out[dst..dst + k].iter_mut().for_each(|v| *v /= count.sqrt());
        }
    }
    out
}

fn sample_archive(
    cfg: &SynthConfig,
    geo: &Geometry,
    cat: &Category,
    block: Option<Block>,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureArchive> {
    let (g, d) = (cfg.grid, cfg.dim);
    let dir = geo.direction(cfg, cat.index);
    let clamp = 3.0 * cfg.eta;
    let inside = |p: usize| match block {
        Some((y0, x0, s)) => {
            let (y, x) = (p / g, p % g);
            y >= y0 && y < y0 + s && x >= x0 && x < x0 + s
        }
        None => false,
    };
    let mut layers = Vec::with_capacity(cfg.layer_ids.len());
    for base in &cat.base {
        let mix = nuisance_field(cfg, rng);
        let mut data = Vec::with_capacity(g * g * d);
        for p in 0..g * g {
            let mut noise = gaussian(rng, d, cfg.eta);
            let along = dot(&noise, dir);
            let excess = along - along.clamp(-clamp, clamp);
            noise.iter_mut().zip(dir).for_each(|(n, u)| *n -= excess * u);
            let mix = &mix[p * cfg.nuisance_rank..(p + 1) * cfg.nuisance_rank];
            let shift = if inside(p) { cfg.mu } else { 0.0 };
            for k in 0..d {
                let nuis: f64 = geo.nuisance.iter().zip(mix).map(|(u, a)| a * u[k]).sum();
                data.push((base[p * d + k] + noise[k] + nuis + shift * dir[k]) as f32);
            }
        }
        layers.push(Tensor::new(vec![g * g, d], data)?);
    }
    let noise = gaussian(rng, d, cfg.eta);
    let shift = if block.is_some() { cfg.cls_shift * cfg.mu } else { 0.0 };
    let cls = (0..d).map(|k| (cat.cls[k] + noise[k] + shift * dir[k]) as f32).collect();
    let a = FeatureArchive {
        dim: d,
        layer_ids: cfg.layer_ids.clone(),
        grid_h: g,
        grid_w: g,
        image_h: g * cfg.patch_px,
        image_w: g * cfg.patch_px,
        cls,
        layers,
    };
    a.validate()?;
    Ok(a)
}

fn block_mask(cfg: &SynthConfig, block: Block) -> MaskImage {
    let side = cfg.grid * cfg.patch_px;
    let mut m = MaskImage::zeros(side, side);
    let (y0, x0, s) = block;
    for y in y0 * cfg.patch_px..(y0 + s) * cfg.patch_px {
        for x in x0 * cfg.patch_px..(x0 + s) * cfg.patch_px {
            m.data[y * side + x] = 1;
        }
    }
    m
}

/// An in-memory dataset; [`SynthDataset::write`] lays it out on disk.
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub anchors: TextAnchorSet,
    pub archives: Vec<(String, FeatureArchive)>,
    pub masks: Vec<(String, MaskImage)>,
    /// Planted anomaly direction per category.
    pub directions: Vec<Vec<f64>>,
    /// Clean base grid per category and layer, `[N·D]`.
    pub bases: Vec<Vec<Vec<f64>>>,
}

pub fn category_name(i: usize) -> String {
    format!("cat{i}")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let geo = Geometry::new(cfg, &mut rng);
    let anchors = make_anchors(cfg, &geo, &mut rng)?;
    let (g, d) = (cfg.grid, cfg.dim);
    let row_std = 1.0 / (d as f64).sqrt();

    let mut samples = Vec::new();
    let mut archives = Vec::new();
    let mut masks = Vec::new();
    let mut references = std::collections::BTreeMap::new();
    let mut directions = Vec::new();
    let mut bases = Vec::new();
    for ci in 0..cfg.seen + cfg.unseen {
        let name = category_name(ci);
        let cat = Category {
            index: ci,
            base: cfg.layer_ids.iter().map(|_| gaussian(&mut rng, g * g * d, row_std)).collect(),
            cls: gaussian(&mut rng, d, row_std),
        };
        directions.push(geo.direction(cfg, ci).to_vec());
        let seen = ci < cfg.seen;
        let (role, normal, anomalous) = if seen {
            (Role::Train, cfg.train_normal, cfg.train_anomalous)
        } else {
            (Role::Test, cfg.test_normal, cfg.test_anomalous)
        };
        let refs = if seen { 0 } else { cfg.references };
        let mut push = |id: String, role: Role, block: Option<Block>, rng: &mut ChaCha8Rng| -> Result<()> {
            let a = sample_archive(cfg, &geo, &cat, block, rng)?;
            let mask = block.map(|b| {
                masks.push((id.clone(), block_mask(cfg, b)));
                format!("masks/{id}.pgm")
            });
            samples.push(SampleEntry {
                id: id.clone(),
                category: name.clone(),
                role,
                label: block.is_some() as u8,
                features: format!("features/{id}.r2cf"),
                mask,
            });
            archives.push((id, a));
            Ok(())
        };
        for i in 0..normal {
            push(format!("{name}_good_{i:03}"), role, None, &mut rng)?;
        }
        for i in 0..anomalous {
            let side = rng.random_range(cfg.block_min..=cfg.block_max);
            let block = (rng.random_range(0..=g - side), rng.random_range(0..=g - side), side);
            push(format!("{name}_bad_{i:03}"), role, Some(block), &mut rng)?;
        }
        let mut ids = Vec::new();
        for i in 0..refs {
            let id = format!("{name}_ref_{i:03}");
            push(id.clone(), Role::Reference, None, &mut rng)?;
            ids.push(id);
        }
        if !ids.is_empty() {
            references.insert(name.clone(), ids);
        }
        bases.push(cat.base);
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        anchors: Some("anchors.r2ta".into()),
        samples,
        references,
        base_dir: Default::default(),
    };
    manifest.validate(true)?;
    Ok(SynthDataset {
        manifest,
        anchors,
        archives,
        masks,
        directions,
        bases,
    })
}

impl SynthDataset {
    /// Writes `manifest.json`, `anchors.r2ta`, `features/` and `masks/`
    /// under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::from(e).at(p));
        mkdir(&dir.join("features"))?;
        mkdir(&dir.join("masks"))?;
        self.anchors.write(&dir.join("anchors.r2ta"))?;
        for (id, a) in &self.archives {
            a.write(&dir.join(format!("features/{id}.r2cf")))?;
        }
        for (id, m) in &self.masks {
            m.write(&dir.join(format!("masks/{id}.pgm")))?;
        }
        let path = dir.join("manifest.json");
        fs::write(&path, self.manifest.to_json()? + "\n").map_err(|e| Error::from(e).at(&path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residuals::build_text_residual;

    fn small() -> SynthConfig {
        SynthConfig {
            train_normal: 2,
            train_anomalous: 2,
            test_normal: 2,
            test_anomalous: 2,
            references: 1,
            grid: 8,
            ..SynthConfig::strong(3)
        }
    }

    #[test]
    fn text_residual_tracks_the_planted_direction() {
        for sharing in [DirectionSharing::Global, DirectionSharing::PerCategory] {
            let ds = generate(&SynthConfig { sharing, ..small() }).unwrap();
            let r: Vec<f64> = build_text_residual(&ds.anchors).unwrap().iter().map(|&v| v as f64).collect();
            for d in &ds.directions {
                let c = dot(&r, d) / dot(&r, &r).sqrt();
                assert!(c >= 0.9, "{sharing:?}: cos {c}");
            }
        }
    }

    #[test]
    fn planted_blocks_match_masks_and_shift() {
        let cfg = small();
        let ds = generate(&cfg).unwrap();
        let (g, d) = (cfg.grid, cfg.dim);
        for s in ds.manifest.samples.iter().filter(|s| s.label == 1) {
            let ci: usize = s.category[3..].parse().unwrap();
            let mask = &ds.masks.iter().find(|(id, _)| id == &s.id).unwrap().1;
            let a = &ds.archives.iter().find(|(id, _)| id == &s.id).unwrap().1;
            let dir = &ds.directions[ci];
            let mut hits = 0;
            for p in 0..g * g {
                let (y, x) = (p / g * cfg.patch_px, p % g * cfg.patch_px);
                if mask.get(y, x) == 0 {
                    continue;
                }
                hits += 1;
                for (li, base) in ds.bases[ci].iter().enumerate() {
                    let row = a.layers[li].row(p);
                    let along: f64 = (0..d).map(|k| (row[k] as f64 - base[p * d + k]) * dir[k]).sum();
                    assert!(along >= cfg.mu - 3.0 * cfg.eta - 1e-4, "{}: {along}", s.id);
                }
            }
            assert!(hits >= cfg.block_min * cfg.block_min);
        }
    }

    #[test]
    fn seen_and_unseen_are_disjoint() {
        let ds = generate(&small()).unwrap();
        let train = ds.manifest.categories(Role::Train);
        let test = ds.manifest.categories(Role::Test);
        assert_eq!(train.len(), 4);
        assert_eq!(test.len(), 2);
        assert!(train.iter().all(|c| !test.contains(c)));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&small()).unwrap().write(a.path()).unwrap();
        generate(&small()).unwrap().write(b.path()).unwrap();
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(fs::read(&entry).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        }
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn strong_flag_checks_separation() {
        assert!(SynthConfig { mu: 0.3, ..small() }.validate().is_err());
        assert!(SynthConfig { mu: 0.0, strong: false, ..small() }.validate().is_ok());
    }
}
