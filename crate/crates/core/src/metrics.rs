//! Image- and pixel-level detection metrics plus per-region overlap.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featureio::MaskImage;
use crate::numerics::Tensor;

pub const REPORT_VERSION: u32 = 1;
pub const DEFAULT_FPR_LIMIT: f64 = 0.3;
pub const DEFAULT_BINS: usize = 1000;

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::ConfigInvalid("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    Ok((pos, labels.len() - pos))
}

/// `(positives, negatives)` per distinct score, highest score first.
fn descending_groups(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out: Vec<(usize, usize)> = Vec::new();
    let mut prev: Option<f64> = None;
    for i in idx {
        if prev != Some(scores[i]) {
            out.push((0, 0));
            prev = Some(scores[i]);
        }
        let g = out.last_mut().expect("pushed above");
        if labels[i] != 0 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    out
}

/// Mann-Whitney statistic; ties count one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut negs_below = neg as f64;
    let mut concordant = 0.0;
    for (p, n) in descending_groups(scores, labels) {
        negs_below -= n as f64;
        concordant += p as f64 * (negs_below + 0.5 * n as f64);
    }
    Ok(concordant / (pos as f64 * neg as f64))
}

/// Step-wise precision-recall area with tied scores as one threshold.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::NoPositives);
    }
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    for (p, n) in descending_groups(scores, labels) {
        tp += p;
        fp += n;
        ap += p as f64 / pos as f64 * tp as f64 / (tp + fp) as f64;
    }
    Ok(ap)
}

/// Best F1 over thresholds at every distinct score (`score ≥ t` is positive).
pub fn f1_max(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::NoPositives);
    }
    let (mut tp, mut fp, mut best) = (0usize, 0usize, 0.0f64);
    for (p, n) in descending_groups(scores, labels) {
        tp += p;
        fp += n;
        best = best.max(2.0 * tp as f64 / (tp + fp + pos) as f64);
    }
    Ok(best)
}

/// Connected components of the set pixels; labels are 1-based, 0 is
/// background. Returns the label image and the component count.
pub fn connected_components(mask: &MaskImage, eight: bool) -> (Vec<u32>, usize) {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0u32; h * w];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if (dy == 0 && dx == 0) || (!eight && dy != 0 && dx != 0) {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.data[j] != 0 && labels[j] == 0 {
                        labels[j] = count;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// Options for [`pro`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProOptions {
    pub fpr_limit: f64,
    pub eight_connected: bool,
    /// `None` sweeps every distinct score; `Some(b)` uses `b` equal-width
    /// bins between the global minimum and maximum.
    pub bins: Option<usize>,
}

impl Default for ProOptions {
    fn default() -> Self {
        ProOptions {
            fpr_limit: DEFAULT_FPR_LIMIT,
            eight_connected: true,
            bins: None,
        }
    }
}

/// Per-pixel region id (0 for normal) and region sizes, over all images.
fn regions(maps: &[&Tensor], masks: &[&MaskImage], eight: bool) -> Result<(Vec<usize>, Vec<usize>)> {
    if maps.len() != masks.len() {
        return Err(Error::shape(format!("{} maps vs {} masks", maps.len(), masks.len())));
    }
    let mut region = Vec::new();
    let mut sizes = vec![0usize];
    for (m, k) in maps.iter().zip(masks) {
        if m.len() != k.height * k.width {
            return Err(Error::shape(format!("map {:?} vs mask {}x{}", m.shape(), k.height, k.width)));
        }
        let (labels, n) = connected_components(k, eight);
        let base = sizes.len() - 1;
        sizes.resize(sizes.len() + n, 0);
        for l in labels {
            let r = if l == 0 { 0 } else { base + l as usize };
            sizes[r] += 1;
            region.push(r);
        }
    }
    Ok((region, sizes))
}

/// Trapezoid area under `(fpr, recall)` points up to `limit`, interpolating
/// the crossing, normalized by `limit`.
fn integrate(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
        }
    }
    area / limit
}

/// Per-region overlap: mean recall over connected ground-truth regions
/// against false-positive rate on normal pixels, integrated up to the FPR
/// limit. The curve starts at `(0, 0)`.
pub fn pro(maps: &[&Tensor], masks: &[&MaskImage], opts: ProOptions) -> Result<f64> {
    if !(opts.fpr_limit > 0.0 && opts.fpr_limit <= 1.0) {
        return Err(Error::ConfigInvalid(format!("FPR limit {} not in (0, 1]", opts.fpr_limit)));
    }
    let (region, sizes) = regions(maps, masks, opts.eight_connected)?;
    let n_regions = sizes.len() - 1;
    if n_regions == 0 {
        return Err(Error::NoRegions);
    }
    let n_normal = sizes[0];
    let scores: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().map(|&v| v as f64)).collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::ConfigInvalid("non-finite map value".into()));
    }

    let key: Vec<f64> = match opts.bins {
        None => scores,
        Some(0) => return Err(Error::ConfigInvalid("bin count must be positive".into())),
        Some(b) => {
            let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let width = (hi - lo) / b as f64;
            scores
                .iter()
                .map(|&s| if width > 0.0 { ((s - lo) / width).floor().min(b as f64 - 1.0) } else { 0.0 })
                .collect()
        }
    };

    let mut idx: Vec<usize> = (0..key.len()).collect();
    idx.sort_by(|&a, &b| key[b].partial_cmp(&key[a]).unwrap_or(Ordering::Equal));
    let mut points = vec![(0.0, 0.0)];
    let (mut fp, mut recall_sum) = (0usize, 0.0f64);
    let mut i = 0;
    while i < idx.len() {
        let k = key[idx[i]];
        while i < idx.len() && key[idx[i]] == k {
            let r = region[idx[i]];
            if r == 0 {
                fp += 1;
            } else {
                recall_sum += 1.0 / sizes[r] as f64;
            }
            i += 1;
        }
        let fpr = if n_normal == 0 { 0.0 } else { fp as f64 / n_normal as f64 };
        points.push((fpr, recall_sum / n_regions as f64));
        if fpr >= opts.fpr_limit {
            break;
        }
    }
    if n_normal == 0 {
        // nothing can be a false positive: the curve is flat at its final recall
        let last = points.last().expect("non-empty").1;
        return Ok(last);
    }
    Ok(integrate(&points, opts.fpr_limit))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub i_auc: Option<f64>,
    pub i_ap: Option<f64>,
    pub i_f1: Option<f64>,
    pub p_auc: Option<f64>,
    pub p_ap: Option<f64>,
    pub p_f1: Option<f64>,
    pub pro: Option<f64>,
}

impl CategoryMetrics {
    fn values(&self) -> [Option<f64>; 7] {
        [self.i_auc, self.i_ap, self.i_f1, self.p_auc, self.p_ap, self.p_f1, self.pro]
    }

    fn from_values(v: [Option<f64>; 7]) -> Self {
        CategoryMetrics {
            i_auc: v[0],
            i_ap: v[1],
            i_f1: v[2],
            p_auc: v[3],
            p_ap: v[4],
            p_f1: v[5],
            pro: v[6],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub fpr_limit: f64,
    pub categories: BTreeMap<String, CategoryMetrics>,
    /// Mean over the categories where each metric is defined.
    pub macro_avg: CategoryMetrics,
}

/// Scored images of one category. `pixel` holds one map and one mask per
/// image when pixel metrics are requested.
pub struct CategoryInput<'a> {
    pub name: String,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub pixel: Option<(Vec<&'a Tensor>, Vec<&'a MaskImage>)>,
}

/// Undefined metrics (one class only, no regions) become `None`.
fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::SingleClass | Error::NoPositives | Error::NoRegions) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn category_metrics(input: &CategoryInput, opts: ProOptions) -> Result<CategoryMetrics> {
    let (s, l) = (&input.scores, &input.labels);
    let mut m = CategoryMetrics {
        i_auc: defined(auroc(s, l))?,
        i_ap: defined(average_precision(s, l))?,
        i_f1: defined(f1_max(s, l))?,
        ..Default::default()
    };
    if let Some((maps, masks)) = &input.pixel {
        if maps.len() != masks.len() {
            return Err(Error::shape(format!("{} maps vs {} masks", maps.len(), masks.len())));
        }
        let mut ps = Vec::new();
        let mut pl = Vec::new();
        for (map, mask) in maps.iter().zip(masks) {
            if map.len() != mask.data.len() {
                return Err(Error::shape(format!("map {:?} vs mask {}x{}", map.shape(), mask.height, mask.width)));
            }
            ps.extend(map.data().iter().map(|&v| v as f64));
            pl.extend(&mask.data);
        }
        m.p_auc = defined(auroc(&ps, &pl))?;
        m.p_ap = defined(average_precision(&ps, &pl))?;
        m.p_f1 = defined(f1_max(&ps, &pl))?;
        m.pro = defined(pro(maps, masks, opts))?;
    }
    Ok(m)
}

pub fn macro_average<'a>(cats: impl IntoIterator<Item = &'a CategoryMetrics>) -> CategoryMetrics {
    let mut sum = [0.0f64; 7];
    let mut n = [0usize; 7];
    for c in cats {
        for (k, v) in c.values().into_iter().enumerate() {
            if let Some(v) = v {
                sum[k] += v;
                n[k] += 1;
            }
        }
    }
    CategoryMetrics::from_values(std::array::from_fn(|k| (n[k] > 0).then(|| sum[k] / n[k] as f64)))
}

pub fn evaluate(inputs: &[CategoryInput], opts: ProOptions) -> Result<MetricReport> {
    use rayon::prelude::*;
    let per = inputs
        .par_iter()
        .map(|c| Ok((c.name.clone(), category_metrics(c, opts)?)))
        .collect::<Result<Vec<_>>>()?;
    let categories: BTreeMap<String, CategoryMetrics> = per.into_iter().collect();
    Ok(MetricReport {
        version: REPORT_VERSION,
        fpr_limit: opts.fpr_limit,
        macro_avg: macro_average(categories.values()),
        categories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_basics() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(matches!(auroc(&[1.0, 2.0], &[1, 1]), Err(Error::SingleClass)));
    }

    #[test]
    fn ap_single_positive_at_bottom() {
        let ap = average_precision(&[4.0, 3.0, 2.0, 1.0, 0.0], &[0, 0, 0, 0, 1]).unwrap();
        assert!((ap - 0.2).abs() < 1e-15);
        assert!(matches!(average_precision(&[1.0], &[0]), Err(Error::NoPositives)));
    }

    #[test]
    fn f1_single_positive_first() {
        assert_eq!(f1_max(&[0.9, 0.1, 0.2, 0.3], &[1, 0, 0, 0]).unwrap(), 1.0);
        assert_eq!(f1_max(&[1.0, 1.0], &[1, 0]).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn components_respect_connectivity() {
        let m = MaskImage::new(3, 3, vec![1, 0, 0, 0, 1, 0, 0, 0, 1]).unwrap();
        assert_eq!(connected_components(&m, true).1, 1);
        assert_eq!(connected_components(&m, false).1, 3);
    }

    #[test]
    fn pro_perfect_prediction() {
        let mask = MaskImage::new(2, 3, vec![1, 0, 0, 0, 0, 1]).unwrap();
        let map = Tensor::new(vec![2, 3], mask.data.iter().map(|&v| v as f32).collect()).unwrap();
        assert!((pro(&[&map], &[&mask], ProOptions::default()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pro_constant_map_is_the_diagonal() {
        let mask = MaskImage::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let map = Tensor::filled(vec![2, 2], 0.5);
        // single point (1, 1): the chord y = x integrated to 0.3, over 0.3
        assert!((pro(&[&map], &[&mask], ProOptions::default()).unwrap() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn pro_needs_regions() {
        let mask = MaskImage::zeros(2, 2);
        let map = Tensor::zeros(vec![2, 2]);
        assert!(matches!(pro(&[&map], &[&mask], ProOptions::default()), Err(Error::NoRegions)));
    }

    #[test]
    fn macro_skips_undefined() {
        let a = CategoryMetrics {
            i_auc: Some(1.0),
            pro: None,
            ..Default::default()
        };
        let b = CategoryMetrics {
            i_auc: Some(0.5),
            pro: Some(0.25),
            ..Default::default()
        };
        let m = macro_average([&a, &b]);
        assert_eq!(m.i_auc, Some(0.75));
        assert_eq!(m.pro, Some(0.25));
        assert_eq!(m.p_ap, None);
    }
}
