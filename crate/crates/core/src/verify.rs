//! Self-checks run by `r2a verify`: the residual identities, sparsemax
//! against a bisection solver, and adapter identity at initialization.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::adapters::{ConvAdapter, MlpAdapter};
use crate::error::Result;
use crate::featureio::FeatureArchive;
use crate::losses::{loss_res, loss_text, loss_vis, PatchLabel, SupervisionTarget, UpdateSide};
use crate::numerics::gradcheck::{grad_check, GradCheckReport, ParamSpec};
use crate::numerics::{sparsemax, Precision, Tape, Tensor, Var};
use crate::residuals::ResidualBundle;
use crate::scoring::identities::{self, Real};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

fn timed(name: &str, f: impl FnOnce() -> (bool, String)) -> Check {
    let t = Instant::now();
    let (passed, detail) = f();
    Check {
        name: name.into(),
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Largest deviation of each identity pair over `draws` random cases, with
/// both sides evaluated in `T`.
pub fn identity_deviations<T: Real + Into<f64>>(seed: u64, draws: usize, cast: impl Fn(f64) -> T) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..draws {
        let d = rng.random_range(2..=64);
        let mut v = || normal_vec(&mut rng, d).into_iter().map(&cast).collect::<Vec<T>>();
        let (f, n, a, r) = (v(), v(), v(), v());
        let pairs = [
            (identities::softmax_text_score(&f, &n, &a), identities::residual_text_score(&f, &n, &a)),
            (identities::cosine_distance(&f, &r), identities::half_residual_energy(&f, &r)),
            (identities::calibrated_difference(&f, &r, &a), identities::residual_projection(&f, &r, &a)),
        ];
        for (w, (x, y)) in worst.iter_mut().zip(pairs) {
            *w = w.max((x.into() - y.into()).abs());
        }
    }
    worst
}

/// Simplex projection by bisection on the threshold; independent of the
/// sort-based closed form.
pub fn simplex_projection_bisect(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (max - 1.0, max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let s: f64 = z.iter().map(|&v| (v - mid).max(0.0)).sum();
        if s > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    z.iter().map(|&v| (v - tau).max(0.0)).collect()
}

pub fn sparsemax_deviation(seed: u64, draws: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut dev, mut mass) = (0.0f64, 0.0f64);
    for _ in 0..draws {
        let n = rng.random_range(1..=16);
        let scale = rng.random_range(0.1..4.0);
        let z: Vec<f64> = normal_vec(&mut rng, n).into_iter().map(|v| v * scale).collect();
        let p = sparsemax(&z);
        let q = simplex_projection_bisect(&z);
        dev = p.iter().zip(&q).fold(dev, |m, (a, b)| m.max((a - b).abs()));
        mass = mass.max((p.iter().sum::<f64>() - 1.0).abs());
        if p.iter().any(|&v| v < 0.0) {
            mass = f64::INFINITY;
        }
    }
    (dev, mass)
}

/// Shifts that keep every addition exact (dyadic inputs, integer shifts)
/// must leave the output bitwise unchanged.
pub fn sparsemax_shift_exact(seed: u64, draws: usize) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..draws).all(|_| {
        let n = rng.random_range(1..=16);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-4096i64..4096) as f64 / 1024.0).collect();
        let c = rng.random_range(-1000i64..1000) as f64;
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let (a, b) = (sparsemax(&z), sparsemax(&shifted));
        a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = normal_vec(rng, n).into_iter().map(|v| v as f32).collect();
    Tensor::new(shape, data).expect("sized from shape")
}

/// Randomizes every tensor except the up-projection and its bias.
fn scramble(tensors: Vec<&mut Tensor>, up_fields: [usize; 2], rng: &mut ChaCha8Rng) {
    for (i, t) in tensors.into_iter().enumerate() {
        if !up_fields.contains(&i) {
            *t = random_tensor(rng, t.shape().to_vec());
        }
    }
}

fn run_adapter(x: &Tensor, params: &[&Tensor], conv: Option<(usize, usize)>) -> Tensor {
    let mut t = Tape::inference(Precision::F32);
    let xv = t.constant(x);
    let p: Vec<Var> = params.iter().map(|p| t.constant(p)).collect();
    let y = match conv {
        Some((h, w)) => ConvAdapter::forward(&mut t, xv, &p, h, w),
        None => MlpAdapter::forward(&mut t, xv, &p),
    }
    .expect("shapes built consistently");
    t.to_tensor(y)
}

/// Number of random parameterizations (out of `count`) for which an adapter
/// with zero up-projection is not a bitwise identity, per family.
pub fn adapter_identity_failures(seed: u64, count: usize) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mlp_bad, mut conv_bad) = (0, 0);
    for _ in 0..count {
        let d = 4 * rng.random_range(1..=8);
        let mut m = MlpAdapter::init(d, &mut rng).expect("width is a multiple of 4");
        scramble(m.tensors_mut().into_iter().collect(), [4, 5], &mut rng);
        let rows = rng.random_range(1..=5);
        let x = random_tensor(&mut rng, vec![rows, d]);
        if !run_adapter(&x, &m.tensors(), None).bitwise_eq(&x) {
            mlp_bad += 1;
        }
        let mut c = ConvAdapter::init(d, &mut rng).expect("width is a multiple of 4");
        scramble(c.tensors_mut().into_iter().collect(), [10, 11], &mut rng);
        let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let g = random_tensor(&mut rng, vec![h * w, d]);
        if !run_adapter(&g, &c.tensors(), Some((h, w))).bitwise_eq(&g) {
            conv_bad += 1;
        }
    }
    (mlp_bad, conv_bad)
}

/// Values in `[-2, 2]` kept at least `0.1` away from zero, so kinks of
/// `relu`/`abs` stay outside the finite-difference stencil.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn spec(rng: &mut ChaCha8Rng, name: &str, shape: Vec<usize>) -> ParamSpec {
    let n = shape.iter().product();
    ParamSpec::new(name, shape, off_zero(rng, n))
}

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Reduces `y` to a scalar with fixed random weights.
fn project(t: &mut Tape, y: Var, w: &[f64]) -> Result<Var> {
    t.weighted_sum(y, w.to_vec())
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<PatchLabel> {
    let mut p: Vec<PatchLabel> = (0..n)
        .map(|_| match rng.random_range(0..3) {
            0 => PatchLabel::Normal,
            1 => PatchLabel::Anomalous,
            _ => PatchLabel::Ignore,
        })
        .collect();
    p[0] = PatchLabel::Normal;
    p[n - 1] = PatchLabel::Anomalous;
    p
}

fn small_archive(rng: &mut ChaCha8Rng, dim: usize, grid: usize, layers: &[u32]) -> FeatureArchive {
    let n = grid * grid;
    FeatureArchive {
        dim,
        layer_ids: layers.to_vec(),
        grid_h: grid,
        grid_w: grid,
        image_h: grid,
        image_w: grid,
        cls: off_zero(rng, dim).into_iter().map(|v| v as f32).collect(),
        layers: layers.iter().map(|_| random_tensor(rng, vec![n, dim])).collect(),
    }
}

/// Central-difference checks of every differentiable tape primitive and the
/// three training losses, in 64-bit mode.
pub fn gradient_checks(seed: u64) -> Vec<(String, Result<GradCheckReport>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, d) = (3, 4);
    let w12: Vec<f64> = normal_vec(&mut rng, rows * d);
    let mut cases: Vec<(&str, Vec<ParamSpec>, Objective)> = Vec::new();

    let w = w12.clone();
    cases.push((
        "linear",
        vec![spec(&mut rng, "x", vec![rows, d]), spec(&mut rng, "w", vec![d, d]), spec(&mut rng, "b", vec![d])],
        Box::new(move |t, p| {
            let y = t.linear(p[0], p[1], p[2])?;
            project(t, y, &w)
        }),
    ));
    let w = w12.clone();
    cases.push((
        "layer_norm",
        vec![spec(&mut rng, "x", vec![rows, d]), spec(&mut rng, "gamma", vec![d]), spec(&mut rng, "beta", vec![d])],
        Box::new(move |t, p| {
            let y = t.layer_norm(p[0], p[1], p[2])?;
            project(t, y, &w)
        }),
    ));
    type Unary = fn(&mut Tape, Var) -> Var;
    let unaries: [(&str, Unary); 6] = [
        ("gelu", |t, x| t.gelu(x)),
        ("relu", |t, x| t.relu(x)),
        ("abs", |t, x| t.abs(x)),
        ("scale", |t, x| t.scale(x, -1.7)),
        ("offset", |t, x| t.offset(x, 0.3)),
        ("rsub", |t, x| t.rsub(0.5, x)),
    ];
    for (name, f) in unaries {
        let w = w12.clone();
        cases.push((
            name,
            vec![spec(&mut rng, "x", vec![rows, d])],
            Box::new(move |t, p| {
                let y = f(t, p[0]);
                project(t, y, &w)
            }),
        ));
    }
    type Binary = fn(&mut Tape, Var, Var) -> Result<Var>;
    let binaries: [(&str, Binary); 4] = [
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("sum_of", |t, a, b| t.sum_of(&[a, b, a])),
    ];
    for (name, f) in binaries {
        let w = w12.clone();
        cases.push((
            name,
            vec![spec(&mut rng, "a", vec![rows, d]), spec(&mut rng, "b", vec![rows, d])],
            Box::new(move |t, p| {
                let y = f(t, p[0], p[1])?;
                project(t, y, &w)
            }),
        ));
    }
    let w = w12.clone();
    cases.push((
        "transpose",
        vec![spec(&mut rng, "x", vec![rows, d])],
        Box::new(move |t, p| {
            let y = t.transpose(p[0])?;
            let sq = t.mul(y, y)?;
            project(t, sq, &w)
        }),
    ));
    let w = w12.clone();
    cases.push((
        "reshape",
        vec![spec(&mut rng, "x", vec![rows, d])],
        Box::new(move |t, p| {
            let y = t.reshape(p[0], vec![d, rows])?;
            let sq = t.mul(y, y)?;
            project(t, sq, &w)
        }),
    ));
    let w: Vec<f64> = normal_vec(&mut rng, 2 * rows * d);
    cases.push((
        "concat",
        vec![spec(&mut rng, "a", vec![rows, d]), spec(&mut rng, "b", vec![rows, d])],
        Box::new(move |t, p| {
            let y = t.concat(&[p[0], p[1]])?;
            let sq = t.mul(y, y)?;
            project(t, sq, &w)
        }),
    ));
    for dilation in [1, 2] {
        let w: Vec<f64> = normal_vec(&mut rng, 2 * 5 * 4);
        cases.push((
            if dilation == 1 { "depthwise_conv3x3_d1" } else { "depthwise_conv3x3_d2" },
            vec![spec(&mut rng, "x", vec![2, 5, 4]), spec(&mut rng, "k", vec![2, 3, 3])],
            Box::new(move |t, p| {
                let y = t.depthwise_conv3x3(p[0], p[1], dilation)?;
                project(t, y, &w)
            }),
        ));
    }
    let w = w12.clone();
    cases.push((
        "normalize",
        vec![spec(&mut rng, "x", vec![rows, d])],
        Box::new(move |t, p| {
            let y = t.normalize(p[0])?;
            project(t, y, &w)
        }),
    ));
    let w = normal_vec(&mut rng, rows);
    cases.push((
        "row_norm",
        vec![spec(&mut rng, "x", vec![rows, d])],
        Box::new(move |t, p| {
            let y = t.row_norm(p[0]);
            project(t, y, &w)
        }),
    ));
    let w = normal_vec(&mut rng, rows);
    cases.push((
        "row_dot",
        vec![spec(&mut rng, "x", vec![rows, d]), spec(&mut rng, "v", vec![d])],
        Box::new(move |t, p| {
            let y = t.row_dot(p[0], p[1])?;
            project(t, y, &w)
        }),
    ));
    cases.push((
        "mean",
        vec![spec(&mut rng, "x", vec![rows, d])],
        Box::new(|t, p| {
            let sq = t.mul(p[0], p[0])?;
            t.mean(sq)
        }),
    ));

    // Both adapter families, with every weight perturbed off its init.
    let m = MlpAdapter::init(8, &mut rng).expect("width is a multiple of 4");
    let mut params: Vec<ParamSpec> = m
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| ParamSpec::new(format!("mlp{i}"), t.shape().to_vec(), off_zero(&mut rng, t.len())))
        .collect();
    params.push(spec(&mut rng, "x", vec![2, 8]));
    let w = normal_vec(&mut rng, 16);
    cases.push((
        "mlp_adapter",
        params,
        Box::new(move |t, p| {
            let y = MlpAdapter::forward(t, p[6], &p[..6])?;
            project(t, y, &w)
        }),
    ));
    let c = ConvAdapter::init(8, &mut rng).expect("width is a multiple of 4");
    let mut params: Vec<ParamSpec> = c
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| ParamSpec::new(format!("conv{i}"), t.shape().to_vec(), off_zero(&mut rng, t.len())))
        .collect();
    params.push(spec(&mut rng, "x", vec![9, 8]));
    let w = normal_vec(&mut rng, 72);
    cases.push((
        "conv_adapter",
        params,
        Box::new(move |t, p| {
            let y = ConvAdapter::forward(t, p[12], &p[..12], 3, 3)?;
            project(t, y, &w)
        }),
    ));

    // Losses on a small random query: D = 6, 3×3 grid, two layers.
    let (dim, grid, layers) = (6, 3, vec![1u32, 2]);
    let n = grid * grid;
    let query = small_archive(&mut rng, dim, grid, &layers);
    for label in [0u8, 1] {
        let target = SupervisionTarget::from_labels(label, random_labels(&mut rng, n));
        let raw: Vec<f64> = off_zero(&mut rng, dim);
        let (q, tg, ls) = (query.clone(), target.clone(), layers.clone());
        cases.push((
            if label == 0 { "loss_text_normal" } else { "loss_text_anomalous" },
            vec![spec(&mut rng, "adapted", vec![1, dim])],
            Box::new(move |t, p| {
                let r = t.constant_f64(vec![1, dim], raw.clone())?;
                loss_text(t, &q, &ls, p[0], r, &tg)
            }),
        ));

        let norms: Vec<Vec<f32>> = (0..2).map(|_| (0..n).map(|_| rng.random_range(0.5..3.0f32)).collect()).collect();
        let tg = target.clone();
        cases.push((
            if label == 0 { "loss_vis_normal" } else { "loss_vis_anomalous" },
            vec![spec(&mut rng, "l1", vec![n, dim]), spec(&mut rng, "l2", vec![n, dim])],
            Box::new(move |t, p| {
                let refs: Vec<&[f32]> = norms.iter().map(|v| v.as_slice()).collect();
                loss_vis(t, &p[..2], &refs, &tg)
            }),
        ));

        for side in [UpdateSide::Text, UpdateSide::Visual] {
            let bundle = ResidualBundle {
                text: off_zero(&mut rng, dim).into_iter().map(|v| v as f32).collect(),
                layer_ids: layers.clone(),
                local: layers.iter().map(|_| random_tensor(&mut rng, vec![n, dim])).collect(),
                local_norms: (0..2).map(|_| (0..n).map(|_| rng.random_range(0.5..3.0f32)).collect()).collect(),
                cls: off_zero(&mut rng, dim).into_iter().map(|v| v as f32).collect(),
                cls_norm: rng.random_range(0.5..3.0f32),
            };
            let (tg, ls) = (target.clone(), layers.clone());
            let name = match (label, side) {
                (0, UpdateSide::Text) => "loss_res_normal_text_side",
                (0, UpdateSide::Visual) => "loss_res_normal_visual_side",
                (_, UpdateSide::Text) => "loss_res_anomalous_text_side",
                (_, UpdateSide::Visual) => "loss_res_anomalous_visual_side",
            };
            // The gradient-stopped side is a constant here: finite differences
            // would see through the detach.
            let frozen_text = off_zero(&mut rng, dim);
            let frozen_vis: Vec<Vec<f64>> = (0..2).map(|_| off_zero(&mut rng, n * dim)).collect();
            let frozen_cls = off_zero(&mut rng, dim);
            let params = match side {
                UpdateSide::Text => vec![spec(&mut rng, "res_text", vec![1, dim])],
                UpdateSide::Visual => vec![
                    spec(&mut rng, "res_l1", vec![n, dim]),
                    spec(&mut rng, "res_l2", vec![n, dim]),
                    spec(&mut rng, "res_cls", vec![1, dim]),
                ],
            };
            cases.push((
                name,
                params,
                Box::new(move |t, p| match side {
                    UpdateSide::Text => {
                        let v1 = t.constant_f64(vec![n, dim], frozen_vis[0].clone())?;
                        let v2 = t.constant_f64(vec![n, dim], frozen_vis[1].clone())?;
                        let c = t.constant_f64(vec![1, dim], frozen_cls.clone())?;
                        loss_res(t, p[0], &[v1, v2], c, &bundle, &ls, &tg, side)
                    }
                    UpdateSide::Visual => {
                        let r = t.constant_f64(vec![1, dim], frozen_text.clone())?;
                        loss_res(t, r, &p[..2], p[2], &bundle, &ls, &tg, side)
                    }
                }),
            ));
        }
    }

    cases
        .into_iter()
        .map(|(name, params, f)| (name.to_string(), grad_check(f, &params, 1e-3)))
        .collect()
}

pub fn run_all(seed: u64) -> VerifyReport {
    let checks = vec![
        timed("identities_f64", || {
            let w = identity_deviations::<f64>(seed, 1000, |v| v);
            (w.iter().all(|&e| e <= 1e-9), format!("max deviations {w:?} (tol 1e-9)"))
        }),
        timed("identities_f32", || {
            let w = identity_deviations::<f32>(seed, 1000, |v| v as f32);
            (w.iter().all(|&e| e <= 1e-5), format!("max deviations {w:?} (tol 1e-5)"))
        }),
        timed("sparsemax_projection", || {
            let (dev, mass) = sparsemax_deviation(seed, 1000);
            (dev <= 1e-9 && mass <= 1e-12, format!("max deviation {dev:e}, mass error {mass:e}"))
        }),
        timed("sparsemax_shift", || {
            let ok = sparsemax_shift_exact(seed, 1000);
            (ok, format!("bitwise shift invariance over 1000 draws: {ok}"))
        }),
        timed("gradient_checks", || {
            let results = gradient_checks(seed);
            let failed: Vec<String> = results
                .iter()
                .filter(|(_, r)| r.is_err())
                .map(|(n, r)| format!("{n}: {}", r.as_ref().err().map(|e| e.to_string()).unwrap_or_default()))
                .collect();
            let worst = results.iter().filter_map(|(_, r)| r.as_ref().ok()).map(|r| r.max_rel_err).fold(0.0, f64::max);
            let detail = if failed.is_empty() {
                format!("{} cases, max relative error {worst:.2e} (tol 1e-3)", results.len())
            } else {
                failed.join("; ")
            };
            (failed.is_empty(), detail)
        }),
        timed("adapter_identity", || {
            let (m, c) = adapter_identity_failures(seed, 100);
            (m == 0 && c == 0, format!("non-identity cases: mlp {m}, conv {c} of 100"))
        }),
    ];
    VerifyReport {
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bisection_agrees_on_a_hand_case() {
        let p = simplex_projection_bisect(&[0.7, 0.3, 0.1]);
        assert!((p[0] - (0.7 - 0.1 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn all_checks_pass() {
        let r = run_all(1);
        for c in &r.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
