//! Standalone tensor functions (32-bit storage, 64-bit accumulation).

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Norms at or below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

pub fn norm_sq(a: &[f32]) -> f64 {
    a.iter().map(|&x| x as f64 * x as f64).sum()
}

/// Returns `a / ‖a‖` or `ZeroNorm`.
pub fn normalized(a: &[f32]) -> Result<Vec<f32>> {
    let n = norm(a);
    if n <= NORM_EPS {
        return Err(Error::ZeroNorm);
    }
    Ok(a.iter().map(|&x| (x as f64 / n) as f32).collect())
}

/// Unit-normalizes every slice of `x` taken along `axis`.
pub fn l2_normalize(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let n = (0..len)
                .map(|k| {
                    let v = src[idx(k)] as f64;
                    v * v
                })
                .sum::<f64>()
                .sqrt();
            if n <= NORM_EPS {
                return Err(Error::ZeroNorm);
            }
            for k in 0..len {
                out[idx(k)] = (src[idx(k)] as f64 / n) as f32;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Cosine similarity `â · b̂`, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cosine of {} vs {} elements", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn check_rows(x: &Tensor, d: usize, what: &str) -> Result<usize> {
    if x.cols() != d {
        return Err(Error::shape(format!(
            "{what}: input feature width {} != {d}",
            x.cols()
        )));
    }
    Ok(x.rows())
}

/// `x · w + b` over the last axis; `w` is `[in, out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || b.len() != w.shape()[1] {
        return Err(Error::shape(format!(
            "linear weight {:?} / bias {:?}",
            w.shape(),
            b.shape()
        )));
    }
    let (inp, out) = (w.shape()[0], w.shape()[1]);
    let rows = check_rows(x, inp, "linear")?;
    let y = kernels::linear_forward(&x.to_f64(), &w.to_f64(), &b.to_f64(), rows, inp, out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out;
    Tensor::from_f64(shape, &y)
}

/// LayerNorm over the last axis (epsilon 1e-5).
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let d = gamma.len();
    if beta.len() != d {
        return Err(Error::shape("layer_norm gamma/beta length"));
    }
    let rows = check_rows(x, d, "layer_norm")?;
    let (y, _) = kernels::layer_norm_forward(&x.to_f64(), &gamma.to_f64(), &beta.to_f64(), rows, d);
    Tensor::from_f64(x.shape().to_vec(), &y)
}

pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| kernels::gelu(v as f64) as f32).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Depthwise 3×3 convolution of a `[C, h, w]` grid with `[C, 3, 3]` kernels.
pub fn depthwise_conv3x3(x: &Tensor, kernels_: &Tensor, dilation: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::shape(format!("depthwise conv input must be [C,h,w], got {:?}", x.shape())));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if kernels_.shape() != [c, 3, 3] {
        return Err(Error::shape(format!(
            "depthwise kernels {:?} for {c} channels",
            kernels_.shape()
        )));
    }
    if !(dilation == 1 || dilation == 2) {
        return Err(Error::shape(format!("unsupported dilation {dilation}")));
    }
    let y = kernels::depthwise3x3_forward(&x.to_f64(), &kernels_.to_f64(), c, h, w, dilation);
    Tensor::from_f64(vec![c, h, w], &y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_three_four() {
        let t = l2_normalize(&Tensor::vector(vec![3.0, 4.0]), 0).unwrap();
        assert!((t.data()[0] - 0.6).abs() < 1e-7);
        assert!((t.data()[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn normalize_unit_is_idempotent() {
        let t = Tensor::vector(vec![0.0, 1.0, 0.0]);
        assert!(l2_normalize(&t, 0).unwrap().bitwise_eq(&t));
    }

    #[test]
    fn normalize_random_768_has_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f32> = (0..768).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = l2_normalize(&Tensor::vector(v), 0).unwrap();
        // independent recomputation of the norm
        let n: f64 = t.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_along_inner_axis() {
        let t = Tensor::new(vec![2, 2], vec![3.0, 0.0, 4.0, 1.0]).unwrap();
        let n = l2_normalize(&t, 0).unwrap();
        assert!((n.data()[0] - 0.6).abs() < 1e-7);
        assert!((n.data()[2] - 0.8).abs() < 1e-7);
        assert_eq!(n.data()[3], 1.0);
    }

    #[test]
    fn normalize_zero_slice_errors() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(l2_normalize(&t, 0), Err(Error::ZeroNorm)));
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_sim(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-12);
        let c = cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn linear_identity() {
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.25, 0.0, -1.0]).unwrap();
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let y = linear(&x, &eye, &Tensor::zeros(vec![3])).unwrap();
        assert!(y.bitwise_eq(&x));
        assert!(matches!(
            linear(&x, &Tensor::zeros(vec![2, 3]), &Tensor::zeros(vec![3])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let x = Tensor::filled(vec![1, 6], 2.5);
        let y = layer_norm(&x, &Tensor::filled(vec![6], 1.0), &Tensor::zeros(vec![6])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn activations_at_reference_points() {
        let x = Tensor::vector(vec![0.0, -1.0, 1.0]);
        assert_eq!(gelu(&x).data()[0], 0.0);
        assert_eq!(relu(&x).data()[1], 0.0);
        // Φ(1) = 0.841344746...
        assert!((gelu(&x).data()[2] - 0.841_344_7).abs() < 1e-6);
    }

    fn naive_conv(x: &Tensor, k: &Tensor, dil: isize) -> Vec<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1] as isize, x.shape()[2] as isize);
        let mut out = Vec::new();
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let mut acc = 0.0f64;
                    for dr in -1..=1isize {
                        for dc in -1..=1isize {
                            let (rr, cc) = (r + dr * dil, col + dc * dil);
                            let v = if rr >= 0 && rr < h && cc >= 0 && cc < w {
                                x.data()[ch * (h * w) as usize + (rr * w + cc) as usize] as f64
                            } else {
                                0.0
                            };
                            acc += v * k.data()[ch * 9 + ((dr + 1) * 3 + dc + 1) as usize] as f64;
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(vec![2, 4, 3], (0..24).map(|_| rng.random()).collect()).unwrap();
        let mut k = Tensor::zeros(vec![2, 3, 3]);
        k.data_mut()[4] = 1.0;
        k.data_mut()[13] = 1.0;
        for dil in [1, 2] {
            assert!(depthwise_conv3x3(&x, &k, dil).unwrap().bitwise_eq(&x));
        }
    }

    #[test]
    fn conv_single_pixel_sum_kernel() {
        let x = Tensor::filled(vec![1, 1, 1], 1.0);
        let k = Tensor::filled(vec![1, 3, 3], 1.0);
        assert_eq!(depthwise_conv3x3(&x, &k, 1).unwrap().data(), &[1.0]);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::new(vec![4, 5, 5], (0..100).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let k = Tensor::new(vec![4, 3, 3], (0..36).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        for dil in [1usize, 2] {
            let y = depthwise_conv3x3(&x, &k, dil).unwrap();
            let oracle = naive_conv(&x, &k, dil as isize);
            for (a, b) in y.data().iter().zip(&oracle) {
                assert!((*a as f64 - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_bad_kernels() {
        let x = Tensor::zeros(vec![2, 3, 3]);
        assert!(depthwise_conv3x3(&x, &Tensor::zeros(vec![1, 3, 3]), 1).is_err());
        assert!(depthwise_conv3x3(&x, &Tensor::zeros(vec![2, 3, 3]), 3).is_err());
    }
}
