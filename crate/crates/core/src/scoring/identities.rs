//! Closed-form equivalences between the anchor-based scores and their
//! residual forms, written generically so they can be evaluated entirely in
//! 32-bit or entirely in 64-bit arithmetic.

use std::ops::{Add, Div, Mul, Sub};

pub trait Real:
    Copy + PartialOrd + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn half() -> Self {
        Self::ONE / (Self::ONE + Self::ONE)
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::ZERO, |acc, (&x, &y)| acc + x * y)
}

pub fn unit<T: Real>(a: &[T]) -> Vec<T> {
    let n = dot(a, a).sqrt();
    a.iter().map(|&x| x / n).collect()
}

pub fn cosine<T: Real>(a: &[T], b: &[T]) -> T {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn sub<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (T::ZERO - x).exp())
}

/// Two-way softmax over cosine similarities to the normal and anomalous
/// anchors; the anomalous share.
pub fn softmax_text_score<T: Real>(f: &[T], normal: &[T], anomalous: &[T]) -> T {
    let ea = cosine(f, anomalous).exp();
    let en = cosine(f, normal).exp();
    ea / (en + ea)
}

/// `σ(‖R_t‖ · cos(f, R_t))` with `R_t = â − n̂`.
pub fn residual_text_score<T: Real>(f: &[T], normal: &[T], anomalous: &[T]) -> T {
    let r = sub(&unit(anomalous), &unit(normal));
    let rn = dot(&r, &r).sqrt();
    if rn == T::ZERO {
        return T::half();
    }
    sigmoid(rn * cosine(f, &r))
}

/// `1 − cos(q, ref)`.
pub fn cosine_distance<T: Real>(q: &[T], reference: &[T]) -> T {
    T::ONE - cosine(q, reference)
}

/// `½‖q̂ − ref̂‖²`.
pub fn half_residual_energy<T: Real>(q: &[T], reference: &[T]) -> T {
    let r = sub(&unit(q), &unit(reference));
    T::half() * dot(&r, &r)
}

/// `f̂_q · R̂_t − f̂_ref · R̂_t`.
pub fn calibrated_difference<T: Real>(q: &[T], reference: &[T], text: &[T]) -> T {
    let t = unit(text);
    dot(&unit(q), &t) - dot(&unit(reference), &t)
}

/// `(f̂_q − f̂_ref) · R̂_t`.
pub fn residual_projection<T: Real>(q: &[T], reference: &[T], text: &[T]) -> T {
    dot(&sub(&unit(q), &unit(reference)), &unit(text))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_anchors_give_one_half() {
        let a = [0.3f64, -0.2, 0.9];
        let f = [1.0f64, 2.0, 3.0];
        assert_eq!(softmax_text_score(&f, &a, &a), 0.5);
        assert_eq!(residual_text_score(&f, &a, &a), 0.5);
    }

    #[test]
    fn orthogonal_query_gives_one_half() {
        let f = [0.0f64, 0.0, 1.0];
        assert!((softmax_text_score(&f, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hand_case() {
        let f = [1.0f64, 0.0];
        let n = [0.0, 1.0];
        let a = [1.0, 0.0];
        let expect = 1f64.exp() / (1.0 + 1f64.exp());
        assert!((softmax_text_score(&f, &n, &a) - expect).abs() < 1e-15);
        assert!((residual_text_score(&f, &n, &a) - expect).abs() < 1e-15);
        assert!((cosine_distance(&f, &n) - 1.0).abs() < 1e-15);
        assert!((half_residual_energy(&f, &n) - 1.0).abs() < 1e-15);
    }
}
