//! Sparsemax: Euclidean projection onto the probability simplex.

use std::cmp::Ordering;

/// Closed-form sparsemax.
///
/// The input is shifted by its maximum, sorted in descending order (stable,
/// ties by original index), the support size `k` is the largest `m` with
/// `1 + m·z₍ₘ₎ > Σ_{j≤m} z₍ⱼ₎`, and the output is `max(0, zᵢ − τ)` with
/// `τ = (Σ_{j≤k} z₍ⱼ₎ − 1) / k`.
pub fn sparsemax(z: &[f64]) -> Vec<f64> {
    if z.is_empty() {
        return Vec::new();
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = z.iter().map(|&v| v - max).collect();
    let tau = threshold(&shifted);
    shifted.iter().map(|&v| (v - tau).max(0.0)).collect()
}

/// Threshold `τ` of an already max-shifted vector.
fn threshold(z: &[f64]) -> f64 {
    // τ ≥ max − 1, so entries at or below −1 can never enter the support and
    // would only trail the sorted order.
    let mut order: Vec<usize> = (0..z.len()).filter(|&i| z[i] > -1.0).collect();
    order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));

    let mut cumsum = 0.0;
    let mut support_sum = 0.0;
    let mut support = 0usize;
    for (m, &idx) in order.iter().enumerate() {
        let zm = z[idx];
        cumsum += zm;
        let m1 = (m + 1) as f64;
        if 1.0 + m1 * zm > cumsum {
            support = m + 1;
            support_sum = cumsum;
        }
    }
    (support_sum - 1.0) / support as f64
}

/// Row-wise sparsemax over a `[rows, cols]` matrix, in place.
pub fn sparsemax_rows(scores: &mut [f64], cols: usize) {
    for row in scores.chunks_mut(cols) {
        let out = sparsemax(row);
        row.copy_from_slice(&out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn uniform_input_gives_uniform_output() {
        assert!(close(&sparsemax(&[0.0, 0.0, 0.0]), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn dominant_entry_takes_all_mass() {
        assert_eq!(sparsemax(&[10.0, 0.0, 0.0]), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn reference_triple() {
        // support {0,1,2}: τ = (1.1 − 1)/3, weights z − τ
        let p = sparsemax(&[0.7, 0.3, 0.1]);
        let expect = [0.7 - 0.1 / 3.0, 0.3 - 0.1 / 3.0, 0.1 - 0.1 / 3.0];
        assert!(close(&p, &expect, 1e-12), "{p:?}");
    }

    #[test]
    fn entries_below_threshold_are_exact_zero() {
        let p = sparsemax(&[1.0, 0.9, -3.0, 0.95]);
        assert_eq!(p[2], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singleton_and_empty() {
        assert_eq!(sparsemax(&[-7.5]), vec![1.0]);
        assert!(sparsemax(&[]).is_empty());
    }

    #[test]
    fn rows_are_independent() {
        let mut m = vec![10.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        sparsemax_rows(&mut m, 3);
        assert_eq!(&m[..3], &[1.0, 0.0, 0.0]);
        assert!(close(&m[3..], &[1.0 / 3.0; 3], 1e-15));
    }
}
