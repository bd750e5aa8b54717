//! Forward and backward kernels over 64-bit slices.
//!
//! These are shared by the differentiable tape and by the standalone tensor
//! functions, so a forward value never depends on whether it was recorded.

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y[n, o] = x[n, i] · w[i, o] + b[o]`
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], rows: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        let yr = &mut y[r * out..(r + 1) * out];
        for (k, &xv) in xr.iter().enumerate() {
            let wr = &w[k * out..(k + 1) * out];
            for (yv, &wv) in yr.iter_mut().zip(wr) {
                *yv += xv * wv;
            }
        }
        for (yv, &bv) in yr.iter_mut().zip(b) {
            *yv += bv;
        }
    }
    y
}

/// Returns `(dx, dw, db)` for [`linear_forward`].
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    rows: usize,
    inp: usize,
    out: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; rows * inp];
    let mut dw = vec![0.0; inp * out];
    let mut db = vec![0.0; out];
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        let dyr = &dy[r * out..(r + 1) * out];
        for (dbv, &g) in db.iter_mut().zip(dyr) {
            *dbv += g;
        }
        for k in 0..inp {
            let wr = &w[k * out..(k + 1) * out];
            let mut acc = 0.0;
            for (&wv, &g) in wr.iter().zip(dyr) {
                acc += wv * g;
            }
            dx[r * inp + k] = acc;
            let xv = xr[k];
            let dwr = &mut dw[k * out..(k + 1) * out];
            for (dwv, &g) in dwr.iter_mut().zip(dyr) {
                *dwv += xv * g;
            }
        }
    }
    (dx, dw, db)
}

pub struct LayerNormCache {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalizes each row over its `d` features, then applies `gamma`/`beta`.
pub fn layer_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    rows: usize,
    d: usize,
) -> (Vec<f64>, LayerNormCache) {
    let mut y = vec![0.0; rows * d];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let m = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..d {
            y[r * d + j] = (xr[j] - m) * s * gamma[j] + beta[j];
        }
        mean.push(m);
        rstd.push(s);
    }
    (y, LayerNormCache { mean, rstd })
}

/// Returns `(dx, dgamma, dbeta)` for [`layer_norm_forward`].
pub fn layer_norm_backward(
    x: &[f64],
    gamma: &[f64],
    cache: &LayerNormCache,
    dy: &[f64],
    rows: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; rows * d];
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    let n = d as f64;
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let (m, s) = (cache.mean[r], cache.rstd[r]);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for j in 0..d {
            let xhat = (xr[j] - m) * s;
            dg[j] += dyr[j] * xhat;
            db[j] += dyr[j];
            let g = dyr[j] * gamma[j];
            sum_g += g;
            sum_gx += g * xhat;
        }
        for j in 0..d {
            let xhat = (xr[j] - m) * s;
            let g = dyr[j] * gamma[j];
            dx[r * d + j] = s * (g - sum_g / n - xhat * sum_gx / n);
        }
    }
    (dx, dg, db)
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Per-channel 3×3 convolution with zero padding that preserves `h × w`.
/// `x` is `[c, h, w]`, `k` is `[c, 3, 3]`.
pub fn depthwise3x3_forward(x: &[f64], k: &[f64], c: usize, h: usize, w: usize, dilation: usize) -> Vec<f64> {
    let mut y = vec![0.0; c * h * w];
    let dil = dilation as isize;
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        let kc = &k[ch * 9..(ch + 1) * 9];
        for r in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for ki in 0..3 {
                    let rr = r as isize + (ki as isize - 1) * dil;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for kj in 0..3 {
                        let cc = col as isize + (kj as isize - 1) * dil;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        acc += kc[ki * 3 + kj] * xc[rr as usize * w + cc as usize];
                    }
                }
                y[ch * h * w + r * w + col] = acc;
            }
        }
    }
    y
}

/// Returns `(dx, dk)` for [`depthwise3x3_forward`].
pub fn depthwise3x3_backward(
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    c: usize,
    h: usize,
    w: usize,
    dilation: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; c * h * w];
    let mut dk = vec![0.0; c * 9];
    let dil = dilation as isize;
    for ch in 0..c {
        let base = ch * h * w;
        for r in 0..h {
            for col in 0..w {
                let g = dy[base + r * w + col];
                if g == 0.0 {
                    continue;
                }
                for ki in 0..3 {
                    let rr = r as isize + (ki as isize - 1) * dil;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for kj in 0..3 {
                        let cc = col as isize + (kj as isize - 1) * dil;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        let xi = base + rr as usize * w + cc as usize;
                        dk[ch * 9 + ki * 3 + kj] += g * x[xi];
                        dx[xi] += g * k[ch * 9 + ki * 3 + kj];
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Transposes a `[r, c]` matrix.
pub fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut y = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            y[j * r + i] = x[i * c + j];
        }
    }
    y
}
