//! Reverse-mode differentiation over a linear tape of tensor primitives.
//!
//! Values live in 64-bit buffers. In [`Precision::F32`] every primitive output
//! is rounded to 32 bits, which reproduces 32-bit storage; [`Precision::F64`]
//! keeps full precision for finite-difference checks. Forward values do not
//! depend on whether the tape is recording.

use std::collections::HashMap;

use super::kernels::{self, LayerNormCache};
use super::ops::NORM_EPS;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var, rows: usize, inp: usize, out: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, rows: usize, d: usize, cache: LayerNormCache },
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Transpose { x: Var, r: usize, c: usize },
    Reshape(Var),
    Concat(Vec<Var>),
    DepthwiseConv { x: Var, k: Var, c: usize, h: usize, w: usize, dilation: usize },
    Normalize { x: Var, d: usize, norms: Vec<f64> },
    RowNorm { x: Var, d: usize },
    RowDot { x: Var, v: Var, d: usize },
    WeightedSum { x: Var, weights: Vec<f64> },
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
    precision: Precision,
    recording: bool,
}

/// Gradients of a scalar with respect to every registered parameter.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(&v).map(|g| g.as_slice())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{what}: {} vs {} elements", a.len(), b.len())));
    }
    Ok(())
}

fn feature_width(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            precision,
            recording: true,
        }
    }

    /// A tape that evaluates forward values only.
    pub fn inference(precision: Precision) -> Self {
        Tape {
            recording: false,
            ..Tape::new(precision)
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn round(&self, mut value: Vec<f64>) -> Vec<f64> {
        if self.precision == Precision::F32 {
            value.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        value
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, is_param: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::shape(format!("leaf shape {shape:?} vs {} values", value.len())));
        }
        let value = self.round(value);
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            value,
            shape,
            op: Op::Leaf,
            needs_grad: is_param && self.recording,
        });
        if is_param {
            self.params.push(id);
        }
        Ok(id)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.to_f64(), true).expect("tensor shape is consistent")
    }

    pub fn param_f64(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        self.leaf(shape, value, true)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.to_f64(), false).expect("tensor shape is consistent")
    }

    pub fn constant_f64(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    /// Stop-gradient: a constant carrying the same value.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let (shape, value) = (node.shape.clone(), node.value.clone());
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            value,
            shape,
            op: Op::Leaf,
            needs_grad: false,
        });
        id
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_f64(n.shape.clone(), &n.value).expect("node shape is consistent")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, inputs: &[Var]) -> Var {
        let value = self.round(value);
        let needs_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        id
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || self.value(b).len() != ws[1] {
            return Err(Error::shape(format!("linear weight {ws:?} / bias {:?}", self.shape(b))));
        }
        let (inp, out) = (ws[0], ws[1]);
        let xs = self.shape(x).to_vec();
        if feature_width(&xs) != inp {
            return Err(Error::shape(format!("linear input {xs:?} vs weight {ws:?}")));
        }
        let rows = self.value(x).len() / inp;
        let y = kernels::linear_forward(self.value(x), self.value(w), self.value(b), rows, inp, out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        Ok(self.push(y, shape, Op::Linear { x, w, b, rows, inp, out }, &[x, w, b]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(gamma).len();
        let xs = self.shape(x).to_vec();
        if self.value(beta).len() != d || feature_width(&xs) != d {
            return Err(Error::shape(format!("layer_norm input {xs:?} with width {d}")));
        }
        let rows = self.value(x).len() / d;
        let (y, cache) = kernels::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), rows, d);
        Ok(self.push(y, xs, Op::LayerNorm { x, gamma, beta, rows, d, cache }, &[x, gamma, beta]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let y = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(y, shape, op, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// `x + c` elementwise.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    /// `c − x` elementwise.
    pub fn rsub(&mut self, c: f64, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.offset(neg, c)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<Var> {
        same_len(self.value(a), self.value(b), what)?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(y, shape, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Sum of several same-shaped values.
    pub fn sum_of(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::shape("sum of an empty term list"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = match *self.shape(x) {
            [r, c] => (r, c),
            ref s => return Err(Error::shape(format!("transpose needs a matrix, got {s:?}"))),
        };
        let y = kernels::transpose(self.value(x), r, c);
        Ok(self.push(y, vec![c, r], Op::Transpose { x, r, c }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape(format!("reshape {:?} -> {shape:?}", self.shape(x))));
        }
        let y = self.value(x).to_vec();
        Ok(self.push(y, shape, Op::Reshape(x), &[x]))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut y = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape(format!("concat {s:?} with trailing {tail:?}")));
            }
            lead += s[0];
            y.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(y, shape, Op::Concat(parts.to_vec()), parts))
    }

    /// Depthwise 3×3 convolution of `[C, h, w]` with `[C, 3, 3]`, zero padded.
    pub fn depthwise_conv3x3(&mut self, x: Var, k: Var, dilation: usize) -> Result<Var> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::shape(format!("depthwise conv input {s:?}"))),
        };
        if self.shape(k) != [c, 3, 3] {
            return Err(Error::shape(format!("depthwise kernels {:?} for {c} channels", self.shape(k))));
        }
        if !(dilation == 1 || dilation == 2) {
            return Err(Error::shape(format!("unsupported dilation {dilation}")));
        }
        let y = kernels::depthwise3x3_forward(self.value(x), self.value(k), c, h, w, dilation);
        Ok(self.push(y, vec![c, h, w], Op::DepthwiseConv { x, k, c, h, w, dilation }, &[x, k]))
    }

    /// Unit-normalizes each row (last axis).
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = feature_width(&shape);
        let mut norms = Vec::new();
        let mut y = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= NORM_EPS {
                return Err(Error::ZeroNorm);
            }
            norms.push(n);
            y.extend(row.iter().map(|v| v / n));
        }
        Ok(self.push(y, shape, Op::Normalize { x, d, norms }, &[x]))
    }

    /// L2 norm of each row; output `[rows]`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let d = feature_width(self.shape(x));
        let y: Vec<f64> = self
            .value(x)
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let n = y.len();
        self.push(y, vec![n], Op::RowNorm { x, d }, &[x])
    }

    /// Dot product of each row of `x` with the vector `v`; output `[rows]`.
    pub fn row_dot(&mut self, x: Var, v: Var) -> Result<Var> {
        let d = feature_width(self.shape(x));
        if self.value(v).len() != d {
            return Err(Error::shape(format!(
                "row_dot of width {d} with {} elements",
                self.value(v).len()
            )));
        }
        let vv = self.value(v);
        let y: Vec<f64> = self
            .value(x)
            .chunks(d)
            .map(|r| r.iter().zip(vv).map(|(a, b)| a * b).sum())
            .collect();
        let n = y.len();
        Ok(self.push(y, vec![n], Op::RowDot { x, v, d }, &[x, v]))
    }

    /// `Σ wᵢ·xᵢ` with constant weights; output `[1]`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        same_len(self.value(x), &weights, "weighted_sum")?;
        let y: f64 = self.value(x).iter().zip(&weights).map(|(a, w)| a * w).sum();
        Ok(self.push(vec![y], vec![1], Op::WeightedSum { x, weights }, &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean of an empty tensor"));
        }
        self.weighted_sum(x, vec![1.0 / n as f64; n])
    }

    /// Reverse pass from a single-element `loss`.
    ///
    /// Returns a gradient for every registered parameter; parameters the loss
    /// does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::ConfigInvalid("backward on a non-recording tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(node, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let mut out = Gradients::default();
        for &p in &self.params {
            let g = grads
                .get_mut(p.0)
                .and_then(|g| g.take())
                .unwrap_or_else(|| vec![0.0; self.nodes[p.0].value.len()]);
            out.grads.insert(p, g);
        }
        Ok(out)
    }

    fn local_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => Vec::new(),
            &Op::Linear { x, w, b, rows, inp, out } => {
                let (dx, dw, db) = kernels::linear_backward(val(x), val(w), g, rows, inp, out);
                vec![(x, dx), (w, dw), (b, db)]
            }
            Op::LayerNorm { x, gamma, beta, rows, d, cache } => {
                let (dx, dg, db) = kernels::layer_norm_backward(val(*x), val(*gamma), cache, g, *rows, *d);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            &Op::Gelu(x) => vec![(x, val(x).iter().zip(g).map(|(&v, &gi)| gi * kernels::gelu_grad(v)).collect())],
            &Op::Relu(x) => vec![(x, val(x).iter().zip(g).map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 }).collect())],
            &Op::Abs(x) => vec![(
                x,
                val(x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else if v < 0.0 { -gi } else { 0.0 })
                    .collect(),
            )],
            &Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|v| -v).collect())],
            &Op::Mul(a, b) => vec![
                (a, g.iter().zip(val(b)).map(|(gi, y)| gi * y).collect()),
                (b, g.iter().zip(val(a)).map(|(gi, x)| gi * x).collect()),
            ],
            &Op::Scale(x, c) => vec![(x, g.iter().map(|v| v * c).collect())],
            &Op::Offset(x) | &Op::Reshape(x) => vec![(x, g.to_vec())],
            &Op::Transpose { x, r, c } => vec![(x, kernels::transpose(g, c, r))],
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = val(p).len();
                        let piece = g[offset..offset + n].to_vec();
                        offset += n;
                        (p, piece)
                    })
                    .collect()
            }
            &Op::DepthwiseConv { x, k, c, h, w, dilation } => {
                let (dx, dk) = kernels::depthwise3x3_backward(val(x), val(k), g, c, h, w, dilation);
                vec![(x, dx), (k, dk)]
            }
            Op::Normalize { x, d, norms } => {
                let y = &node.value;
                let mut dx = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                    let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yi, gi)) in dx[span].iter_mut().zip(yr.iter().zip(gr)) {
                        *o = (gi - yi * proj) / n;
                    }
                }
                vec![(*x, dx)]
            }
            &Op::RowNorm { x, d } => {
                let mut dx = vec![0.0; val(x).len()];
                for (r, (row, out)) in val(x).chunks(d).zip(dx.chunks_mut(d)).enumerate() {
                    let n = node.value[r];
                    if n > 0.0 {
                        for (o, xi) in out.iter_mut().zip(row) {
                            *o = g[r] * xi / n;
                        }
                    }
                }
                vec![(x, dx)]
            }
            &Op::RowDot { x, v, d } => {
                let vv = val(v);
                let mut dx = vec![0.0; val(x).len()];
                let mut dv = vec![0.0; d];
                for (r, (row, out)) in val(x).chunks(d).zip(dx.chunks_mut(d)).enumerate() {
                    for j in 0..d {
                        out[j] = g[r] * vv[j];
                        dv[j] += g[r] * row[j];
                    }
                }
                vec![(x, dx), (v, dv)]
            }
            Op::WeightedSum { x, weights } => vec![(*x, weights.iter().map(|w| w * g[0]).collect())],
        }
    }
}
