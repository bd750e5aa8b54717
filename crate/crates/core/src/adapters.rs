//! Residual adapters: a bottleneck MLP for vectors and a multi-scale
//! depthwise-convolution adapter for patch grids. Both add a zero-initialized
//! up-projection to their input, so a fresh adapter is the identity.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featureio::Checkpoint;
use crate::numerics::{Tape, Tensor, Var};

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::ConfigInvalid(format!("feature width {dim} is not a positive multiple of 4")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpAdapter {
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
}

pub const MLP_FIELDS: [&str; 6] = ["ln.gamma", "ln.beta", "W_down", "b_down", "W_up", "b_up"];

impl MlpAdapter {
    pub fn init(dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_dim(dim)?;
        let h = dim / 4;
        Ok(MlpAdapter {
            ln_gamma: Tensor::filled(vec![dim], 1.0),
            ln_beta: Tensor::zeros(vec![dim]),
            w_down: uniform(rng, vec![dim, h], dim),
            b_down: Tensor::zeros(vec![h]),
            w_up: Tensor::zeros(vec![h, dim]),
            b_up: Tensor::zeros(vec![dim]),
        })
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.ln_gamma, &self.ln_beta, &self.w_down, &self.b_down, &self.w_up, &self.b_up]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.ln_gamma,
            &mut self.ln_beta,
            &mut self.w_down,
            &mut self.b_down,
            &mut self.w_up,
            &mut self.b_up,
        ]
    }

    /// `x + W_up·GELU(W_down·LN(x) + b_down) + b_up` for `x` of shape `[.., D]`;
    /// `p` are the bound tensors in [`MLP_FIELDS`] order.
    pub fn forward(tape: &mut Tape, x: Var, p: &[Var]) -> Result<Var> {
        let n = tape.layer_norm(x, p[0], p[1])?;
        let h = tape.linear(n, p[2], p[3])?;
        let h = tape.gelu(h);
        let up = tape.linear(h, p[4], p[5])?;
        tape.add(x, up)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvAdapter {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_reduce: Tensor,
    pub b_reduce: Tensor,
    pub k1: Tensor,
    pub k2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_fuse: Tensor,
    pub b_fuse: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
}

pub const CONV_FIELDS: [&str; 12] = [
    "ln1.gamma",
    "ln1.beta",
    "W_reduce",
    "b_reduce",
    "K1",
    "K2",
    "ln2.gamma",
    "ln2.beta",
    "W_fuse",
    "b_fuse",
    "W_up",
    "b_up",
];

impl ConvAdapter {
    pub fn init(dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_dim(dim)?;
        let q = dim / 4;
        Ok(ConvAdapter {
            ln1_gamma: Tensor::filled(vec![dim], 1.0),
            ln1_beta: Tensor::zeros(vec![dim]),
            w_reduce: uniform(rng, vec![dim, q], dim),
            b_reduce: Tensor::zeros(vec![q]),
            k1: uniform(rng, vec![q, 3, 3], 9),
            k2: uniform(rng, vec![q, 3, 3], 9),
            ln2_gamma: Tensor::filled(vec![3 * q], 1.0),
            ln2_beta: Tensor::zeros(vec![3 * q]),
            w_fuse: uniform(rng, vec![3 * q, q], 3 * q),
            b_fuse: Tensor::zeros(vec![q]),
            w_up: Tensor::zeros(vec![q, dim]),
            b_up: Tensor::zeros(vec![dim]),
        })
    }

    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_reduce,
            &self.b_reduce,
            &self.k1,
            &self.k2,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_fuse,
            &self.b_fuse,
            &self.w_up,
            &self.b_up,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_reduce,
            &mut self.b_reduce,
            &mut self.k1,
            &mut self.k2,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w_fuse,
            &mut self.b_fuse,
            &mut self.w_up,
            &mut self.b_up,
        ]
    }

    /// Forward over an `[h·w, D]` grid; `p` in [`CONV_FIELDS`] order.
    pub fn forward(tape: &mut Tape, x: Var, p: &[Var], grid_h: usize, grid_w: usize) -> Result<Var> {
        let n = grid_h * grid_w;
        if tape.shape(x).len() != 2 || tape.shape(x)[0] != n {
            return Err(Error::shape(format!("conv adapter input {:?} for a {grid_h}x{grid_w} grid", tape.shape(x))));
        }
        let q = tape.value(p[3]).len();

        let a = tape.layer_norm(x, p[0], p[1])?;
        let a = tape.linear(a, p[2], p[3])?;
        let a = tape.relu(a);
        let a = tape.transpose(a)?;
        let pre = tape.reshape(a, vec![q, grid_h, grid_w])?;

        let d1 = tape.depthwise_conv3x3(pre, p[4], 1)?;
        let d2 = tape.depthwise_conv3x3(pre, p[5], 2)?;
        let cat = tape.concat(&[pre, d1, d2])?;
        let cat = tape.reshape(cat, vec![3 * q, n])?;
        let cat = tape.transpose(cat)?;

        let f = tape.layer_norm(cat, p[6], p[7])?;
        let f = tape.linear(f, p[8], p[9])?;
        let f = tape.relu(f);
        let up = tape.linear(f, p[10], p[11])?;
        tape.add(x, up)
    }
}

/// Optimizer grouping of adapter parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Text,
    Visual,
    ResText,
    /// Residual-branch per-layer visual adapters plus the global one.
    ResVisual,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Text, Group::Visual, Group::ResText, Group::ResVisual];
}

/// Which adapter a forward call goes through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Text,
    Visual(u32),
    ResText,
    ResVisual(u32),
    ResCls,
}

impl Slot {
    pub fn group(self) -> Group {
        match self {
            Slot::Text => Group::Text,
            Slot::Visual(_) => Group::Visual,
            Slot::ResText => Group::ResText,
            Slot::ResVisual(_) | Slot::ResCls => Group::ResVisual,
        }
    }

    /// Local (per-layer grid) adapters train at the higher rate.
    pub fn is_local(self) -> bool {
        matches!(self, Slot::Visual(_) | Slot::ResVisual(_))
    }

    pub fn prefix(self) -> String {
        match self {
            Slot::Text => "adapter.text".into(),
            Slot::Visual(l) => format!("adapter.visual.l{l}"),
            Slot::ResText => "adapter.res_text".into(),
            Slot::ResVisual(l) => format!("adapter.res_visual.l{l}"),
            Slot::ResCls => "adapter.res_cls".into(),
        }
    }

    fn fields(self) -> &'static [&'static str] {
        if self.is_local() {
            &CONV_FIELDS
        } else {
            &MLP_FIELDS
        }
    }
}

/// Trainable adapters for every role. Nothing is shared across layers or
/// branches.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedAdapters {
    pub dim: usize,
    pub layer_ids: Vec<u32>,
    pub text: MlpAdapter,
    pub visual: Vec<ConvAdapter>,
    pub res_text: MlpAdapter,
    pub res_visual: Vec<ConvAdapter>,
    pub res_cls: MlpAdapter,
}

/// Parameter description used by optimizers and checkpoints.
#[derive(Clone, Debug)]
pub struct ParamInfo {
    pub name: String,
    pub slot: Slot,
}

impl LearnedAdapters {
    pub fn init(dim: usize, layer_ids: &[u32], seed: u64) -> Result<Self> {
        check_dim(dim)?;
        if layer_ids.is_empty() || layer_ids.iter().collect::<BTreeSet<_>>().len() != layer_ids.len() {
            return Err(Error::ConfigInvalid(format!("layer ids {layer_ids:?} must be non-empty and distinct")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = MlpAdapter::init(dim, &mut rng)?;
        let visual = layer_ids.iter().map(|_| ConvAdapter::init(dim, &mut rng)).collect::<Result<_>>()?;
        let res_text = MlpAdapter::init(dim, &mut rng)?;
        let res_visual = layer_ids.iter().map(|_| ConvAdapter::init(dim, &mut rng)).collect::<Result<_>>()?;
        let res_cls = MlpAdapter::init(dim, &mut rng)?;
        Ok(LearnedAdapters {
            dim,
            layer_ids: layer_ids.to_vec(),
            text,
            visual,
            res_text,
            res_visual,
            res_cls,
        })
    }

    /// Every adapter slot in the stable checkpoint order.
    pub fn slots(&self) -> Vec<Slot> {
        let mut out = vec![Slot::Text];
        out.extend(self.layer_ids.iter().map(|&l| Slot::Visual(l)));
        out.push(Slot::ResText);
        out.extend(self.layer_ids.iter().map(|&l| Slot::ResVisual(l)));
        out.push(Slot::ResCls);
        out
    }

    fn layer_pos(&self, l: u32) -> Result<usize> {
        self.layer_ids
            .iter()
            .position(|&x| x == l)
            .ok_or_else(|| Error::shape(format!("no adapter for layer {l}")))
    }

    pub fn slot_tensors(&self, slot: Slot) -> Result<Vec<&Tensor>> {
        Ok(match slot {
            Slot::Text => self.text.tensors().to_vec(),
            Slot::ResText => self.res_text.tensors().to_vec(),
            Slot::ResCls => self.res_cls.tensors().to_vec(),
            Slot::Visual(l) => self.visual[self.layer_pos(l)?].tensors().to_vec(),
            Slot::ResVisual(l) => self.res_visual[self.layer_pos(l)?].tensors().to_vec(),
        })
    }

    pub fn slot_tensors_mut(&mut self, slot: Slot) -> Result<Vec<&mut Tensor>> {
        Ok(match slot {
            Slot::Text => self.text.tensors_mut().into_iter().collect(),
            Slot::ResText => self.res_text.tensors_mut().into_iter().collect(),
            Slot::ResCls => self.res_cls.tensors_mut().into_iter().collect(),
            Slot::Visual(l) => {
                let i = self.layer_pos(l)?;
                self.visual[i].tensors_mut().into_iter().collect()
            }
            Slot::ResVisual(l) => {
                let i = self.layer_pos(l)?;
                self.res_visual[i].tensors_mut().into_iter().collect()
            }
        })
    }

    /// Flat `(name, slot)` listing; index-aligned with [`Self::tensors`].
    pub fn param_infos(&self) -> Vec<ParamInfo> {
        self.slots()
            .into_iter()
            .flat_map(|slot| {
                let prefix = slot.prefix();
                slot.fields().iter().map(move |f| ParamInfo {
                    name: format!("{prefix}.{f}"),
                    slot,
                })
            })
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for slot in self.slots() {
            out.extend(self.slot_tensors(slot).expect("slot listed by the bank"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.text.tensors_mut());
        for a in &mut self.visual {
            out.extend(a.tensors_mut());
        }
        out.extend(self.res_text.tensors_mut());
        for a in &mut self.res_visual {
            out.extend(a.tensors_mut());
        }
        out.extend(self.res_cls.tensors_mut());
        out
    }

    /// Registers every tensor on `tape`; slots whose group fails `trainable`
    /// become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(Group) -> bool) -> BoundAdapters {
        let mut vars = Vec::new();
        let mut offsets = Vec::new();
        for slot in self.slots() {
            offsets.push((slot, vars.len()));
            let train = trainable(slot.group());
            for t in self.slot_tensors(slot).expect("slot listed by the bank") {
                vars.push(if train { tape.param(t) } else { tape.constant(t) });
            }
        }
        BoundAdapters { vars, offsets }
    }

    pub fn write_to(&self, ck: &mut Checkpoint) -> Result<()> {
        for (info, t) in self.param_infos().iter().zip(self.tensors()) {
            ck.insert(info.name.clone(), t.clone())?;
        }
        Ok(())
    }

    /// Overwrites parameters from `ck`. Shapes must match exactly. In strict
    /// mode every parameter must be present and no unknown `adapter.*`
    /// entries may exist.
    pub fn load_from(&mut self, ck: &Checkpoint, strict: bool) -> Result<()> {
        let infos = self.param_infos();
        if strict {
            let known: BTreeSet<&str> = infos.iter().map(|i| i.name.as_str()).collect();
            if let Some(extra) = ck.names().find(|n| n.starts_with("adapter.") && !known.contains(n)) {
                return Err(Error::UnknownEntry(format!("unexpected entry {extra}")));
            }
        }
        for (info, t) in infos.iter().zip(self.tensors_mut()) {
            match ck.get(&info.name) {
                Some(src) => {
                    if src.shape() != t.shape() {
                        return Err(Error::shape(format!(
                            "{}: checkpoint {:?} vs bank {:?}",
                            info.name,
                            src.shape(),
                            t.shape()
                        )));
                    }
                    *t = src.clone();
                }
                None if strict => return Err(Error::UnknownEntry(format!("missing entry {}", info.name))),
                None => {}
            }
        }
        Ok(())
    }

    /// Rebuilds a bank from a checkpoint, inferring `D` and the layer ids.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let dim = ck
            .get("adapter.text.ln.gamma")
            .ok_or_else(|| Error::UnknownEntry("missing entry adapter.text.ln.gamma".into()))?
            .len();
        let mut layers: Vec<u32> = Vec::new();
        for name in ck.names() {
            if let Some(rest) = name.strip_prefix("adapter.visual.l") {
                let id = rest
                    .split('.')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::UnknownEntry(format!("unparseable entry {name}")))?;
                if !layers.contains(&id) {
                    layers.push(id);
                }
            }
        }
        let mut bank = LearnedAdapters::init(dim, &layers, 0)?;
        bank.load_from(ck, true)?;
        Ok(bank)
    }
}

/// Tape handles of a bound [`LearnedAdapters`], in slot order.
#[derive(Clone, Debug)]
pub struct BoundAdapters {
    pub vars: Vec<Var>,
    offsets: Vec<(Slot, usize)>,
}

impl BoundAdapters {
    pub fn slot_vars(&self, slot: Slot) -> Result<&[Var]> {
        let &(_, start) = self
            .offsets
            .iter()
            .find(|(s, _)| *s == slot)
            .ok_or_else(|| Error::shape(format!("no adapter bound for {slot:?}")))?;
        Ok(&self.vars[start..start + slot.fields().len()])
    }

    /// Vector adapters take `[.., D]`; grid adapters need the grid extents.
    pub fn forward(&self, tape: &mut Tape, slot: Slot, x: Var, grid: (usize, usize)) -> Result<Var> {
        let p = self.slot_vars(slot)?;
        if slot.is_local() {
            ConvAdapter::forward(tape, x, p, grid.0, grid.1)
        } else {
            MlpAdapter::forward(tape, x, p)
        }
    }
}

/// Adapters in either identity (training-free) or learned form.
#[derive(Clone, Debug, PartialEq)]
pub enum AdapterBank {
    Identity,
    Learned(LearnedAdapters),
}

impl AdapterBank {
    pub fn is_identity(&self) -> bool {
        matches!(self, AdapterBank::Identity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, ParamSpec, Precision};

    fn forward_mlp(a: &MlpAdapter, x: &Tensor) -> Tensor {
        let mut t = Tape::inference(Precision::F32);
        let xv = t.constant(x);
        let p: Vec<Var> = a.tensors().iter().map(|p| t.constant(p)).collect();
        let y = MlpAdapter::forward(&mut t, xv, &p).unwrap();
        t.to_tensor(y)
    }

    fn forward_conv(a: &ConvAdapter, x: &Tensor, h: usize, w: usize) -> Tensor {
        let mut t = Tape::inference(Precision::F32);
        let xv = t.constant(x);
        let p: Vec<Var> = a.tensors().iter().map(|p| t.constant(p)).collect();
        let y = ConvAdapter::forward(&mut t, xv, &p, h, w).unwrap();
        t.to_tensor(y)
    }

    fn random(seed: u64, shape: Vec<usize>) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(&mut rng, shape, 1)
    }

    #[test]
    fn fresh_adapters_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(1, vec![3, 8]);
        assert!(forward_mlp(&MlpAdapter::init(8, &mut rng).unwrap(), &x).bitwise_eq(&x));
        let g = random(2, vec![6, 8]);
        assert!(forward_conv(&ConvAdapter::init(8, &mut rng).unwrap(), &g, 2, 3).bitwise_eq(&g));
        let one = random(3, vec![1, 8]);
        assert!(forward_conv(&ConvAdapter::init(8, &mut rng).unwrap(), &one, 1, 1).bitwise_eq(&one));
    }

    #[test]
    fn width_must_divide_by_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(MlpAdapter::init(6, &mut rng), Err(Error::ConfigInvalid(_))));
        assert!(matches!(LearnedAdapters::init(10, &[1], 0), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn up_projection_perturbation_moves_one_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = MlpAdapter::init(8, &mut rng).unwrap();
        let eps = 1e-2f32;
        a.w_up.data_mut()[8 + 3] = eps; // hidden unit 1 → output channel 3
        let x = random(6, vec![1, 8]);
        let y = forward_mlp(&a, &x);
        for c in 0..8 {
            if c != 3 {
                assert_eq!(y.data()[c].to_bits(), x.data()[c].to_bits());
            }
        }
        // the change equals eps times hidden activation 1
        let mut t = Tape::inference(Precision::F64);
        let xv = t.constant(&x);
        let p: Vec<Var> = a.tensors().iter().map(|p| t.constant(p)).collect();
        let n = t.layer_norm(xv, p[0], p[1]).unwrap();
        let h = t.linear(n, p[2], p[3]).unwrap();
        let h = t.gelu(h);
        let expected = eps as f64 * t.value(h)[1];
        assert!(((y.data()[3] - x.data()[3]) as f64 - expected).abs() < 1e-6);
    }

    fn perturbed_specs(names: &[&str], tensors: &[&Tensor], seed: u64) -> Vec<ParamSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        names
            .iter()
            .zip(tensors)
            .map(|(n, t)| {
                let data = t.data().iter().map(|&v| v as f64 + rng.random_range(-0.5..0.5)).collect();
                ParamSpec::new(*n, t.shape().to_vec(), data)
            })
            .collect()
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = MlpAdapter::init(8, &mut rng).unwrap();
        let mut specs = perturbed_specs(&MLP_FIELDS, &a.tensors(), 8);
        specs.push(ParamSpec::new("x", vec![2, 8], random(9, vec![2, 8]).to_f64()));
        let target = random(10, vec![16]).to_f64();
        let f = |t: &mut Tape, p: &[Var]| {
            let y = MlpAdapter::forward(t, p[6], &p[..6])?;
            t.weighted_sum(y, target.clone())
        };
        let r = grad_check(f, &specs, 1e-3).unwrap();
        assert!(r.max_rel_err <= 1e-3);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = ConvAdapter::init(8, &mut rng).unwrap();
        let mut specs = perturbed_specs(&CONV_FIELDS, &a.tensors(), 12);
        specs.push(ParamSpec::new("x", vec![9, 8], random(13, vec![9, 8]).to_f64()));
        let target = random(14, vec![72]).to_f64();
        let f = |t: &mut Tape, p: &[Var]| {
            let y = ConvAdapter::forward(t, p[12], &p[..12], 3, 3)?;
            t.weighted_sum(y, target.clone())
        };
        let r = grad_check(f, &specs, 1e-3).unwrap();
        assert!(r.max_rel_err <= 1e-3);
    }

    #[test]
    fn names_are_unique_and_stable() {
        let bank = LearnedAdapters::init(8, &[6, 24], 0).unwrap();
        let names: Vec<String> = bank.param_infos().into_iter().map(|i| i.name).collect();
        assert_eq!(names.len(), 6 + 2 * 12 + 6 + 2 * 12 + 6);
        assert_eq!(names.iter().collect::<BTreeSet<_>>().len(), names.len());
        assert_eq!(names[4], "adapter.text.W_up");
        assert_eq!(names[6], "adapter.visual.l6.ln1.gamma");
        assert_eq!(names.last().unwrap(), "adapter.res_cls.b_up");
        assert_eq!(bank.tensors().len(), names.len());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut bank = LearnedAdapters::init(8, &[6, 24], 3).unwrap();
        bank.res_visual[1].w_up.data_mut()[0] = 0.25;
        let mut ck = Checkpoint::new();
        bank.write_to(&mut ck).unwrap();
        let ck = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(LearnedAdapters::from_checkpoint(&ck).unwrap(), bank);
    }

    #[test]
    fn strict_load_errors() {
        let bank = LearnedAdapters::init(8, &[6], 3).unwrap();
        let mut ck = Checkpoint::new();
        bank.write_to(&mut ck).unwrap();

        let mut partial = Checkpoint::new();
        for (n, t) in ck.entries().iter().skip(1) {
            partial.insert(n.clone(), t.clone()).unwrap();
        }
        let mut target = LearnedAdapters::init(8, &[6], 4).unwrap();
        assert!(matches!(target.load_from(&partial, true), Err(Error::UnknownEntry(_))));
        assert!(target.load_from(&partial, false).is_ok());

        let mut wider = LearnedAdapters::init(12, &[6], 4).unwrap();
        assert!(matches!(wider.load_from(&ck, true), Err(Error::ShapeMismatch(_))));

        let mut extra = ck.clone();
        extra.insert("adapter.bogus.W", Tensor::zeros(vec![1])).unwrap();
        assert!(matches!(target.load_from(&extra, true), Err(Error::UnknownEntry(_))));
    }

    #[test]
    fn frozen_groups_bind_as_constants() {
        let bank = LearnedAdapters::init(8, &[6], 3).unwrap();
        let mut t = Tape::new(Precision::F32);
        let b = bank.bind(&mut t, |g| g == Group::ResText);
        assert!(b.slot_vars(Slot::ResText).unwrap().iter().all(|&v| t.needs_grad(v)));
        assert!(!b.slot_vars(Slot::Visual(6)).unwrap().iter().any(|&v| t.needs_grad(v)));
        assert!(!b.slot_vars(Slot::ResCls).unwrap().iter().any(|&v| t.needs_grad(v)));
    }
}
