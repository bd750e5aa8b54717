//! Adapter fine-tuning: Adam with warmup plus cosine decay, per-group
//! gradient clipping, alternating residual-branch sides, and 1-shot
//! reference sampling.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{Group, LearnedAdapters, ParamInfo};
use crate::error::{Error, Result};
use crate::featureio::{Checkpoint, DatasetManifest, FeatureArchive, MaskImage, Role, TextAnchorSet};
use crate::losses::{loss_total, SupervisionTarget, UpdateSide};
use crate::numerics::{Precision, Tape, Tensor};
use crate::residuals::{build_text_residual, MemoryBank, ResidualBundle, DEFAULT_GAMMA};
use crate::scoring::{adapt_residuals, BranchConfig, Mode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-layer grid adapters.
    pub lr_local: f64,
    /// Text, global and residual-text adapters.
    pub lr_other: f64,
    pub warmup_epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub gamma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch: 16,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            lr_local: 5e-4,
            lr_other: 1e-4,
            warmup_epochs: 1,
            clip_norm: 1.0,
            seed: 0,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if !(self.lr_local > 0.0 && self.lr_other > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0 && self.clip_norm > 0.0) {
            return bad("eps and clip norm must be positive");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be >= 0");
        }
        Ok(())
    }
}

/// Adam moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub shape: Vec<usize>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        AdamState {
            shape: shape.to_vec(),
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One [`AdamState`] per adapter tensor, aligned with
/// [`LearnedAdapters::param_infos`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub params: Vec<AdamState>,
}

impl OptimizerState {
    pub fn for_adapters(a: &LearnedAdapters) -> Self {
        OptimizerState {
            params: a.tensors().iter().map(|t| AdamState::new(t.shape())).collect(),
        }
    }

    pub fn write_to(&self, infos: &[ParamInfo], ck: &mut Checkpoint) -> Result<()> {
        for (info, s) in infos.iter().zip(&self.params) {
            ck.insert(format!("optim.{}.m", info.name), Tensor::from_f64(s.shape.clone(), &s.m)?)?;
            ck.insert(format!("optim.{}.v", info.name), Tensor::from_f64(s.shape.clone(), &s.v)?)?;
            ck.insert(format!("optim.{}.step", info.name), u64_tensor(s.step))?;
        }
        Ok(())
    }
}

/// A `u64` as two `f32` bit patterns (low word first).
pub fn u64_tensor(x: u64) -> Tensor {
    Tensor::vector(vec![f32::from_bits(x as u32), f32::from_bits((x >> 32) as u32)])
}

pub fn tensor_u64(t: &Tensor) -> Option<u64> {
    match t.data() {
        [lo, hi] => Some(lo.to_bits() as u64 | (hi.to_bits() as u64) << 32),
        _ => None,
    }
}

/// Bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut Tensor, grad: &[f64], state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if grad.len() != param.len() || state.shape != param.shape() {
        return Err(Error::shape(format!(
            "Adam: param {:?}, grad {}, state {:?}",
            param.shape(),
            grad.len(),
            state.shape
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in param.data_mut().iter_mut().enumerate() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        *p = (*p as f64 - lr * mhat / (vhat.sqrt() + cfg.eps)) as f32;
    }
    Ok(())
}

/// Linear warmup from 0, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let p = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (PI * p).cos())
}

/// Rescales the group jointly when its L2 norm exceeds `max_norm`. Returns
/// the norm before clipping.
pub fn clip_group_norm(grads: &mut [&mut Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Residual-branch side trained in `epoch` (0-indexed): even epochs move
/// the visual side, odd epochs the text side.
pub fn side_for_epoch(epoch: usize) -> UpdateSide {
    if epoch % 2 == 0 {
        UpdateSide::Visual
    } else {
        UpdateSide::Text
    }
}

pub fn group_trainable(group: Group, side: UpdateSide) -> bool {
    match group {
        Group::Text | Group::Visual => true,
        Group::ResText => side == UpdateSide::Text,
        Group::ResVisual => side == UpdateSide::Visual,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub side: String,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_text: f64,
    pub mean_vis: f64,
    pub mean_res: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub seed: u64,
    pub samples: usize,
    pub config: TrainConfig,
    pub epochs: Vec<EpochLog>,
}

struct TrainSample {
    archive: usize,
    target: SupervisionTarget,
    candidates: Vec<usize>,
}

/// Training state over a loaded manifest.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub branch: BranchConfig,
    pub adapters: LearnedAdapters,
    pub optimizer: OptimizerState,
    archives: Vec<FeatureArchive>,
    samples: Vec<TrainSample>,
    text: Vec<f32>,
    rng: ChaCha8Rng,
    step: usize,
    log: Vec<EpochLog>,
}

impl Trainer {
    /// Loads every `train` sample and its candidate references. A query's
    /// candidates are the category's reference pool plus its other normal
    /// training samples.
    pub fn new(manifest: &DatasetManifest, anchors: &TextAnchorSet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        manifest.validate(false)?;
        let mut archives = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut load = |id: &str, rel: &str| -> Result<usize> {
            if let Some(&i) = index.get(id) {
                return Ok(i);
            }
            let path = manifest.resolve(rel);
            let a = FeatureArchive::read(&path)?;
            if let Some(first) = archives.first() {
                a.check_compatible(first).map_err(|e| e.at(&path))?;
            }
            archives.push(a);
            index.insert(id.to_string(), archives.len() - 1);
            Ok(archives.len() - 1)
        };

        let train: Vec<_> = manifest.with_role(Role::Train).collect();
        if train.is_empty() {
            return Err(Error::ManifestInvalid("no training samples".into()));
        }
        let mut samples = Vec::with_capacity(train.len());
        for s in &train {
            let archive = load(&s.id, &s.features)?;
            let mut pool: Vec<&_> = manifest.reference_pool(&s.category);
            pool.extend(train.iter().copied().filter(|t| t.category == s.category && t.label == 0));
            let mut candidates = Vec::new();
            for p in pool.into_iter().filter(|p| p.id != s.id) {
                let i = load(&p.id, &p.features)?;
                if !candidates.contains(&i) {
                    candidates.push(i);
                }
            }
            if candidates.is_empty() {
                return Err(Error::ManifestInvalid(format!(
                    "{}: no other normal image of category {} to use as reference",
                    s.id, s.category
                )));
            }
            samples.push((s, archive, candidates));
        }

        let first = &archives[0];
        anchors.check_dim(first.dim)?;
        let mut branch = BranchConfig::for_mode(Mode::Learned, &first.layer_ids)?;
        branch.gamma = cfg.gamma;
        let (gh, gw) = (first.grid_h, first.grid_w);
        let samples = samples
            .into_iter()
            .map(|(s, archive, candidates)| {
                let n = gh * gw;
                let target = match (&s.mask, s.label) {
                    (_, 0) => SupervisionTarget::normal(n),
                    (Some(m), _) => {
                        let path = manifest.resolve(m);
                        let mask = MaskImage::read(&path)?;
                        SupervisionTarget::from_mask(1, &mask, gh, gw).map_err(|e| e.at(&path))?
                    }
                    // no mask: only the image-level terms apply
                    (None, _) => SupervisionTarget::from_labels(1, vec![crate::losses::PatchLabel::Ignore; n]),
                };
                Ok(TrainSample {
                    archive,
                    target,
                    candidates,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let adapters = LearnedAdapters::init(first.dim, &first.layer_ids, cfg.seed)?;
        let optimizer = OptimizerState::for_adapters(&adapters);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            text: build_text_residual(anchors)?,
            cfg,
            branch,
            adapters,
            optimizer,
            archives,
            samples,
            rng,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.cfg.batch)
    }

    pub fn epochs_done(&self) -> usize {
        self.log.len()
    }

    /// Loss parts and flat per-tensor gradients of one (query, reference)
    /// pair. Frozen tensors get `None`.
    fn sample_grads(&self, query: usize, reference: usize, target: &SupervisionTarget, side: UpdateSide) -> Result<([f64; 4], Vec<Option<Vec<f64>>>)> {
        let q = &self.archives[query];
        let bank = MemoryBank::build(&[&self.archives[reference]], &self.branch.bank_layers())?;
        let bundle = ResidualBundle::compute(q, &bank, &self.text, self.branch.gamma)?;
        let mut tape = Tape::new(Precision::F64);
        let bound = self.adapters.bind(&mut tape, |g| group_trainable(g, side));
        let adapted = adapt_residuals(&mut tape, Some(&bound), &bundle, &self.branch, (q.grid_h, q.grid_w))?;
        let parts = loss_total(&mut tape, q, &bundle, &adapted, &self.branch, target, side)?;
        let grads = tape.backward(parts.total)?;
        let flat = bound.vars.iter().map(|&v| grads.get(v).map(|g| g.to_vec())).collect();
        let losses = [parts.total, parts.text, parts.vis, parts.res].map(|v| tape.scalar(v));
        Ok((losses, flat))
    }

    /// Runs the next epoch and returns its log entry.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.log.len();
        let side = side_for_epoch(epoch);
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut self.rng);
        let picks: Vec<(usize, usize)> = order
            .iter()
            .map(|&i| {
                let c = &self.samples[i].candidates;
                (i, c[self.rng.random_range(0..c.len())])
            })
            .collect();

        let infos = self.adapters.param_infos();
        let total_steps = self.cfg.epochs * self.steps_per_epoch();
        let warmup = self.cfg.warmup_epochs * self.steps_per_epoch();
        let mut sums = [0.0f64; 4];
        let mut steps = 0;
        for batch in picks.chunks(self.cfg.batch) {
            let results = batch
                .par_iter()
                .map(|&(i, r)| {
                    let s = &self.samples[i];
                    self.sample_grads(s.archive, r, &s.target, side)
                })
                .collect::<Result<Vec<_>>>()?;

            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; infos.len()];
            for (losses, flat) in &results {
                for (s, l) in sums.iter_mut().zip(losses) {
                    *s += l;
                }
                for (acc, g) in grads.iter_mut().zip(flat) {
                    if let Some(g) = g {
                        let acc = acc.get_or_insert_with(|| vec![0.0; g.len()]);
                        acc.iter_mut().zip(g).for_each(|(a, x)| *a += scale * x);
                    }
                }
            }

            for group in Group::ALL.into_iter().filter(|&g| group_trainable(g, side)) {
                let mut members: Vec<&mut Vec<f64>> = Vec::new();
                for (info, (g, t)) in infos.iter().zip(grads.iter_mut().zip(self.adapters.tensors())) {
                    if info.slot.group() == group {
                        members.push(g.get_or_insert_with(|| vec![0.0; t.len()]));
                    }
                }
                clip_group_norm(&mut members, self.cfg.clip_norm);
            }

            let frac = lr_schedule(self.step, total_steps, warmup, 1.0);
            for ((info, g), (p, st)) in infos
                .iter()
                .zip(&grads)
                .zip(self.adapters.tensors_mut().into_iter().zip(&mut self.optimizer.params))
            {
                if !group_trainable(info.slot.group(), side) {
                    continue;
                }
                let base = if info.slot.is_local() { self.cfg.lr_local } else { self.cfg.lr_other };
                let g = g.as_ref().expect("trainable groups carry gradients after clipping");
                adam_step(p, g, st, frac * base, &self.cfg)?;
            }
            self.step += 1;
            steps += 1;
        }

        let n = picks.len() as f64;
        let entry = EpochLog {
            epoch,
            side: match side {
                UpdateSide::Visual => "visual".into(),
                UpdateSide::Text => "text".into(),
            },
            steps,
            mean_loss: sums[0] / n,
            mean_text: sums[1] / n,
            mean_vis: sums[2] / n,
            mean_res: sums[3] / n,
        };
        if !entry.mean_loss.is_finite() {
            return Err(Error::ConfigInvalid(format!("epoch {epoch}: loss diverged")));
        }
        log::info!(
            "epoch {epoch} ({}): loss {:.5} text {:.5} vis {:.5} res {:.5}",
            entry.side,
            entry.mean_loss,
            entry.mean_text,
            entry.mean_vis,
            entry.mean_res
        );
        self.log.push(entry.clone());
        Ok(entry)
    }

    pub fn training_log(&self) -> TrainingLog {
        TrainingLog {
            seed: self.cfg.seed,
            samples: self.samples.len(),
            config: self.cfg.clone(),
            epochs: self.log.clone(),
        }
    }

    /// Adapter weights, optimizer moments and the seed.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        self.adapters.write_to(&mut ck)?;
        self.optimizer.write_to(&self.adapters.param_infos(), &mut ck)?;
        ck.insert("meta.seed", u64_tensor(self.cfg.seed))?;
        Ok(ck)
    }
}

/// Result of a full training run.
pub struct TrainOutput {
    pub adapters: LearnedAdapters,
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
}

pub fn train(manifest: &DatasetManifest, anchors: &TextAnchorSet, cfg: TrainConfig) -> Result<TrainOutput> {
    let mut t = Trainer::new(manifest, anchors, cfg)?;
    for _ in 0..t.cfg.epochs {
        t.run_epoch()?;
    }
    Ok(TrainOutput {
        checkpoint: t.checkpoint()?,
        log: t.training_log(),
        adapters: t.adapters,
    })
}

pub fn write_log(log: &TrainingLog, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(log)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::from(e).at(path))
}
