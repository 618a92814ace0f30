//! Multi-scale pose loss, Adam, and the training loop.
//!
//! The per-level loss is
//! `|t_gt − t|₁·e^(−s_x) + s_x + ‖q_gt − q/‖q‖‖₂·e^(−s_q) + s_q`
//! with `s_x`, `s_q` learned and shared by all levels; the total is
//! `Σ α_l·loss_l`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{self, array4, flag, join, value};
use crate::error::{Error, Result};
use crate::geom::Pose;
use crate::headmask::{normalize_quat, PoseVars};
use crate::kittio::{augment, AugmentSigmas, Dataset, FramePair};
use crate::net::{derive_seed, sample_pair, Net, NetConfig, NetOutput};
use crate::pcops::{FpsStart, PointCloud};
use crate::tensor::{write_atomic, Cursor, ParamStore, Tape, Tensor, Var};

pub const S_X: &str = "loss.s_x";
pub const S_Q: &str = "loss.s_q";

/// Which output level `alphas[0]` applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaOrder {
    FinestFirst,
    CoarsestFirst,
}

impl std::str::FromStr for AlphaOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finest_first" => Ok(AlphaOrder::FinestFirst),
            "coarsest_first" => Ok(AlphaOrder::CoarsestFirst),
            other => Err(Error::Config(format!("unknown alpha_order {other:?}"))),
        }
    }
}

impl std::fmt::Display for AlphaOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AlphaOrder::FinestFirst => "finest_first",
            AlphaOrder::CoarsestFirst => "coarsest_first",
        })
    }
}

/// Fixed level weights. The learnable `s_x`, `s_q` live in the
/// [`ParamStore`] under [`S_X`] and [`S_Q`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    pub alphas: [f64; 4],
    pub order: AlphaOrder,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            alphas: [1.6, 0.8, 0.4, 0.2],
            order: AlphaOrder::FinestFirst,
        }
    }
}

impl LossParams {
    /// Weight for 1-based output level `level` (1 = finest).
    pub fn alpha(&self, level: usize) -> Result<f64> {
        if !(1..=4).contains(&level) {
            return Err(Error::Invalid(format!("no loss weight for level {level}")));
        }
        Ok(match self.order {
            AlphaOrder::FinestFirst => self.alphas[level - 1],
            AlphaOrder::CoarsestFirst => self.alphas[4 - level],
        })
    }
}

pub fn register_loss_params(store: &mut ParamStore, s_x: f64, s_q: f64) -> Result<()> {
    store.insert(S_X, Tensor::scalar(s_x), true)?;
    store.insert(S_Q, Tensor::scalar(s_q), true)
}

/// `q/‖q‖` multiplied by the sign that makes `w ≥ 0`; the sign is treated
/// as a constant.
pub fn canonical_quat(tape: &mut Tape, q: Var) -> Result<Var> {
    let n = normalize_quat(tape, q)?;
    let v = tape.value(n).data();
    let first = v.iter().copied().find(|&c| c != 0.0).unwrap_or(1.0);
    let sign = if v[0] > 0.0 || (v[0] == 0.0 && first > 0.0) { 1.0 } else { -1.0 };
    Ok(if sign > 0.0 { n } else { tape.scale(n, -1.0) })
}

/// Loss for one predicted pose against `gt`.
pub fn level_loss(tape: &mut Tape, pred: &PoseVars, gt: &Pose, s_x: Var, s_q: Var) -> Result<Var> {
    let t_gt = tape.constant(Tensor::from_vec(gt.t.to_vec()));
    let q_gt = tape.constant(Tensor::from_vec(gt.q().canonical().to_array().to_vec()));
    let dt = tape.sub(t_gt, pred.t)?;
    let adt = tape.abs(dt);
    let l_t = tape.sum_all(adt);
    let q = canonical_quat(tape, pred.q)?;
    let dq = tape.sub(q_gt, q)?;
    let nq = tape.norm_last(dq)?;
    let l_q = tape.sum_all(nq);
    let term = |tape: &mut Tape, l: Var, s: Var| -> Result<Var> {
        let ns = tape.neg(s);
        let w = tape.exp(ns);
        let lw = tape.mul(l, w)?;
        tape.add(lw, s)
    };
    let a = term(tape, l_t, s_x)?;
    let b = term(tape, l_q, s_q)?;
    tape.add(a, b)
}

/// Weighted total and the per-level terms, keyed by 1-based level.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub levels: Vec<(usize, Var)>,
}

pub fn total_loss(tape: &mut Tape, out: &NetOutput, gt: &Pose, lp: &LossParams, s_x: Var, s_q: Var) -> Result<LossTerms> {
    if out.levels.is_empty() {
        return Err(Error::Invalid("total_loss: no output levels".into()));
    }
    let mut levels = Vec::with_capacity(out.levels.len());
    let mut total: Option<Var> = None;
    for lv in &out.levels {
        let alpha = lp.alpha(lv.level)?;
        let l = level_loss(tape, &lv.pose, gt, s_x, s_q)?;
        let w = tape.scale(l, alpha);
        total = Some(match total {
            Some(acc) => tape.add(acc, w)?,
            None => w,
        });
        levels.push((lv.level, l));
    }
    Ok(LossTerms {
        total: total.expect("non-empty"),
        levels,
    })
}

/// Adam hyperparameters and the step-wise exponential learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: f64,
    pub decay_steps: u64,
    pub lr_min: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.7,
            decay_steps: 200_000,
            lr_min: 1e-5,
        }
    }
}

impl AdamConfig {
    /// `max(lr·decay^⌊step/decay_steps⌋, lr_min)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let k = (step / self.decay_steps.max(1)) as i32;
        (self.lr * self.decay.powi(k)).max(self.lr_min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    /// Applied updates.
    pub step: u64,
    /// Updates refused because of non-finite gradients.
    pub rejected: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    Rejected { param: String },
}

const OPTIM_MAGIC: &str = "pcodom-optim";
const CHECKPOINT_MAGIC: &str = "pcodom-checkpoint";

impl OptimState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = store
            .iter()
            .filter(|p| p.trainable)
            .map(|p| (p.name.clone(), vec![0.0; p.tensor.len()]))
            .collect();
        OptimState {
            config,
            step: 0,
            rejected: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    fn moments_store(map: &BTreeMap<String, Vec<f64>>) -> ParamStore {
        let mut s = ParamStore::new();
        for (k, v) in map {
            s.insert(k.clone(), Tensor::from_vec(v.clone()), false).expect("unique names");
        }
        s
    }

    fn moments_map(store: &ParamStore) -> BTreeMap<String, Vec<f64>> {
        store.iter().map(|p| (p.name.clone(), p.tensor.data().to_vec())).collect()
    }

    /// Text header with bit-exact hyperparameters, then the two moment
    /// registries in the parameter format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut head = format!("{OPTIM_MAGIC}\nversion 1\nstep {}\nrejected {}\n", self.step, self.rejected);
        writeln!(head, "decay_steps {}", c.decay_steps).unwrap();
        for (k, v) in [("lr", c.lr), ("beta1", c.beta1), ("beta2", c.beta2), ("eps", c.eps), ("decay", c.decay), ("lr_min", c.lr_min)] {
            writeln!(head, "{k} {:016x}", v.to_bits()).unwrap();
        }
        let mut out = head.into_bytes();
        for map in [&self.m, &self.v] {
            let b = Self::moments_store(map).to_bytes();
            out.extend_from_slice(format!("block {}\n", b.len()).as_bytes());
            out.extend_from_slice(&b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.line()? != OPTIM_MAGIC {
            return Err(Error::Invalid("optimizer state: missing magic header".into()));
        }
        if cur.keyed("version")? != 1 {
            return Err(Error::Invalid("optimizer state: unsupported version".into()));
        }
        let step = cur.keyed("step")? as u64;
        let rejected = cur.keyed("rejected")? as u64;
        let decay_steps = cur.keyed("decay_steps")? as u64;
        let mut f = |key: &str| -> Result<f64> {
            let line = cur.line()?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .and_then(|h| u64::from_str_radix(h, 16).ok())
                .map(f64::from_bits)
                .ok_or_else(|| Error::Invalid(format!("optimizer state: expected `{key}`, got {line:?}")))
        };
        let config = AdamConfig {
            lr: f("lr")?,
            beta1: f("beta1")?,
            beta2: f("beta2")?,
            eps: f("eps")?,
            decay: f("decay")?,
            decay_steps,
            lr_min: f("lr_min")?,
        };
        let mut block = || -> Result<BTreeMap<String, Vec<f64>>> {
            let n = cur.keyed("block")?;
            Ok(Self::moments_map(&ParamStore::from_bytes(cur.take(n)?)?))
        };
        let m = block()?;
        let v = block()?;
        Ok(OptimState {
            config,
            step,
            rejected,
            m,
            v,
        })
    }
}

/// One bias-corrected Adam update of every trainable parameter. Missing
/// gradients count as zero. Any non-finite gradient rejects the whole step
/// and leaves parameters and state untouched apart from `rejected`.
pub fn optimizer_step(store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut OptimState) -> Result<StepOutcome> {
    for (name, g) in grads {
        if !g.all_finite() {
            state.rejected += 1;
            log::warn!("step {}: non-finite gradient for {name}, update skipped", state.step);
            return Ok(StepOutcome::Rejected { param: name.clone() });
        }
    }
    let c = state.config;
    let lr = state.lr();
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for p in store.iter_mut().filter(|p| p.trainable) {
        let m = state
            .m
            .get_mut(&p.name)
            .ok_or_else(|| Error::ParamMismatch(format!("{}: no optimizer state", p.name)))?;
        let v = state.v.get_mut(&p.name).expect("m and v share keys");
        if m.len() != p.tensor.len() {
            return Err(Error::ParamMismatch(format!("{}: optimizer state has {} values, parameter {}", p.name, m.len(), p.tensor.len())));
        }
        let g = grads.get(&p.name);
        if let Some(g) = g {
            if g.len() != p.tensor.len() {
                return Err(Error::shape("optimizer_step", p.tensor.shape(), g.shape()));
            }
        }
        for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            *w -= lr * mh / (vh.sqrt() + c.eps);
        }
    }
    state.step += 1;
    Ok(StepOutcome::Applied)
}

/// Training settings other than the network shape.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Total number of applied updates to reach.
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub s_x: f64,
    pub s_q: f64,
    pub loss: LossParams,
    pub augment: bool,
    pub augment_sigmas: AugmentSigmas,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            adam: AdamConfig::default(),
            s_x: 0.0,
            s_q: -2.5,
            loss: LossParams::default(),
            augment: true,
            augment_sigmas: AugmentSigmas::default(),
            checkpoint_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "steps" => self.steps = value(key, v)?,
            "batch_size" => self.batch_size = value(key, v)?,
            "lr" => self.adam.lr = value(key, v)?,
            "beta1" => self.adam.beta1 = value(key, v)?,
            "beta2" => self.adam.beta2 = value(key, v)?,
            "eps" => self.adam.eps = value(key, v)?,
            "lr_decay" => self.adam.decay = value(key, v)?,
            "lr_decay_steps" => self.adam.decay_steps = value(key, v)?,
            "lr_min" => self.adam.lr_min = value(key, v)?,
            "s_x" => self.s_x = value(key, v)?,
            "s_q" => self.s_q = value(key, v)?,
            "alphas" => self.loss.alphas = array4(key, v)?,
            "alpha_order" => self.loss.order = value(key, v)?,
            "augment" => self.augment = flag(key, v)?,
            "augment_rot_deg" => self.augment_sigmas.rot_deg = value(key, v)?,
            "augment_trans" => self.augment_sigmas.trans = value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = value(key, v)?,
            "seed" => self.seed = value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(a.lr > 0.0 && a.lr_min >= 0.0 && a.decay > 0.0 && a.decay_steps > 0 && a.eps > 0.0) {
            return bad("lr, lr_decay, lr_decay_steps and eps must be positive");
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return bad("beta1 and beta2 must be in [0, 1)");
        }
        if !self.loss.alphas.iter().all(|&x| x > 0.0) {
            return bad("alphas must be positive");
        }
        if self.augment_sigmas.rot_deg < 0.0 || self.augment_sigmas.trans < 0.0 {
            return bad("augmentation sigmas must be non-negative");
        }
        if !(self.s_x.is_finite() && self.s_q.is_finite()) {
            return bad("s_x and s_q must be finite");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let a = &self.adam;
        let mut s = String::new();
        writeln!(s, "steps = {}", self.steps).unwrap();
        writeln!(s, "batch_size = {}", self.batch_size).unwrap();
        writeln!(s, "lr = {}", a.lr).unwrap();
        writeln!(s, "beta1 = {}", a.beta1).unwrap();
        writeln!(s, "beta2 = {}", a.beta2).unwrap();
        writeln!(s, "eps = {}", a.eps).unwrap();
        writeln!(s, "lr_decay = {}", a.decay).unwrap();
        writeln!(s, "lr_decay_steps = {}", a.decay_steps).unwrap();
        writeln!(s, "lr_min = {}", a.lr_min).unwrap();
        writeln!(s, "s_x = {}", self.s_x).unwrap();
        writeln!(s, "s_q = {}", self.s_q).unwrap();
        writeln!(s, "alphas = {}", join(&self.loss.alphas)).unwrap();
        writeln!(s, "alpha_order = {}", self.loss.order).unwrap();
        writeln!(s, "augment = {}", self.augment).unwrap();
        writeln!(s, "augment_rot_deg = {}", self.augment_sigmas.rot_deg).unwrap();
        writeln!(s, "augment_trans = {}", self.augment_sigmas.trans).unwrap();
        writeln!(s, "checkpoint_every = {}", self.checkpoint_every).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        s
    }
}

/// Network and training settings read from one `key = value` file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        Ok(RunConfig {
            net: NetConfig::preset(name)?,
            train: TrainConfig::default(),
        })
    }

    /// An optional first `preset = desk|full` picks the base; every other
    /// key must belong to the network or training settings.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, e) in config::parse_entries(text)?.iter().enumerate() {
            if e.key == "preset" {
                if i != 0 {
                    return Err(Error::Config(format!("line {}: `preset` must be the first key", e.line)));
                }
                cfg.net = NetConfig::preset(&e.value)?;
            } else {
                cfg.set(&e.key, &e.value)
                    .map_err(|err| Error::Config(format!("line {}: {err}", e.line)))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one setting, rejecting unknown keys by name.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if self.net.set(key, v)? || self.train.set(key, v)? {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key `{key}`")))
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()
    }

    pub fn to_text(&self) -> String {
        format!("{}{}", self.net.to_text(), self.train.to_text())
    }
}

/// Everything needed to resume: the config text it was trained with, the
/// parameters and the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub optim: OptimState,
}

impl Checkpoint {
    /// `pcodom-checkpoint`, `version 1`, `step N`, then three length-prefixed
    /// blocks: config text, parameters, optimizer state.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{CHECKPOINT_MAGIC}\nversion 1\nstep {}\n", self.optim.step).into_bytes();
        for block in [self.config.to_text().into_bytes(), self.params.to_bytes(), self.optim.to_bytes()] {
            out.extend_from_slice(format!("block {}\n", block.len()).as_bytes());
            out.extend_from_slice(&block);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.line()? != CHECKPOINT_MAGIC {
            return Err(Error::Invalid("checkpoint: missing magic header".into()));
        }
        if cur.keyed("version")? != 1 {
            return Err(Error::Invalid("checkpoint: unsupported version".into()));
        }
        let step = cur.keyed("step")? as u64;
        let mut block = || -> Result<&[u8]> {
            let n = cur.keyed("block")?;
            cur.take(n)
        };
        let text = std::str::from_utf8(block()?).map_err(|_| Error::Invalid("checkpoint: config is not UTF-8".into()))?;
        let config = RunConfig::from_text(text)?;
        let params = ParamStore::from_bytes(block()?)?;
        let optim = OptimState::from_bytes(block()?)?;
        if optim.step != step {
            return Err(Error::Invalid(format!("checkpoint: header step {step}, optimizer step {}", optim.step)));
        }
        Ok(Checkpoint { config, params, optim })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// Loss values of one update. `levels[l-1]` holds the level-`l` loss when
/// that level is produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub levels: [Option<f64>; 4],
    pub s_x: f64,
    pub s_q: f64,
    pub outcome: StepOutcome,
}

pub const LOG_COLUMNS: [&str; 9] = ["step", "lr", "total", "loss_l1", "loss_l2", "loss_l3", "loss_l4", "s_x", "s_q"];

/// Batch-mean loss and gradients.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub total: f64,
    pub levels: [Option<f64>; 4],
    pub grads: BTreeMap<String, Tensor>,
}

/// A prepared training example: both clouds at `n_points`, ground truth
/// and the FPS start.
#[derive(Clone, Debug)]
pub struct Example {
    pub pc1: PointCloud,
    pub pc2: PointCloud,
    pub gt: Pose,
    pub fps_seed: u64,
}

pub struct Trainer {
    pub config: RunConfig,
    pub net: Net,
    pub store: ParamStore,
    pub optim: OptimState,
}

/// Consecutive rejected updates tolerated before training aborts.
const MAX_REJECTED_RUN: u64 = 50;

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let net = Net::new(config.net.clone(), &mut store, config.train.seed)?;
        register_loss_params(&mut store, config.train.s_x, config.train.s_q)?;
        let optim = OptimState::new(config.train.adam, &store);
        Ok(Trainer { config, net, store, optim })
    }

    /// Rebuilds the network from the checkpoint's config and loads its
    /// parameters; shape or name differences are reported as a mismatch.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ck.config)?;
        t.store.assign_from(&ck.params)?;
        let fresh = OptimState::new(t.optim.config, &t.store);
        if fresh.m.keys().ne(ck.optim.m.keys()) {
            return Err(Error::ParamMismatch("optimizer state does not match parameters".into()));
        }
        t.optim = ck.optim;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.store.clone(),
            optim: self.optim.clone(),
        }
    }

    /// Number of batches drawn so far, applied or not.
    pub fn iteration(&self) -> u64 {
        self.optim.step + self.optim.rejected
    }

    /// Dataset indices for the batch of `iteration`: a seeded permutation
    /// per epoch, read consecutively.
    pub fn batch_indices(&self, len: usize, iteration: u64) -> Vec<usize> {
        let b = self.config.train.batch_size as u64;
        let mut perms: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        (0..b)
            .map(|j| {
                let g = iteration * b + j;
                let epoch = g / len as u64;
                let perm = perms.entry(epoch).or_insert_with(|| epoch_permutation(len, derive_seed(self.config.train.seed, epoch)));
                perm[(g % len as u64) as usize]
            })
            .collect()
    }

    pub fn prepare(&self, pair: &FramePair, iteration: u64, slot: usize) -> Result<Example> {
        let seed = derive_seed(derive_seed(self.config.train.seed ^ 0x7472_6169_6e00, iteration), slot as u64);
        let pair = if self.config.train.augment {
            augment(pair, self.config.train.augment_sigmas, derive_seed(seed, 10))
        } else {
            pair.clone()
        };
        let (pc1, pc2) = sample_pair(&pair.pc1, &pair.pc2, self.config.net.n_points, seed)?;
        Ok(Example {
            pc1,
            pc2,
            gt: pair.gt,
            fps_seed: derive_seed(seed, 3),
        })
    }

    /// Loss and parameter gradients of one example.
    pub fn example_gradients(&self, ex: &Example) -> Result<BatchResult> {
        let mut tape = Tape::new();
        let out = self.net.forward(&mut tape, &self.store, &ex.pc1, &ex.pc2, FpsStart::Seeded(ex.fps_seed))?;
        let s_x = tape.param(self.store.expect(S_X));
        let s_q = tape.param(self.store.expect(S_Q));
        let terms = total_loss(&mut tape, &out, &ex.gt, &self.config.train.loss, s_x, s_q)?;
        let grads = tape.backward(terms.total)?;
        let mut levels = [None; 4];
        for &(l, v) in &terms.levels {
            levels[l - 1] = Some(tape.value(v).item());
        }
        Ok(BatchResult {
            total: tape.value(terms.total).item(),
            levels,
            grads: grads.param_map(),
        })
    }

    /// Mean over examples, evaluated in parallel and reduced in order.
    pub fn batch_gradients(&self, examples: &[Example]) -> Result<BatchResult> {
        let parts: Vec<BatchResult> = examples
            .par_iter()
            .map(|ex| self.example_gradients(ex))
            .collect::<Result<_>>()?;
        let n = parts.len() as f64;
        let mut acc = BatchResult {
            total: 0.0,
            levels: [None; 4],
            grads: BTreeMap::new(),
        };
        for p in &parts {
            acc.total += p.total / n;
            for (a, b) in acc.levels.iter_mut().zip(p.levels) {
                if let Some(b) = b {
                    *a = Some(a.unwrap_or(0.0) + b / n);
                }
            }
            for (name, g) in &p.grads {
                match acc.grads.get_mut(name) {
                    Some(t) => {
                        for (x, y) in t.data_mut().iter_mut().zip(g.data()) {
                            *x += y / n;
                        }
                    }
                    None => {
                        acc.grads.insert(name.clone(), g.map(|y| y / n));
                    }
                }
            }
        }
        Ok(acc)
    }

    /// Draws the next batch, computes gradients and applies one update.
    pub fn train_step(&mut self, data: &dyn Dataset) -> Result<StepRecord> {
        let it = self.iteration();
        let idx = self.batch_indices(data.len(), it);
        let examples = idx
            .iter()
            .enumerate()
            .map(|(slot, &i)| self.prepare(&data.get(i)?, it, slot))
            .collect::<Result<Vec<_>>>()?;
        let lr = self.optim.lr();
        let batch = self.batch_gradients(&examples)?;
        let outcome = if batch.total.is_finite() {
            optimizer_step(&mut self.store, &batch.grads, &mut self.optim)?
        } else {
            self.optim.rejected += 1;
            log::warn!("step {}: non-finite loss, update skipped", self.optim.step);
            StepOutcome::Rejected { param: "loss".into() }
        };
        Ok(StepRecord {
            step: self.optim.step,
            lr,
            total: batch.total,
            levels: batch.levels,
            s_x: self.store.expect(S_X).tensor.item(),
            s_q: self.store.expect(S_Q).tensor.item(),
            outcome,
        })
    }
}

fn epoch_permutation(len: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Where a training run writes its files.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        RunPaths {
            checkpoint: dir.join("checkpoint.bin"),
            log: dir.join("train_log.csv"),
        }
    }
}

fn log_row(r: &StepRecord) -> Vec<String> {
    let mut row = vec![r.step.to_string(), r.lr.to_string(), r.total.to_string()];
    row.extend(r.levels.iter().map(|l| l.map_or_else(String::new, |v| v.to_string())));
    row.push(r.s_x.to_string());
    row.push(r.s_q.to_string());
    row
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    pub applied: u64,
    pub rejected: u64,
}

/// Runs updates until `config.train.steps` have been applied. Appends one
/// CSV row per attempted update and writes an atomic checkpoint every
/// `checkpoint_every` applied steps and at the end. An empty dataset ends
/// immediately.
pub fn train_loop(
    trainer: &mut Trainer,
    data: &dyn Dataset,
    paths: Option<&RunPaths>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainSummary> {
    let mut summary = TrainSummary::default();
    if data.is_empty() || trainer.optim.step >= trainer.config.train.steps {
        return Ok(summary);
    }
    let mut writer = match paths {
        Some(p) => {
            let fresh = !p.log.exists();
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p.log)
                .map_err(|e| Error::io(&p.log, e))?;
            let mut w = csv::Writer::from_writer(file);
            if fresh {
                w.write_record(LOG_COLUMNS)?;
            }
            Some(w)
        }
        None => None,
    };
    let every = trainer.config.train.checkpoint_every;
    let mut rejected_run = 0;
    while trainer.optim.step < trainer.config.train.steps {
        let rec = trainer.train_step(data)?;
        if let Some(w) = writer.as_mut() {
            w.write_record(log_row(&rec))?;
            w.flush().map_err(|e| Error::io(&paths.unwrap().log, e))?;
        }
        on_step(&rec);
        match rec.outcome {
            StepOutcome::Applied => {
                rejected_run = 0;
                summary.applied += 1;
                if let Some(p) = paths {
                    if every > 0 && trainer.optim.step % every == 0 {
                        trainer.checkpoint().save(&p.checkpoint)?;
                    }
                }
            }
            StepOutcome::Rejected { .. } => {
                rejected_run += 1;
                summary.rejected += 1;
                if rejected_run >= MAX_REJECTED_RUN {
                    return Err(Error::Invalid(format!("{MAX_REJECTED_RUN} consecutive updates rejected")));
                }
            }
        }
        summary.records.push(rec);
    }
    if let Some(p) = paths {
        trainer.checkpoint().save(&p.checkpoint)?;
    }
    Ok(summary)
}
