//! Embedding mask, mask-weighted pose regression and the warp-refinement
//! block that carries a coarse pose estimate one level denser.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::costvol::{CostVolume, CostVolumeKind};
use crate::error::{Error, Result};
use crate::geom::{Pose, Quaternion};
use crate::nn::Mlp;
use crate::pcops::{set_upconv, PointSet};
use crate::tensor::{write_atomic, ParamStore, Tape, Tensor, Var};

/// A pose recorded on a tape: `q: [4]` (unit, scalar first) and `t: [3]`.
#[derive(Clone, Copy, Debug)]
pub struct PoseVars {
    pub q: Var,
    pub t: Var,
}

impl PoseVars {
    pub fn constant(tape: &mut Tape, pose: &Pose) -> Self {
        PoseVars {
            q: tape.constant(Tensor::from_vec(pose.q().to_array().to_vec())),
            t: tape.constant(Tensor::from_vec(pose.t.to_vec())),
        }
    }

    pub fn leaf(tape: &mut Tape, pose: &Pose) -> Self {
        PoseVars {
            q: tape.leaf(Tensor::from_vec(pose.q().to_array().to_vec())),
            t: tape.leaf(Tensor::from_vec(pose.t.to_vec())),
        }
    }

    /// Current value as a [`Pose`] (normalized, `w ≥ 0`).
    pub fn value(&self, tape: &Tape) -> Result<Pose> {
        let q = tape.value(self.q).data();
        let t = tape.value(self.t).data();
        Pose::new(Quaternion::new(q[0], q[1], q[2], q[3]), [t[0], t[1], t[2]])
    }
}

/// `q / |q|` on the tape.
pub fn normalize_quat(tape: &mut Tape, q: Var) -> Result<Var> {
    let n = tape.norm_last(q)?;
    if tape.value(n).item() == 0.0 {
        return Err(Error::ZeroQuaternion);
    }
    tape.div(q, n)
}

/// `x R(q)ᵀ + t` for `coords: [n,3]`; `q` is normalized first.
pub fn warp_points(tape: &mut Tape, coords: Var, pose: &PoseVars) -> Result<Var> {
    let q = normalize_quat(tape, pose.q)?;
    let r = tape.quat_to_rotation(q)?;
    let rt = tape.transpose(r)?;
    let rotated = tape.matmul(coords, rt)?;
    tape.add(rotated, pose.t)
}

/// `q = Δq·q_c`, `t = R(Δq) t_c + Δt`.
pub fn compose_poses(tape: &mut Tape, delta: &PoseVars, coarse: &PoseVars) -> Result<PoseVars> {
    let dq = normalize_quat(tape, delta.q)?;
    let q = tape.quat_mul(dq, coarse.q)?;
    let q = normalize_quat(tape, q)?;
    let r = tape.quat_to_rotation(dq)?;
    let tc = tape.reshape(coarse.t, &[3, 1])?;
    let rt = tape.matmul(r, tc)?;
    let rt = tape.reshape(rt, &[3])?;
    let t = tape.add(rt, delta.t)?;
    Ok(PoseVars { q, t })
}

/// Softmax over points of `mlp(E ⊕ prior ⊕ F)`; the prior is included only
/// when given. Result `[n, c]`, every column summing to one.
pub fn make_mask(tape: &mut Tape, store: &ParamStore, mlp: &Mlp, embedding: Var, f1: Var, prior: Option<Var>) -> Result<Var> {
    let n = tape.shape(embedding)[0];
    let mut parts = vec![embedding];
    parts.extend(prior);
    parts.push(f1);
    for &p in &parts[1..] {
        if tape.shape(p)[0] != n {
            return Err(Error::shape("make_mask rows", tape.shape(p), tape.shape(embedding)));
        }
    }
    let x = tape.concat(&parts, 1)?;
    let logits = mlp.forward(tape, store, x)?;
    tape.softmax(logits, 0)
}

/// Separate fully connected stacks regressing `q` (normalized) and `t` from
/// the pooled embedding `Σ e_i ⊙ m_i`, or from the per-channel mean when no
/// mask is given.
#[derive(Clone, Debug)]
pub struct PoseHead {
    pub fc_q: Mlp,
    pub fc_t: Mlp,
}

impl PoseHead {
    /// The quaternion output bias starts at the identity rotation.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize, hidden: &[usize]) -> Result<Self> {
        let mut qw = hidden.to_vec();
        qw.push(4);
        let mut tw = hidden.to_vec();
        tw.push(3);
        let fc_q = Mlp::new(store, rng, &format!("{name}.q"), width, &qw, false)?;
        let fc_t = Mlp::new(store, rng, &format!("{name}.t"), width, &tw, false)?;
        let last = fc_q.layers().last().expect("non-empty").bias.clone();
        store.get_mut(&last).expect("registered").tensor = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        Ok(PoseHead { fc_q, fc_t })
    }

    pub fn pool(&self, tape: &mut Tape, embedding: Var, mask: Option<Var>) -> Result<Var> {
        let pooled = match mask {
            Some(m) => {
                if tape.shape(m) != tape.shape(embedding) {
                    return Err(Error::shape("pose head mask", tape.shape(m), tape.shape(embedding)));
                }
                let w = tape.mul(embedding, m)?;
                tape.sum(w, 0)?
            }
            None => tape.mean(embedding, 0)?,
        };
        let c = tape.shape(pooled)[0];
        tape.reshape(pooled, &[1, c])
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, embedding: Var, mask: Option<Var>) -> Result<PoseVars> {
        let pooled = self.pool(tape, embedding, mask)?;
        self.regress(tape, store, pooled)
    }

    /// Pose from an already pooled `[1, c]` feature.
    pub fn regress(&self, tape: &mut Tape, store: &ParamStore, pooled: Var) -> Result<PoseVars> {
        let q = self.fc_q.forward(tape, store, pooled)?;
        let q = tape.reshape(q, &[4])?;
        let q = normalize_quat(tape, q)?;
        let t = self.fc_t.forward(tape, store, pooled)?;
        let t = tape.reshape(t, &[3])?;
        Ok(PoseVars { q, t })
    }
}

/// Everything one pyramid level contributes downstream: the first cloud's
/// coordinates at that level, its embedding and mask, and the pose.
#[derive(Clone, Copy, Debug)]
pub struct LevelState {
    pub coords: Var,
    pub embedding: Var,
    pub mask: Option<Var>,
    pub pose: PoseVars,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefineSwitches {
    pub mask: bool,
    pub mask_optimization: bool,
    pub warp: bool,
}

impl Default for RefineSwitches {
    fn default() -> Self {
        RefineSwitches {
            mask: true,
            mask_optimization: true,
            warp: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RefineDims {
    /// Pyramid feature width at this level.
    pub features: usize,
    /// Embedding width of the coarser level.
    pub coarse_embedding: usize,
    /// Embedding width at this level.
    pub embedding: usize,
    pub upconv_k: usize,
    pub k1: usize,
    pub k2: usize,
    pub kind: CostVolumeKind,
}

/// Parameters of one warp-refinement level.
#[derive(Clone, Debug)]
pub struct RefineBlock {
    pub upconv_k: usize,
    pub switches: RefineSwitches,
    pub up_e: (Mlp, Mlp),
    pub up_m: Option<(Mlp, Mlp)>,
    pub cost: CostVolume,
    pub refine_e: Mlp,
    pub mask_mlp: Option<Mlp>,
    pub head: PoseHead,
}

/// Intermediate tensors of a refinement step, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct RefineTrace {
    pub warped: Var,
    pub coarse_embedding: Var,
    pub coarse_mask: Option<Var>,
    pub re_embedding: Var,
    pub residual: PoseVars,
}

impl RefineBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: RefineDims,
        head_hidden: &[usize],
        switches: RefineSwitches,
    ) -> Result<Self> {
        let e = d.embedding;
        let upconv = |store: &mut ParamStore, rng: &mut R, tag: &str| -> Result<(Mlp, Mlp)> {
            Ok((
                Mlp::new(store, rng, &format!("{name}.{tag}1"), 3 + d.coarse_embedding, &[e], true)?,
                Mlp::new(store, rng, &format!("{name}.{tag}2"), e, &[e], true)?,
            ))
        };
        let up_e = upconv(store, rng, "up_e")?;
        let with_prior = switches.mask && switches.mask_optimization;
        let up_m = if with_prior { Some(upconv(store, rng, "up_m")?) } else { None };
        let cost = CostVolume::new(store, rng, &format!("{name}.cost"), d.features, d.features, e, d.k1, d.k2, d.kind)?;
        let refine_e = Mlp::new(store, rng, &format!("{name}.refine"), 2 * e + d.features, &[e, e], true)?;
        let mask_mlp = if switches.mask {
            let width = e + if with_prior { e } else { 0 } + d.features;
            Some(Mlp::new(store, rng, &format!("{name}.mask"), width, &[e, e], false)?)
        } else {
            None
        };
        let head = PoseHead::new(store, rng, &format!("{name}.head"), e, head_hidden)?;
        Ok(RefineBlock {
            upconv_k: d.upconv_k,
            switches,
            up_e,
            up_m,
            cost,
            refine_e,
            mask_mlp,
            head,
        })
    }

    /// One coarse-to-fine step: propagate embedding and mask from `coarse`,
    /// warp `pc1` by the coarse pose, re-associate with `pc2`, refine, and
    /// compose the residual pose onto the coarse one.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        coarse: &LevelState,
        pc1: &PointSet,
        pc2: &PointSet,
    ) -> Result<(LevelState, RefineTrace)> {
        let f1 = pc1
            .features
            .ok_or_else(|| Error::Invalid("warp refine: level features required".into()))?;
        let dense = PointSet {
            coords: pc1.coords,
            features: None,
        };
        let sparse_e = PointSet {
            coords: coarse.coords,
            features: Some(coarse.embedding),
        };
        let ce = set_upconv(tape, store, &dense, &sparse_e, self.upconv_k, &self.up_e.0, Some(&self.up_e.1))?;
        let cm = match (&self.up_m, coarse.mask) {
            (Some((m1, m2)), Some(mask)) => {
                let sparse_m = PointSet {
                    coords: coarse.coords,
                    features: Some(mask),
                };
                Some(set_upconv(tape, store, &dense, &sparse_m, self.upconv_k, m1, Some(m2))?)
            }
            (Some(_), None) => return Err(Error::Invalid("warp refine: coarse mask required".into())),
            _ => None,
        };
        let warped = if self.switches.warp {
            warp_points(tape, pc1.coords, &coarse.pose)?
        } else {
            pc1.coords
        };
        let warped_set = PointSet {
            coords: warped,
            features: Some(f1),
        };
        let re = self.cost.forward(tape, store, &warped_set, pc2)?.embedding;
        let cat = tape.concat(&[ce, re, f1], 1)?;
        let embedding = self.refine_e.forward(tape, store, cat)?;
        let mask = match &self.mask_mlp {
            Some(mlp) => Some(make_mask(tape, store, mlp, embedding, f1, cm)?),
            None => None,
        };
        let residual = self.head.forward(tape, store, embedding, mask)?;
        let pose = compose_poses(tape, &residual, &coarse.pose)?;
        Ok((
            LevelState {
                coords: pc1.coords,
                embedding,
                mask,
                pose,
            },
            RefineTrace {
                warped,
                coarse_embedding: ce,
                coarse_mask: cm,
                re_embedding: re,
                residual,
            },
        ))
    }
}

/// Text table `x y z weight` with one row per point, where `weight` is the
/// mask summed over channels.
pub fn mask_table(coords: &Tensor, mask: &Tensor) -> Result<String> {
    if coords.shape()[0] != mask.shape()[0] {
        return Err(Error::shape("mask export", mask.shape(), coords.shape()));
    }
    let mut out = String::from("x y z weight\n");
    for i in 0..coords.shape()[0] {
        let p = coords.row(i);
        let w: f64 = mask.row(i).iter().sum();
        writeln!(out, "{} {} {} {}", p[0], p[1], p[2], w).unwrap();
    }
    Ok(out)
}

pub fn export_mask(path: &Path, coords: &Tensor, mask: &Tensor) -> Result<()> {
    write_atomic(path, mask_table(coords, mask)?.as_bytes())
}
