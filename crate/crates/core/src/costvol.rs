//! Two-stage attentive cost volume.
//!
//! Stage one lets every point `x_i` of the first cloud attend over its `k1`
//! nearest points of the second cloud and sums their encodings into `pe_i`.
//! Stage two repeats the pattern over the `k2` nearest points of the first
//! cloud itself, now on `pe` features, producing the embedding `e_i`.
//! Attention is per channel: each output channel has its own softmax over
//! the neighborhood.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::pcops::{knn, PointSet};
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostVolumeKind {
    Attentive,
    /// Equal weights over the neighborhood; `u` is not evaluated.
    Uniform,
}

impl std::str::FromStr for CostVolumeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attentive" => Ok(CostVolumeKind::Attentive),
            "uniform" => Ok(CostVolumeKind::Uniform),
            other => Err(Error::Config(format!("unknown cost volume kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for CostVolumeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CostVolumeKind::Attentive => "attentive",
            CostVolumeKind::Uniform => "uniform",
        })
    }
}

/// Width of the per-pair input `x ⊕ y ⊕ (y − x) ⊕ |y − x| ⊕ f ⊕ g`.
pub fn pair_width(c_center: usize, c_neighbor: usize) -> usize {
    10 + c_center + c_neighbor
}

/// Builds the per-pair rows `center ⊕ neighbor ⊕ (neighbor − center) ⊕
/// |neighbor − center| ⊕ f_center ⊕ f_neighbor`; all inputs have the same
/// row count.
pub fn pair_input(tape: &mut Tape, center: Var, neighbor: Var, f_center: Var, f_neighbor: Var) -> Result<Var> {
    let rel = tape.sub(neighbor, center)?;
    let dist = tape.norm_last(rel)?;
    tape.concat(&[center, neighbor, rel, dist, f_center, f_neighbor], 1)
}

#[derive(Clone, Debug)]
pub struct CostVolume {
    pub k1: usize,
    pub k2: usize,
    pub kind: CostVolumeKind,
    pub u1: Mlp,
    pub v1: Mlp,
    pub u2: Mlp,
    pub v2: Mlp,
}

/// Embedding plus the attention weights of both stages, each
/// `[n, k, c]`; weights are absent for [`CostVolumeKind::Uniform`].
#[derive(Clone, Copy, Debug)]
pub struct CostVolumeOutput {
    pub embedding: Var,
    pub weights1: Option<Var>,
    pub weights2: Option<Var>,
}

impl CostVolume {
    /// `c1`, `c2`: feature widths of the two clouds; `out`: embedding width.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c1: usize,
        c2: usize,
        out: usize,
        k1: usize,
        k2: usize,
        kind: CostVolumeKind,
    ) -> Result<Self> {
        let w1 = pair_width(c1, c2);
        let w2 = pair_width(out, out);
        Ok(CostVolume {
            k1,
            k2,
            kind,
            u1: Mlp::new(store, rng, &format!("{name}.u1"), w1, &[out, out], false)?,
            v1: Mlp::new(store, rng, &format!("{name}.v1"), w1, &[out, out], true)?,
            u2: Mlp::new(store, rng, &format!("{name}.u2"), w2, &[out, out], false)?,
            v2: Mlp::new(store, rng, &format!("{name}.v2"), w2, &[out, out], true)?,
        })
    }

    pub fn out_width(&self) -> usize {
        self.v1.out_width()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, pc1: &PointSet, pc2: &PointSet) -> Result<CostVolumeOutput> {
        let (f1, f2) = match (pc1.features, pc2.features) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Invalid("cost volume: both clouds need features".into())),
        };
        let (n1, n2) = (pc1.len(tape), pc2.len(tape));
        if n1 == 0 || n2 == 0 {
            return Err(Error::Invalid("cost volume: empty cloud".into()));
        }
        if self.k1 > n2 || self.k2 > n1 {
            return Err(Error::Invalid(format!(
                "cost volume: k1 = {} needs ≤ {n2} points, k2 = {} needs ≤ {n1}",
                self.k1, self.k2
            )));
        }
        let (pe, weights1) = self.stage(tape, store, pc1.coords, f1, pc2.coords, f2, self.k1, &self.u1, &self.v1)?;
        let (e, weights2) = self.stage(tape, store, pc1.coords, pe, pc1.coords, pe, self.k2, &self.u2, &self.v2)?;
        Ok(CostVolumeOutput {
            embedding: e,
            weights1,
            weights2,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn stage(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        f: Var,
        y: Var,
        g: Var,
        k: usize,
        u: &Mlp,
        v: &Mlp,
    ) -> Result<(Var, Option<Var>)> {
        let n = tape.shape(x)[0];
        let nbrs = knn(tape.value(x), tape.value(y), k)?;
        let rep: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let cx = tape.gather_rows(x, &rep)?;
        let cf = tape.gather_rows(f, &rep)?;
        let ny = tape.gather_rows(y, &nbrs.indices)?;
        let ng = tape.gather_rows(g, &nbrs.indices)?;
        let input = pair_input(tape, cx, ny, cf, ng)?;
        let c = v.out_width();
        let enc = v.forward(tape, store, input)?;
        let enc = tape.reshape(enc, &[n, k, c])?;
        match self.kind {
            CostVolumeKind::Attentive => {
                let logits = u.forward(tape, store, input)?;
                let logits = tape.reshape(logits, &[n, k, c])?;
                let w = tape.softmax(logits, 1)?;
                let weighted = tape.mul(w, enc)?;
                Ok((tape.sum(weighted, 1)?, Some(w)))
            }
            CostVolumeKind::Uniform => Ok((tape.mean(enc, 1)?, None)),
        }
    }
}
