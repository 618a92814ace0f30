//! The full odometry network.
//!
//! Both clouds run through a shared four-level set conv pyramid. The first
//! embedding comes from a cost volume at the penultimate level (or the last,
//! see [`FirstEmbedding`]); an extra set conv carries it to the coarsest
//! level, where the initial mask and pose are regressed. Three
//! warp-refinement blocks then walk back to the finest level. Outputs are
//! indexed `l = 1` (finest) to `l = 4` (coarsest).

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{self, array4, flag, join, list, value};
use crate::costvol::{CostVolume, CostVolumeKind};
use crate::error::{Error, Result};
use crate::headmask::{make_mask, LevelState, PoseHead, PoseVars, RefineBlock, RefineDims, RefineSwitches};
use crate::nn::Mlp;
use crate::geom::Pose;
use crate::pcops::{farthest_point_sample, random_sample, set_conv_at, set_conv_in_width, FpsStart, PointCloud, PointSet};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FirstEmbedding {
    Penultimate,
    Last,
}

impl std::str::FromStr for FirstEmbedding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "penultimate" => Ok(FirstEmbedding::Penultimate),
            "last" => Ok(FirstEmbedding::Last),
            other => Err(Error::Config(format!("unknown first_embedding {other:?}"))),
        }
    }
}

impl std::fmt::Display for FirstEmbedding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FirstEmbedding::Penultimate => "penultimate",
            FirstEmbedding::Last => "last",
        })
    }
}

/// Network shape and ablation switches. Arrays are indexed finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub n_points: usize,
    pub level_points: [usize; 4],
    pub widths: [usize; 4],
    pub embed_widths: [usize; 4],
    pub set_conv_k: usize,
    pub upconv_k: usize,
    pub cost_k1: usize,
    pub cost_k2: usize,
    pub head_hidden: Vec<usize>,
    pub first_embedding: FirstEmbedding,
    pub cost_volume: CostVolumeKind,
    pub mask: bool,
    pub mask_optimization: bool,
    pub warp: bool,
    pub refinement: bool,
}

pub const NET_KEYS: &[&str] = &[
    "n_points",
    "level_points",
    "widths",
    "embed_widths",
    "set_conv_k",
    "upconv_k",
    "cost_k1",
    "cost_k2",
    "head_hidden",
    "first_embedding",
    "cost_volume",
    "mask",
    "mask_optimization",
    "warp",
    "refinement",
];

impl NetConfig {
    /// Laptop-scale network: 512 input points, levels 128/64/32/16.
    pub fn desk() -> Self {
        NetConfig {
            n_points: 512,
            level_points: [128, 64, 32, 16],
            widths: [8, 16, 32, 64],
            embed_widths: [16, 16, 32, 32],
            set_conv_k: 8,
            upconv_k: 4,
            cost_k1: 4,
            cost_k2: 4,
            head_hidden: vec![32, 16],
            first_embedding: FirstEmbedding::Penultimate,
            cost_volume: CostVolumeKind::Attentive,
            mask: true,
            mask_optimization: true,
            warp: true,
            refinement: true,
        }
    }

    /// Full-size network: 8192 input points, levels 2048/1024/256/64.
    pub fn full() -> Self {
        NetConfig {
            n_points: 8192,
            level_points: [2048, 1024, 256, 64],
            widths: [32, 64, 128, 256],
            embed_widths: [64, 64, 128, 128],
            set_conv_k: 16,
            upconv_k: 8,
            cost_k1: 16,
            cost_k2: 16,
            head_hidden: vec![128, 64],
            ..NetConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(NetConfig::desk()),
            "full" => Ok(NetConfig::full()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or full)"))),
        }
    }

    /// Index (0 = finest) of the level where the first cost volume runs.
    pub fn first_level(&self) -> usize {
        match self.first_embedding {
            FirstEmbedding::Penultimate => 2,
            FirstEmbedding::Last => 3,
        }
    }

    /// Number of poses a forward pass emits.
    pub fn output_levels(&self) -> usize {
        if self.refinement {
            4
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lp = &self.level_points;
        if !(self.n_points >= lp[0] && lp[0] > lp[1] && lp[1] > lp[2] && lp[2] > lp[3] && lp[3] >= 1) {
            return Err(Error::Config(format!(
                "need n_points ≥ n¹ > n² > n³ > n⁴ ≥ 1, got {} and {:?}",
                self.n_points, lp
            )));
        }
        if self.widths.contains(&0) || self.embed_widths.contains(&0) || self.head_hidden.contains(&0) {
            return Err(Error::Config("widths must be positive".into()));
        }
        let checks = [
            ("set_conv_k", self.set_conv_k, lp[3].min(self.n_points)),
            ("upconv_k", self.upconv_k, lp[3]),
            ("cost_k1", self.cost_k1, lp[3]),
            ("cost_k2", self.cost_k2, lp[3]),
        ];
        for (name, k, bound) in checks {
            if k == 0 || k > bound {
                return Err(Error::Config(format!("{name} = {k} must be in 1..={bound}")));
            }
        }
        Ok(())
    }

    /// Applies one `key = value` setting; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "n_points" => self.n_points = value(key, v)?,
            "level_points" => self.level_points = array4(key, v)?,
            "widths" => self.widths = array4(key, v)?,
            "embed_widths" => self.embed_widths = array4(key, v)?,
            "set_conv_k" => self.set_conv_k = value(key, v)?,
            "upconv_k" => self.upconv_k = value(key, v)?,
            "cost_k1" => self.cost_k1 = value(key, v)?,
            "cost_k2" => self.cost_k2 = value(key, v)?,
            "head_hidden" => self.head_hidden = list(key, v)?,
            "first_embedding" => self.first_embedding = value(key, v)?,
            "cost_volume" => self.cost_volume = value(key, v)?,
            "mask" => self.mask = flag(key, v)?,
            "mask_optimization" => self.mask_optimization = flag(key, v)?,
            "warp" => self.warp = flag(key, v)?,
            "refinement" => self.refinement = flag(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses a config file. An optional leading `preset = desk|full`
    /// chooses the base (default desk); every other key overrides it.
    pub fn from_text(text: &str) -> Result<Self> {
        let entries = config::parse_entries(text)?;
        let mut cfg = NetConfig::desk();
        for (i, e) in entries.iter().enumerate() {
            if e.key == "preset" {
                if i != 0 {
                    return Err(Error::Config(format!("line {}: `preset` must be the first key", e.line)));
                }
                cfg = NetConfig::preset(&e.value)?;
            } else if !cfg.set(&e.key, &e.value)? {
                return Err(Error::Config(format!("line {}: unknown key `{}`", e.line, e.key)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "n_points = {}", self.n_points).unwrap();
        writeln!(s, "level_points = {}", join(&self.level_points)).unwrap();
        writeln!(s, "widths = {}", join(&self.widths)).unwrap();
        writeln!(s, "embed_widths = {}", join(&self.embed_widths)).unwrap();
        writeln!(s, "set_conv_k = {}", self.set_conv_k).unwrap();
        writeln!(s, "upconv_k = {}", self.upconv_k).unwrap();
        writeln!(s, "cost_k1 = {}", self.cost_k1).unwrap();
        writeln!(s, "cost_k2 = {}", self.cost_k2).unwrap();
        writeln!(s, "head_hidden = {}", join(&self.head_hidden)).unwrap();
        writeln!(s, "first_embedding = {}", self.first_embedding).unwrap();
        writeln!(s, "cost_volume = {}", self.cost_volume).unwrap();
        writeln!(s, "mask = {}", self.mask).unwrap();
        writeln!(s, "mask_optimization = {}", self.mask_optimization).unwrap();
        writeln!(s, "warp = {}", self.warp).unwrap();
        writeln!(s, "refinement = {}", self.refinement).unwrap();
        s
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::desk()
    }
}

/// Per-level results, finest first. `coords` are the first cloud's points
/// at that level, `level` is 1-based.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    pub level: usize,
    pub coords: Var,
    pub embedding: Var,
    pub mask: Option<Var>,
    pub pose: PoseVars,
}

#[derive(Clone, Debug)]
pub struct NetOutput {
    pub levels: Vec<LevelOutput>,
}

impl NetOutput {
    pub fn finest(&self) -> &LevelOutput {
        &self.levels[0]
    }

    pub fn coarsest(&self) -> &LevelOutput {
        self.levels.last().expect("at least one level")
    }
}

/// Layer structure of the network; weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Net {
    pub config: NetConfig,
    pyramid: Vec<Mlp>,
    first_cost: CostVolume,
    lift: Option<Mlp>,
    init_mask: Option<Mlp>,
    init_head: PoseHead,
    /// Refinement blocks for levels 3, 2, 1 in that order.
    refine: Vec<RefineBlock>,
}

impl Net {
    /// Registers all parameters in `store`, initialized from `seed`.
    pub fn new(config: NetConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.widths;
        let e = config.embed_widths;
        let mut pyramid = Vec::with_capacity(4);
        for l in 0..4 {
            let input = if l == 0 { 3 } else { set_conv_in_width(c[l - 1]) };
            pyramid.push(Mlp::new(store, &mut rng, &format!("pyramid{}", l + 1), input, &[c[l], c[l]], true)?);
        }
        let fl = config.first_level();
        let first_cost = CostVolume::new(
            store,
            &mut rng,
            "first.cost",
            c[fl],
            c[fl],
            e[fl],
            config.cost_k1,
            config.cost_k2,
            config.cost_volume,
        )?;
        let lift = match config.first_embedding {
            FirstEmbedding::Penultimate => Some(Mlp::new(store, &mut rng, "first.lift", set_conv_in_width(e[2]), &[e[3], e[3]], true)?),
            FirstEmbedding::Last => None,
        };
        let init_mask = if config.mask {
            Some(Mlp::new(store, &mut rng, "first.mask", e[3] + c[3], &[e[3], e[3]], false)?)
        } else {
            None
        };
        let init_head = PoseHead::new(store, &mut rng, "first.head", e[3], &config.head_hidden)?;
        let switches = RefineSwitches {
            mask: config.mask,
            mask_optimization: config.mask_optimization,
            warp: config.warp,
        };
        let mut refine = Vec::new();
        if config.refinement {
            for l in (0..3).rev() {
                let dims = RefineDims {
                    features: c[l],
                    coarse_embedding: e[l + 1],
                    embedding: e[l],
                    upconv_k: config.upconv_k,
                    k1: config.cost_k1,
                    k2: config.cost_k2,
                    kind: config.cost_volume,
                };
                refine.push(RefineBlock::new(store, &mut rng, &format!("refine{}", l + 1), dims, &config.head_hidden, switches)?);
            }
        }
        Ok(Net {
            config,
            pyramid,
            first_cost,
            lift,
            init_mask,
            init_head,
            refine,
        })
    }

    /// Head regressing the coarsest pose from the first embedding.
    pub fn init_head(&self) -> &PoseHead {
        &self.init_head
    }

    /// Builds a network together with a fresh parameter store.
    pub fn build(config: NetConfig, seed: u64) -> Result<(Net, ParamStore)> {
        let mut store = ParamStore::new();
        let net = Net::new(config, &mut store, seed)?;
        Ok((net, store))
    }

    /// Runs the shared pyramid on one cloud; returns the four levels and the
    /// center indices chosen at each (relative to the level below).
    fn pyramid(&self, tape: &mut Tape, store: &ParamStore, pc: &PointCloud, fps: FpsStart, cloud: u64) -> Result<Vec<(PointSet, Vec<usize>)>> {
        let mut cur = PointSet {
            coords: tape.constant(pc.coords().clone()),
            features: None,
        };
        let mut out = Vec::with_capacity(4);
        for (l, mlp) in self.pyramid.iter().enumerate() {
            let start = match fps {
                FpsStart::First => FpsStart::First,
                FpsStart::Seeded(s) => FpsStart::Seeded(s ^ (cloud << 8 | l as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            };
            let centers = farthest_point_sample(tape.value(cur.coords), self.config.level_points[l], start)?;
            cur = set_conv_at(tape, store, &cur, &centers, self.config.set_conv_k, mlp)?;
            out.push((cur, centers));
        }
        Ok(out)
    }

    /// Forward pass on two clouds of exactly `n_points` points each.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, pc1: &PointCloud, pc2: &PointCloud, fps: FpsStart) -> Result<NetOutput> {
        for (name, pc) in [("pc1", pc1), ("pc2", pc2)] {
            if pc.len() != self.config.n_points {
                return Err(Error::Invalid(format!(
                    "{name} has {} points, the network expects {}",
                    pc.len(),
                    self.config.n_points
                )));
            }
        }
        let p1 = self.pyramid(tape, store, pc1, fps, 1)?;
        let p2 = self.pyramid(tape, store, pc2, fps, 2)?;
        let fl = self.config.first_level();
        let first = self.first_cost.forward(tape, store, &p1[fl].0, &p2[fl].0)?.embedding;
        let (coarse_set, coarse_centers) = &p1[3];
        let embedding = match &self.lift {
            Some(mlp) => {
                let input = PointSet {
                    coords: p1[2].0.coords,
                    features: Some(first),
                };
                set_conv_at(tape, store, &input, coarse_centers, self.config.set_conv_k, mlp)?
                    .features
                    .expect("set conv output features")
            }
            None => first,
        };
        let f1_4 = coarse_set.features.expect("pyramid features");
        let mask = match &self.init_mask {
            Some(mlp) => Some(make_mask(tape, store, mlp, embedding, f1_4, None)?),
            None => None,
        };
        let pose = self.init_head.forward(tape, store, embedding, mask)?;
        let mut state = LevelState {
            coords: coarse_set.coords,
            embedding,
            mask,
            pose,
        };
        let mut levels = vec![LevelOutput {
            level: 4,
            coords: state.coords,
            embedding,
            mask,
            pose,
        }];
        for (block, l) in self.refine.iter().zip([2usize, 1, 0]) {
            let (next, _) = block.forward(tape, store, &state, &p1[l].0, &p2[l].0)?;
            state = next;
            levels.push(LevelOutput {
                level: l + 1,
                coords: state.coords,
                embedding: state.embedding,
                mask: state.mask,
                pose: state.pose,
            });
        }
        levels.reverse();
        Ok(NetOutput { levels })
    }
}

/// Mixes a child stream id into a seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Plain values for one output level.
#[derive(Clone, Debug)]
pub struct LevelPrediction {
    pub level: usize,
    pub pose: Pose,
    pub coords: Tensor,
    pub mask: Option<Tensor>,
}

/// Resamples both clouds to `n` points using streams derived from `seed`.
pub fn sample_pair(pc1: &PointCloud, pc2: &PointCloud, n: usize, seed: u64) -> Result<(PointCloud, PointCloud)> {
    Ok((
        random_sample(pc1, n, derive_seed(seed, 1))?,
        random_sample(pc2, n, derive_seed(seed, 2))?,
    ))
}

impl Net {
    /// Resamples, runs the network and reads the results off the tape.
    /// Fully determined by `seed`.
    pub fn predict(&self, store: &ParamStore, pc1: &PointCloud, pc2: &PointCloud, seed: u64) -> Result<Vec<LevelPrediction>> {
        let (a, b) = sample_pair(pc1, pc2, self.config.n_points, seed)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, &a, &b, FpsStart::Seeded(derive_seed(seed, 3)))?;
        out.levels
            .iter()
            .map(|l| {
                Ok(LevelPrediction {
                    level: l.level,
                    pose: l.pose.value(&tape)?,
                    coords: tape.value(l.coords).clone(),
                    mask: l.mask.map(|m| tape.value(m).clone()),
                })
            })
            .collect()
    }
}

/// Total number of trainable scalars.
pub fn count_parameters(store: &ParamStore) -> usize {
    store.count_trainable()
}
