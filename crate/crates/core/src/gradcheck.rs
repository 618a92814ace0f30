//! Finite-difference gradient suite covering every differentiable operation.
//!
//! Each check builds a small random instance, reduces the operation's output
//! to a scalar with fixed random weights, and reports the worst relative
//! error between reverse-mode and central-difference gradients.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::costvol::{CostVolume, CostVolumeKind};
use crate::error::{Error, Result};
use crate::geom::{euler_to_quat, Pose};
use crate::headmask::{make_mask, LevelState, PoseHead, PoseVars, RefineBlock, RefineDims, RefineSwitches};
use crate::net::{Net, NetConfig};
use crate::nn::{jitter_biases, Mlp};
use crate::pcops::{set_conv, set_upconv, FpsStart, PointCloud, PointSet};
use crate::tensor::{check_input_gradients, check_param_gradients, FdOptions, ParamStore, Tape, Tensor, Var};
use crate::train::{level_loss, register_loss_params, total_loss, LossParams, S_Q, S_X};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// One entry of the suite.
pub trait GradCheck: Send + Sync {
    fn op(&self) -> &str;

    fn tolerance(&self) -> f64 {
        OP_TOLERANCE
    }

    fn worst_error(&self, opts: FdOptions) -> Result<f64>;
}

struct FnCheck {
    op: &'static str,
    tolerance: f64,
    run: fn(FdOptions) -> Result<f64>,
}

impl GradCheck for FnCheck {
    fn op(&self) -> &str {
        self.op
    }

    fn tolerance(&self) -> f64 {
        self.tolerance
    }

    fn worst_error(&self, opts: FdOptions) -> Result<f64> {
        (self.run)(opts)
    }
}

/// A check whose analytic gradient is deliberately wrong, for exercising
/// failure reporting.
pub struct BrokenCheck {
    pub op: String,
}

impl GradCheck for BrokenCheck {
    fn op(&self) -> &str {
        &self.op
    }

    fn worst_error(&self, opts: FdOptions) -> Result<f64> {
        let x = Tensor::from_vec(vec![0.3, -1.2, 0.7]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = tape.mul(v, v)?;
        let root = tape.sum_all(y);
        let analytic = tape.backward(root)?.get(v);
        let f = |x: f64| 1.5 * x * x;
        let mut worst = 0.0f64;
        for (a, &xi) in analytic.data().iter().zip(x.data()) {
            let numeric = (f(xi + opts.step) - f(xi - opts.step)) / (2.0 * opts.step);
            worst = worst.max(crate::tensor::relative_error(*a, numeric, opts.abs_floor));
        }
        Ok(worst)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub op: String,
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.results.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect()
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<24} {:>12} {:>10}  result", "op", "worst", "tolerance").unwrap();
        for r in &self.results {
            let verdict = if r.passed() { "ok" } else { "FAIL" };
            writeln!(s, "{:<24} {:>12.3e} {:>10.0e}  {verdict}", r.op, r.worst, r.tolerance).unwrap();
        }
        s
    }
}

/// Runs the checks whose op equals `only` (all when `None`). An unknown op
/// name is an error.
pub fn run_suite(checks: &[Box<dyn GradCheck>], only: Option<&str>, opts: FdOptions) -> Result<SuiteReport> {
    let selected: Vec<&Box<dyn GradCheck>> = checks.iter().filter(|c| only.is_none_or(|o| c.op() == o)).collect();
    if selected.is_empty() {
        let known: Vec<&str> = checks.iter().map(|c| c.op()).collect();
        return Err(Error::Invalid(format!(
            "no gradient check named `{}`; known: {}",
            only.unwrap_or(""),
            known.join(", ")
        )));
    }
    let mut results = Vec::with_capacity(selected.len());
    for c in selected {
        let worst = c.worst_error(opts)?;
        log::debug!("gradcheck {}: {worst:.3e}", c.op());
        results.push(CheckResult {
            op: c.op().to_string(),
            worst,
            tolerance: c.tolerance(),
        });
    }
    Ok(SuiteReport { results })
}

pub fn default_suite() -> Vec<Box<dyn GradCheck>> {
    let per_op: [(&'static str, fn(FdOptions) -> Result<f64>); 32] = [
        ("add", add),
        ("add_broadcast", add_broadcast),
        ("sub", sub),
        ("mul", mul),
        ("div", div),
        ("relu", relu),
        ("exp", exp),
        ("negate", negate),
        ("sqrt", sqrt),
        ("abs", abs),
        ("scale", scale),
        ("matmul", matmul),
        ("matmul_batched", matmul_batched),
        ("transpose", transpose),
        ("softmax", softmax),
        ("sum", sum),
        ("max", max),
        ("mean", mean),
        ("concat", concat),
        ("slice", slice),
        ("reshape", reshape),
        ("gather_rows", gather_rows),
        ("norm_last", norm_last),
        ("quat_mul", quat_mul),
        ("quat_to_rotation", quat_to_rotation),
        ("set_conv", set_conv_check),
        ("set_upconv", set_upconv_check),
        ("attentive_cost_volume", cost_volume_check),
        ("make_mask", make_mask_check),
        ("pose_head", pose_head_check),
        ("warp_refine", warp_refine_check),
        ("level_loss", level_loss_check),
    ];
    let mut checks: Vec<Box<dyn GradCheck>> = per_op
        .into_iter()
        .map(|(op, run)| {
            Box::new(FnCheck {
                op,
                tolerance: OP_TOLERANCE,
                run,
            }) as Box<dyn GradCheck>
        })
        .collect();
    checks.push(Box::new(FnCheck {
        op: "end_to_end_desk",
        tolerance: END_TO_END_TOLERANCE,
        run: end_to_end_desk,
    }));
    checks
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in ±scale with magnitude at least `gap`, keeping kinks of
/// `relu`/`abs` away from the probes.
fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..scale);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `Σ w ⊙ y` with weights fixed by `seed`.
fn weighted(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(random(&mut rng(seed), &shape, 1.0, 0.1));
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

fn inputs(seed: u64, shapes: &[&[usize]], scale: f64, gap: f64) -> Vec<Tensor> {
    let mut r = rng(seed);
    shapes.iter().map(|s| random(&mut r, s, scale, gap)).collect()
}

fn unary(opts: FdOptions, seed: u64, shape: &[usize], gap: f64, op: fn(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    check_input_gradients(&inputs(seed, &[shape], 1.0, gap), opts, |t, v| {
        let y = op(t, v[0])?;
        weighted(t, y, seed + 1)
    })
}

fn binary(opts: FdOptions, seed: u64, a: &[usize], b: &[usize], op: fn(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    check_input_gradients(&inputs(seed, &[a, b], 1.0, 0.2), opts, |t, v| {
        let y = op(t, v[0], v[1])?;
        weighted(t, y, seed + 1)
    })
}

fn add(o: FdOptions) -> Result<f64> {
    binary(o, 10, &[4, 3], &[4, 3], |t, a, b| t.add(a, b))
}

fn add_broadcast(o: FdOptions) -> Result<f64> {
    binary(o, 11, &[5, 3], &[3], |t, a, b| t.add(a, b))
}

fn sub(o: FdOptions) -> Result<f64> {
    binary(o, 12, &[4, 3], &[4, 3], |t, a, b| t.sub(a, b))
}

fn mul(o: FdOptions) -> Result<f64> {
    binary(o, 13, &[4, 3], &[4, 3], |t, a, b| t.mul(a, b))
}

fn div(o: FdOptions) -> Result<f64> {
    binary(o, 14, &[4, 3], &[4, 3], |t, a, b| t.div(a, b))
}

fn relu(o: FdOptions) -> Result<f64> {
    unary(o, 15, &[6, 4], 0.05, |t, a| Ok(t.relu(a)))
}

fn exp(o: FdOptions) -> Result<f64> {
    unary(o, 16, &[6, 4], 0.0, |t, a| Ok(t.exp(a)))
}

fn negate(o: FdOptions) -> Result<f64> {
    unary(o, 17, &[6, 4], 0.0, |t, a| Ok(t.neg(a)))
}

fn sqrt(o: FdOptions) -> Result<f64> {
    unary(o, 18, &[6, 4], 0.1, |t, a| {
        let s = t.mul(a, a)?;
        Ok(t.sqrt(s))
    })
}

fn abs(o: FdOptions) -> Result<f64> {
    unary(o, 19, &[6, 4], 0.05, |t, a| Ok(t.abs(a)))
}

fn scale(o: FdOptions) -> Result<f64> {
    unary(o, 20, &[6, 4], 0.0, |t, a| Ok(t.scale(a, -2.5)))
}

fn matmul(o: FdOptions) -> Result<f64> {
    binary(o, 21, &[4, 5], &[5, 3], |t, a, b| t.matmul(a, b))
}

fn matmul_batched(o: FdOptions) -> Result<f64> {
    binary(o, 22, &[2, 3, 4], &[2, 4, 2], |t, a, b| t.matmul(a, b))
}

fn transpose(o: FdOptions) -> Result<f64> {
    unary(o, 23, &[4, 3], 0.0, |t, a| t.transpose(a))
}

fn softmax(o: FdOptions) -> Result<f64> {
    let a = unary(o, 24, &[6, 4], 0.0, |t, a| t.softmax(a, 0))?;
    let b = unary(o, 25, &[3, 5], 0.0, |t, a| t.softmax(a, 1))?;
    Ok(a.max(b))
}

fn sum(o: FdOptions) -> Result<f64> {
    unary(o, 26, &[3, 4, 2], 0.0, |t, a| t.sum(a, 1))
}

fn max(o: FdOptions) -> Result<f64> {
    unary(o, 27, &[3, 5, 2], 0.0, |t, a| t.max(a, 1))
}

fn mean(o: FdOptions) -> Result<f64> {
    unary(o, 28, &[5, 3], 0.0, |t, a| t.mean(a, 0))
}

fn concat(o: FdOptions) -> Result<f64> {
    binary(o, 29, &[4, 2], &[4, 3], |t, a, b| t.concat(&[a, b, a], 1))
}

fn slice(o: FdOptions) -> Result<f64> {
    unary(o, 30, &[5, 4], 0.0, |t, a| t.slice(a, 1, 1, 2))
}

fn reshape(o: FdOptions) -> Result<f64> {
    unary(o, 31, &[4, 3], 0.0, |t, a| {
        let r = t.reshape(a, &[2, 6])?;
        t.mul(r, r)
    })
}

fn gather_rows(o: FdOptions) -> Result<f64> {
    unary(o, 32, &[5, 3], 0.0, |t, a| t.gather_rows(a, &[4, 0, 0, 2, 4, 4]))
}

fn norm_last(o: FdOptions) -> Result<f64> {
    unary(o, 33, &[5, 4], 0.1, |t, a| t.norm_last(a))
}

fn quat_mul(o: FdOptions) -> Result<f64> {
    binary(o, 34, &[4], &[4], |t, a, b| t.quat_mul(a, b))
}

fn quat_to_rotation(o: FdOptions) -> Result<f64> {
    unary(o, 35, &[4], 0.1, |t, a| t.quat_to_rotation(a))
}

fn set_conv_check(o: FdOptions) -> Result<f64> {
    let mut r = rng(40);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, &mut r, "conv", crate::pcops::set_conv_in_width(2), &[5, 4], true)?;
    jitter_biases(&mut store, &mut r, 0.1);
    let x = random(&mut r, &[10, 3], 1.0, 0.0);
    let f = random(&mut r, &[10, 2], 1.0, 0.0);
    check_param_gradients(&store, None, o, |tape, s| {
        let input = PointSet {
            coords: tape.constant(x.clone()),
            features: Some(tape.constant(f.clone())),
        };
        let (out, _) = set_conv(tape, s, &input, 4, 3, &mlp, FpsStart::First)?;
        weighted(tape, out.features.expect("set conv emits features"), 41)
    })
}

fn set_upconv_check(o: FdOptions) -> Result<f64> {
    let mut r = rng(42);
    let mut store = ParamStore::new();
    let m1 = Mlp::new(&mut store, &mut r, "up1", 3 + 3, &[5], true)?;
    let m2 = Mlp::new(&mut store, &mut r, "up2", 5 + 2, &[4], true)?;
    jitter_biases(&mut store, &mut r, 0.1);
    let xd = random(&mut r, &[12, 3], 1.0, 0.0);
    let fd = random(&mut r, &[12, 2], 1.0, 0.0);
    let xs = random(&mut r, &[6, 3], 1.0, 0.0);
    let fs = random(&mut r, &[6, 3], 1.0, 0.0);
    check_param_gradients(&store, None, o, |tape, s| {
        let dense = PointSet {
            coords: tape.constant(xd.clone()),
            features: Some(tape.constant(fd.clone())),
        };
        let sparse = PointSet {
            coords: tape.constant(xs.clone()),
            features: Some(tape.constant(fs.clone())),
        };
        let y = set_upconv(tape, s, &dense, &sparse, 3, &m1, Some(&m2))?;
        weighted(tape, y, 43)
    })
}

fn cost_volume_check(o: FdOptions) -> Result<f64> {
    let mut r = rng(44);
    let mut store = ParamStore::new();
    let cv = CostVolume::new(&mut store, &mut r, "cv", 2, 2, 3, 3, 3, CostVolumeKind::Attentive)?;
    jitter_biases(&mut store, &mut r, 0.1);
    let (x1, f1) = (random(&mut r, &[8, 3], 1.0, 0.0), random(&mut r, &[8, 2], 1.0, 0.0));
    let (x2, f2) = (random(&mut r, &[8, 3], 1.0, 0.0), random(&mut r, &[8, 2], 1.0, 0.0));
    check_param_gradients(&store, None, o, |tape, s| {
        let a = PointSet {
            coords: tape.constant(x1.clone()),
            features: Some(tape.constant(f1.clone())),
        };
        let b = PointSet {
            coords: tape.constant(x2.clone()),
            features: Some(tape.constant(f2.clone())),
        };
        let out = cv.forward(tape, s, &a, &b)?;
        weighted(tape, out.embedding, 45)
    })
}

fn make_mask_check(o: FdOptions) -> Result<f64> {
    let mut r = rng(46);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, &mut r, "mask", 3 + 3 + 2, &[4, 3], false)?;
    jitter_biases(&mut store, &mut r, 0.1);
    let e = random(&mut r, &[7, 3], 1.0, 0.0);
    let p = random(&mut r, &[7, 3], 1.0, 0.0);
    let f = random(&mut r, &[7, 2], 1.0, 0.0);
    check_param_gradients(&store, None, o, |tape, s| {
        let (ev, pv, fv) = (tape.constant(e.clone()), tape.constant(p.clone()), tape.constant(f.clone()));
        let m = make_mask(tape, s, &mlp, ev, fv, Some(pv))?;
        weighted(tape, m, 47)
    })
}

fn pose_loss(tape: &mut Tape, pose: &PoseVars, seed: u64) -> Result<Var> {
    let a = weighted(tape, pose.q, seed)?;
    let b = weighted(tape, pose.t, seed + 1)?;
    tape.add(a, b)
}

fn pose_head_check(o: FdOptions) -> Result<f64> {
    let mut r = rng(48);
    let mut store = ParamStore::new();
    let head = PoseHead::new(&mut store, &mut r, "head", 4, &[6, 5])?;
    jitter_biases(&mut store, &mut r, 0.1);
    let e = random(&mut r, &[9, 4], 1.0, 0.0);
    store.insert("mask_logits", random(&mut r, &[9, 4], 1.0, 0.0), true)?;
    check_param_gradients(&store, None, o, |tape, s| {
        let ev = tape.constant(e.clone());
        let logits = tape.param(s.expect("mask_logits"));
        let m = tape.softmax(logits, 0)?;
        let pose = head.forward(tape, s, ev, Some(m))?;
        pose_loss(tape, &pose, 49)
    })
}

fn warp_refine_check(o: FdOptions) -> Result<f64> {
    let mut r = rng(50);
    let mut store = ParamStore::new();
    let dims = RefineDims {
        features: 2,
        coarse_embedding: 3,
        embedding: 3,
        upconv_k: 2,
        k1: 2,
        k2: 2,
        kind: CostVolumeKind::Attentive,
    };
    let block = RefineBlock::new(&mut store, &mut r, "r", dims, &[4], RefineSwitches::default())?;
    jitter_biases(&mut store, &mut r, 0.1);
    let x1 = random(&mut r, &[16, 3], 1.0, 0.0);
    let f1 = random(&mut r, &[16, 2], 1.0, 0.0);
    let x2 = random(&mut r, &[16, 3], 1.0, 0.0);
    let f2 = random(&mut r, &[16, 2], 1.0, 0.0);
    let xc = random(&mut r, &[8, 3], 1.0, 0.0);
    let ec = random(&mut r, &[8, 3], 1.0, 0.0);
    let coarse = Pose::new(euler_to_quat(0.05, -0.03, 0.02), [0.1, 0.0, -0.05])?;
    store.insert("coarse.mask_logits", random(&mut r, &[8, 3], 1.0, 0.0), true)?;
    store.insert("coarse.q", Tensor::from_vec(coarse.q().to_array().to_vec()), true)?;
    store.insert("coarse.t", Tensor::from_vec(coarse.t.to_vec()), true)?;
    check_param_gradients(&store, None, o, |tape, s| {
        let pc1 = PointSet {
            coords: tape.constant(x1.clone()),
            features: Some(tape.constant(f1.clone())),
        };
        let pc2 = PointSet {
            coords: tape.constant(x2.clone()),
            features: Some(tape.constant(f2.clone())),
        };
        let logits = tape.param(s.expect("coarse.mask_logits"));
        let state = LevelState {
            coords: tape.constant(xc.clone()),
            embedding: tape.constant(ec.clone()),
            mask: Some(tape.softmax(logits, 0)?),
            pose: PoseVars {
                q: tape.param(s.expect("coarse.q")),
                t: tape.param(s.expect("coarse.t")),
            },
        };
        let (out, _) = block.forward(tape, s, &state, &pc1, &pc2)?;
        pose_loss(tape, &out.pose, 51)
    })
}

fn level_loss_check(o: FdOptions) -> Result<f64> {
    let gt = Pose::new(euler_to_quat(0.2, -0.1, 0.3), [0.5, -0.2, 1.0])?;
    let q = Tensor::from_vec(vec![0.9, 0.15, -0.02, 0.2]);
    let t = Tensor::from_vec(vec![0.3, 0.1, 1.4]);
    let sx = Tensor::scalar(0.1);
    let sq = Tensor::scalar(-2.5);
    let a = check_input_gradients(&[q.clone(), t.clone(), sx.clone(), sq.clone()], o, |tape, v| {
        level_loss(tape, &PoseVars { q: v[0], t: v[1] }, &gt, v[2], v[3])
    })?;
    // a quaternion on the far hemisphere exercises the canonical sign flip
    let flipped = q.map(|c| -c);
    let b = check_input_gradients(&[flipped, t, sx, sq], o, |tape, v| {
        level_loss(tape, &PoseVars { q: v[0], t: v[1] }, &gt, v[2], v[3])
    })?;
    Ok(a.max(b))
}

/// Sampled parameters of the desk network through the multi-level loss.
fn end_to_end_desk(o: FdOptions) -> Result<f64> {
    let cfg = NetConfig::desk();
    let mut store = ParamStore::new();
    let net = Net::new(cfg.clone(), &mut store, 60)?;
    register_loss_params(&mut store, 0.0, -2.5)?;
    let mut r = rng(61);
    jitter_biases(&mut store, &mut r, 0.05);
    let pts: Vec<[f64; 3]> = (0..cfg.n_points)
        .map(|_| [r.random_range(-4.0..4.0), r.random_range(-1.0..1.0), r.random_range(-4.0..4.0)])
        .collect();
    let pc1 = PointCloud::from_points(&pts);
    let gt = Pose::new(euler_to_quat(0.05, 0.02, -0.03), [0.2, 0.0, 0.1])?;
    let pc2 = pc1.transform(&gt.to_matrix());
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    let mut coords: Vec<(String, usize)> = vec![(S_X.into(), 0), (S_Q.into(), 0)];
    coords.extend((0..30).map(|_| {
        let name = names[r.random_range(0..names.len())].clone();
        let len = store.expect(&name).tensor.len();
        (name, r.random_range(0..len))
    }));
    let lp = LossParams::default();
    check_param_gradients(&store, Some(&coords), o, |tape, s| {
        let out = net.forward(tape, s, &pc1, &pc2, FpsStart::First)?;
        let sx = tape.param(s.expect(S_X));
        let sq = tape.param(s.expect(S_Q));
        Ok(total_loss(tape, &out, &gt, &lp, sx, sq)?.total)
    })
}
