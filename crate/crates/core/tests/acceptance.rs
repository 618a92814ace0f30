//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit when any
//! criterion fails. Runs without the libtest harness so the lines always
//! reach the terminal.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pcodom::evalkit::{kitti_errors, Trajectory};
use pcodom::geom::{Pose, Quaternion, Transform4};
use pcodom::gradcheck::{default_suite, run_suite, END_TO_END_TOLERANCE, OP_TOLERANCE};
use pcodom::headmask::PoseVars;
use pcodom::kittio::{
    augment, parse_calib, parse_poses, parse_velodyne, synth_scene, warp_residual, AugmentSigmas, FramePair, SynthDataset,
    SynthOptions,
};
use pcodom::net::{sample_pair, LevelOutput, Net, NetConfig, NetOutput};
use pcodom::pcops::{farthest_point_sample, knn, FpsStart};
use pcodom::tensor::{FdOptions, ParamStore, Tape, Tensor};
use pcodom::train::{level_loss, total_loss, Checkpoint, LossParams, RunConfig, Trainer};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed < limit
}

fn random_coords(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let v: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![n, 3], v).unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let q = Quaternion::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let t = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
    Pose::new(q, t).unwrap()
}

fn matmul4(a: &Transform4, b: &Transform4) -> Transform4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = (0..4).map(|k| a.m[i][k] * b.m[k][j]).sum();
        }
    }
    Transform4 { m }
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let report = run_suite(&default_suite(), None, FdOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let worst_op = report
        .results
        .iter()
        .filter(|r| r.tolerance == OP_TOLERANCE)
        .map(|r| r.worst)
        .fold(0.0, f64::max);
    let worst_e2e = report
        .results
        .iter()
        .filter(|r| r.tolerance == END_TO_END_TOLERANCE)
        .map(|r| r.worst)
        .fold(0.0, f64::max);
    let failures = report.failures();
    verdict(
        report.passed() && within(elapsed, Duration::from_secs(300)),
        format!(
            "{} checks, worst per-op {worst_op:.2e}, end-to-end {worst_e2e:.2e}, failures {failures:?}, {:.1}s",
            report.results.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn brute_knn(q: &[f64], r: &Tensor, k: usize) -> Vec<usize> {
    let n = r.shape()[0];
    let mut d: Vec<(f64, usize)> = (0..n)
        .map(|j| {
            let p = r.row(j);
            ((0..3).map(|a| (p[a] - q[a]).powi(2)).sum(), j)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|x| x.1).collect()
}

/// Recomputes every min-distance from scratch each round.
fn brute_fps(c: &Tensor, m: usize) -> Vec<usize> {
    let n = c.shape()[0];
    let d = |i: usize, j: usize| -> f64 { (0..3).map(|a| (c.row(i)[a] - c.row(j)[a]).powi(2)).sum() };
    let mut chosen = vec![0];
    while chosen.len() < m {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for j in (0..n).filter(|j| !chosen.contains(j)) {
            let dj = chosen.iter().map(|&i| d(i, j)).fold(f64::INFINITY, f64::min);
            if dj > best.0 {
                best = (dj, j);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

fn oracle_equivalence() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=256);
        let r = random_coords(&mut rng, n);
        let m = rng.random_range(1..=n.min(64));
        let q = random_coords(&mut rng, m);
        let k = rng.random_range(1..=n.min(16));
        let idx = knn(&q, &r, k).unwrap();
        for i in 0..m {
            if idx.row(i) != brute_knn(q.row(i), &r, k).as_slice() {
                mismatches += 1;
            }
        }
        let s = rng.random_range(1..=n);
        if farthest_point_sample(&r, s, FpsStart::First).unwrap() != brute_fps(&r, s) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        mismatches == 0 && within(elapsed, Duration::from_secs(30)),
        format!("100 instances, {mismatches} mismatches, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn pose_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
        let ma = a.to_matrix();
        worst = worst.max(Pose::from_matrix(&ma).unwrap().to_matrix().max_abs_diff(&ma));
        worst = worst.max(a.compose(&a.inverse()).to_matrix().max_abs_diff(&Transform4::IDENTITY));
        worst = worst.max(a.inverse().to_matrix().max_abs_diff(&ma.inverse_rigid()));
        worst = worst.max(a.compose(&b).to_matrix().max_abs_diff(&matmul4(&ma, &b.to_matrix())));
        let p = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let direct = a.transform_point(b.transform_point(p));
        let composed = a.compose(&b).transform_point(p);
        worst = worst.max((0..3).map(|i| (direct[i] - composed[i]).abs()).fold(0.0, f64::max));
    }
    verdict(worst < 1e-9, format!("1000 random trials, worst deviation {worst:.2e}"))
}

fn desk_pair(seed: u64) -> FramePair {
    synth_scene(&SynthOptions::default(), seed).unwrap()
}

fn normalization() -> Verdict {
    let (mut mask_err, mut quat_err): (f64, f64) = (0.0, 0.0);
    let mut levels = 0;
    for seed in 0..3 {
        let (net, store) = Net::build(NetConfig::desk(), seed).unwrap();
        let pair = desk_pair(seed + 50);
        for p in net.predict(&store, &pair.pc1, &pair.pc2, seed).unwrap() {
            levels += 1;
            let m = p.mask.expect("mask enabled");
            let (n, c) = (m.shape()[0], m.shape()[1]);
            for j in 0..c {
                let s: f64 = (0..n).map(|i| m.get(&[i, j])).sum();
                mask_err = mask_err.max((s - 1.0).abs());
            }
            quat_err = quat_err.max((p.pose.q().norm() - 1.0).abs());
        }
    }
    verdict(
        levels == 12 && mask_err <= 1e-5 && quat_err <= 1e-9,
        format!("{levels} levels, worst mask sum deviation {mask_err:.2e}, worst |q| deviation {quat_err:.2e}"),
    )
}

fn warp_consistency() -> Verdict {
    let opts = SynthOptions {
        noise: 0.0,
        dropout: 0.0,
        ..SynthOptions::default()
    };
    let (mut plain, mut augmented): (f64, f64) = (0.0, 0.0);
    for seed in 0..100 {
        let pair = synth_scene(&opts, 7000 + seed).unwrap();
        plain = plain.max(warp_residual(&pair.pc1, &pair.pc2, &pair.gt));
        let aug = augment(&pair, AugmentSigmas::default(), seed);
        augmented = augmented.max(warp_residual(&aug.pc1, &aug.pc2, &aug.gt));
    }
    verdict(
        plain < 1e-9 && augmented < 1e-9,
        format!("100 noiseless pairs, max residual {plain:.2e}, after augmentation {augmented:.2e}"),
    )
}

fn synthetic_learning() -> Verdict {
    let start = Instant::now();
    let opts = SynthOptions::default();
    let train: Vec<FramePair> = (0..200).map(|i| synth_scene(&opts, i).unwrap()).collect();
    let held_out: Vec<FramePair> = (1000..1020).map(|i| synth_scene(&opts, i).unwrap()).collect();
    let mut cfg = RunConfig::preset("desk").unwrap();
    cfg.train.steps = 5000;
    cfg.train.augment = false;
    let mut trainer = Trainer::new(cfg).unwrap();
    pcodom::train::train_loop(&mut trainer, &train, None, |_| {}).unwrap();
    let (mut rot, mut trans, mut wins) = (0.0, 0.0, 0);
    for (i, p) in held_out.iter().enumerate() {
        let pred = trainer.net.predict(&trainer.store, &p.pc1, &p.pc2, i as u64).unwrap();
        let (fine, coarse) = (&pred[0].pose, &pred.last().unwrap().pose);
        let r = fine.rotation_error(&p.gt).to_degrees();
        rot += r / 20.0;
        trans += fine.translation_error(&p.gt) / 20.0;
        if r < coarse.rotation_error(&p.gt).to_degrees() {
            wins += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        rot < 2.0 && trans < 0.1 && wins >= 16 && within(elapsed, Duration::from_secs(1800)),
        format!(
            "{} steps, held-out rotation {rot:.3} deg, translation {trans:.4} m, finest beats coarsest {wins}/20, {:.0}s",
            trainer.optim.step,
            elapsed.as_secs_f64()
        ),
    )
}

/// Column means of the embedding pushed through the head's MLPs in plain
/// arithmetic.
fn mean_pooled_reference(net: &Net, store: &ParamStore, embedding: &Tensor) -> Pose {
    let (n, c) = (embedding.shape()[0], embedding.shape()[1]);
    let pooled: Vec<f64> = (0..c).map(|j| (0..n).map(|i| embedding.get(&[i, j])).sum::<f64>() / n as f64).collect();
    let run = |mlp: &pcodom::nn::Mlp| {
        let mut h = pooled.clone();
        let last = mlp.layers().len() - 1;
        for (li, l) in mlp.layers().iter().enumerate() {
            let w = &store.expect(&l.weight).tensor;
            let b = &store.expect(&l.bias).tensor;
            h = (0..l.fan_out)
                .map(|o| {
                    let y = b.data()[o] + (0..l.fan_in).map(|i| h[i] * w.get(&[i, o])).sum::<f64>();
                    if li < last {
                        y.max(0.0)
                    } else {
                        y
                    }
                })
                .collect();
        }
        h
    };
    let q = run(&net.init_head().fc_q);
    let t = run(&net.init_head().fc_t);
    Pose::new(Quaternion::new(q[0], q[1], q[2], q[3]), [t[0], t[1], t[2]]).unwrap()
}

fn ablations() -> Verdict {
    let pair = desk_pair(77);
    let mut cfg = NetConfig::desk();
    cfg.mask = false;
    let (net, store) = Net::build(cfg, 4).unwrap();
    let (a, b) = sample_pair(&pair.pc1, &pair.pc2, net.config.n_points, 9).unwrap();
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, &store, &a, &b, FpsStart::Seeded(9)).unwrap();
    let coarse = out.coarsest();
    let got = coarse.pose.value(&tape).unwrap();
    let want = mean_pooled_reference(&net, &store, tape.value(coarse.embedding));
    let dev = got.to_matrix().max_abs_diff(&want.to_matrix());
    let masks_absent = out.levels.iter().all(|l| l.mask.is_none());

    let mut cfg = NetConfig::desk();
    cfg.refinement = false;
    let (net, store) = Net::build(cfg, 4).unwrap();
    let poses = net.predict(&store, &pair.pc1, &pair.pc2, 9).unwrap().len();

    let data: Vec<FramePair> = (0..16).map(|i| desk_pair(300 + i)).collect();
    let mut trained = Vec::new();
    for (name, edit) in [("no-mask", 0), ("no-refinement", 1)] {
        let mut rc = RunConfig::preset("desk").unwrap();
        if edit == 0 {
            rc.net.mask = false;
        } else {
            rc.net.refinement = false;
        }
        rc.train.steps = 100;
        let mut t = Trainer::new(rc).unwrap();
        let s = pcodom::train::train_loop(&mut t, &data, None, |_| {});
        let ok = matches!(&s, Ok(s) if s.applied == 100) && t.optim.step == 100;
        trained.push(format!("{name} {}", if ok { "trained 100 steps" } else { "failed" }));
        if !ok {
            return verdict(false, format!("{name}: {:?}", s.err()));
        }
    }
    verdict(
        dev < 1e-12 && masks_absent && poses == 1,
        format!(
            "no-mask head vs mean-pool reference {dev:.2e}, no-refinement emits {poses} pose, {}",
            trained.join(", ")
        ),
    )
}

fn straight_line(n: usize, step: f64) -> Trajectory {
    Trajectory::from_poses(
        (0..n)
            .map(|i| Pose::from_translation([0.0, 0.0, i as f64 * step]).to_matrix())
            .collect(),
    )
}

fn evaluator() -> Verdict {
    let gt = straight_line(1001, 1.0);
    let zero = kitti_errors(&gt, &gt).unwrap();
    let scaled = kitti_errors(&straight_line(1001, 1.01), &gt).unwrap();

    // Each frame advances 1 m and turns `delta` about the vertical axis,
    // so every L-meter segment is off by L·delta radians.
    let delta: f64 = 1e-3;
    let turn = Pose::new(Quaternion::from_axis_angle([0.0, 1.0, 0.0], delta).unwrap(), [0.0, 0.0, 1.0]).unwrap();
    let est = Trajectory::from_poses(
        std::iter::successors(Some(Transform4::IDENTITY), |p| Some(matmul4(p, &turn.to_matrix())))
            .take(1001)
            .collect(),
    );
    let drift = kitti_errors(&est, &gt).unwrap();
    let closed_form = delta.to_degrees() * 100.0;
    // Segments end at the first frame strictly beyond L meters, one frame
    // past L on a 1 m grid: each contributes (L+1)·delta/L.
    let lengths = pcodom::evalkit::LENGTHS;
    let discretized = lengths.iter().map(|l| (l + 1.0) / l).sum::<f64>() / lengths.len() as f64 * closed_form;
    let one_frame = closed_form / lengths[0];

    let pass = zero.t_rel == 0.0
        && zero.r_rel == 0.0
        && (scaled.t_rel - 1.0).abs() <= 0.01
        && (drift.r_rel - closed_form).abs() <= one_frame
        && (drift.r_rel - discretized).abs() <= 1e-9 * closed_form;
    verdict(
        pass,
        format!(
            "gt vs gt {}/{}, 1.01 scale t_rel {:.4}%, yaw drift r_rel {:.6} vs closed form {closed_form:.6} (one-frame bound {one_frame:.4}, on-grid {discretized:.6}) deg/100m",
            zero.t_rel, zero.r_rel, scaled.t_rel, drift.r_rel
        ),
    )
}

fn loss_arithmetic() -> Verdict {
    let gt = Pose::new(Quaternion::new(0.9, 0.1, -0.2, 0.3), [0.4, -0.1, 0.25]).unwrap();
    let mut tape = Tape::new();
    let s_x = tape.constant(Tensor::scalar(0.0));
    let s_q = tape.constant(Tensor::scalar(-2.5));
    let perfect = PoseVars::constant(&mut tape, &gt);
    let l = level_loss(&mut tape, &perfect, &gt, s_x, s_q).unwrap();
    let single = tape.value(l).item();

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (sx, sq) = (0.3, -1.7);
    let s_x = tape.constant(Tensor::scalar(sx));
    let s_q = tape.constant(Tensor::scalar(sq));
    let dummy = tape.constant(Tensor::zeros(&[1, 3]));
    let mut levels = Vec::new();
    let mut hand = 0.0;
    let alphas = [1.6, 0.8, 0.4, 0.2];
    for level in 1..=4 {
        let qv = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let tv = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let norm = qv.iter().map(|x| x * x).sum::<f64>().sqrt();
        let sign = if qv[0] >= 0.0 { 1.0 } else { -1.0 };
        let qg = gt.q().canonical().to_array();
        let l_q = (0..4).map(|i| (qg[i] - sign * qv[i] / norm).powi(2)).sum::<f64>().sqrt();
        let l_t: f64 = (0..3).map(|i| (gt.t[i] - tv[i]).abs()).sum();
        hand += alphas[level - 1] * (l_t * (-sx).exp() + sx + l_q * (-sq).exp() + sq);
        levels.push(LevelOutput {
            level,
            coords: dummy,
            embedding: dummy,
            mask: None,
            pose: PoseVars {
                q: tape.constant(Tensor::from_vec(qv.to_vec())),
                t: tape.constant(Tensor::from_vec(tv.to_vec())),
            },
        });
    }
    let terms = total_loss(&mut tape, &NetOutput { levels }, &gt, &LossParams::default(), s_x, s_q).unwrap();
    let total = tape.value(terms.total).item();
    verdict(
        single == -2.5 && (total - hand).abs() <= 1e-12,
        format!("perfect prediction {single}, multi-scale {total:.15} vs hand sum {hand:.15}"),
    )
}

fn rejects(f: impl FnOnce() -> bool) -> bool {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(false)
}

fn data_plumbing() -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;

    let records: [[f32; 4]; 3] = [[1.5, -2.25, 0.125, 0.5], [1e-3, 7.0e2, -3.3, 0.0], [f32::MIN_POSITIVE, -0.0, 12.75, 1.0]];
    let bytes: Vec<u8> = records.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    let (pc, dropped) = parse_velodyne(&bytes, Path::new("fixture.bin")).unwrap();
    let exact = dropped == 0
        && pc.len() == 3
        && records
            .iter()
            .enumerate()
            .all(|(i, r)| (0..3).all(|a| pc.point(i)[a].to_bits() == (r[a] as f64).to_bits()));
    pass &= exact;
    notes.push(format!("velodyne fixture {}", if exact { "bit-exact" } else { "differs" }));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let corpus: Vec<(&str, Box<dyn FnOnce() -> bool>)> = vec![
        ("truncated velodyne", Box::new(|| parse_velodyne(&[0u8; 17], Path::new("x.bin")).is_err())),
        ("short pose row", Box::new(|| parse_poses("1 0 0 0 0 1 0 0 0 0 1\n", Path::new("p.txt")).is_err())),
        ("non-numeric pose", Box::new(|| parse_poses("1 0 0 x 0 1 0 0 0 0 1 0\n", Path::new("p.txt")).is_err())),
        ("nan pose", Box::new(|| parse_poses("1 0 0 NaN 0 1 0 0 0 0 1 0\n", Path::new("p.txt")).is_err())),
        ("calib without Tr", Box::new(|| parse_calib("P0: 1 0 0 0 0 1 0 0 0 0 1 0\n", Path::new("c.txt")).is_err())),
        ("skewed calib", Box::new(|| parse_calib("Tr: 2 0 0 0 0 1 0 0 0 0 1 0\n", Path::new("c.txt")).is_err())),
        (
            "synthetic index header",
            Box::new(move || {
                std::fs::write(p.join("index.txt"), "not-a-dataset 1\ncount 0\n").unwrap();
                SynthDataset::open(p).is_err()
            }),
        ),
        ("empty checkpoint", Box::new(|| Checkpoint::from_bytes(&[]).is_err())),
        ("garbage checkpoint", Box::new(|| Checkpoint::from_bytes(b"pcodom-checkpoint\nversion 9\n").is_err())),
        ("parameter block", Box::new(|| ParamStore::from_bytes(&[1, 2, 3, 4, 5, 6, 7, 8, 9]).is_err())),
    ];
    let total = corpus.len();
    let mut crashed_or_accepted = Vec::new();
    for (name, case) in corpus {
        if !rejects(case) {
            crashed_or_accepted.push(name);
        }
    }
    let ck_bytes = {
        let mut rc = RunConfig::preset("desk").unwrap();
        rc.train.batch_size = 2;
        Trainer::new(rc).unwrap().checkpoint().to_bytes()
    };
    let mut truncations = 0;
    for cut in (0..ck_bytes.len()).step_by(ck_bytes.len() / 40 + 1) {
        if !rejects(|| Checkpoint::from_bytes(&ck_bytes[..cut]).is_err()) {
            crashed_or_accepted.push("truncated checkpoint");
        }
        truncations += 1;
    }
    pass &= crashed_or_accepted.is_empty();
    notes.push(format!(
        "{} malformed inputs rejected{}",
        total + truncations,
        if crashed_or_accepted.is_empty() {
            String::new()
        } else {
            format!(", NOT rejected: {crashed_or_accepted:?}")
        }
    ));

    let data: Vec<FramePair> = (0..6).map(|i| desk_pair(500 + i)).collect();
    let mut rc = RunConfig::preset("desk").unwrap();
    rc.train.batch_size = 2;
    rc.train.steps = 3;
    let mut a = Trainer::new(rc).unwrap();
    pcodom::train::train_loop(&mut a, &data, None, |_| {}).unwrap();
    let path = dir.path().join("checkpoint.bin");
    a.checkpoint().save(&path).unwrap();
    let mut b = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
    let ra = a.train_step(&data).unwrap();
    let rb = b.train_step(&data).unwrap();
    let identical = ra.total.to_bits() == rb.total.to_bits()
        && a.store.to_bytes() == b.store.to_bytes()
        && a.optim == b.optim
        && ra.step == 4;
    pass &= identical;
    notes.push(format!(
        "resumed step {} {}",
        rb.step,
        if identical { "bit-identical" } else { "differs" }
    ));
    verdict(pass, notes.join(", "))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("gradient suite", gradient_suite),
        ("oracle equivalence", oracle_equivalence),
        ("pose algebra", pose_algebra),
        ("normalization invariants", normalization),
        ("warp consistency", warp_consistency),
        ("synthetic odometry learning", synthetic_learning),
        ("ablation switches", ablations),
        ("evaluator", evaluator),
        ("loss arithmetic", loss_arithmetic),
        ("data plumbing", data_plumbing),
    ];
    println!("N/A  full-scale KITTI numbers: not reproducible without the full dataset and multi-day training; covered by the criteria below");
    let only = std::env::args().nth(1).filter(|a| !a.starts_with('-'));
    let mut failed = Vec::new();
    for (name, check) in criteria {
        if only.as_deref().is_some_and(|o| !name.contains(o)) {
            continue;
        }
        let v = catch_unwind(check).unwrap_or_else(|_| verdict(false, "panicked"));
        println!("{}  {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
