use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use pcodom::evalkit::{accumulate, emit_plot_data, kitti_errors, metrics_table, PlotTrajectory, Trajectory};
use pcodom::geom::Pose;
use pcodom::gradcheck::{default_suite, run_suite, BrokenCheck};
use pcodom::headmask::export_mask;
use pcodom::kittio::{read_poses, synth_scene, write_poses, Dataset, FramePair, KittiSequence, SynthDataset, SynthOptions};
use pcodom::net::{count_parameters, derive_seed};
use pcodom::tensor::{write_atomic, FdOptions};
use pcodom::train::{train_loop, Checkpoint, RunConfig, RunPaths, StepOutcome, Trainer};

use crate::cli::{Ablation, DataArgs, EvalArgs, GradcheckArgs, InferArgs, Preset, SynthArgs, TrainArgs};
use crate::manifest::ManifestBuilder;
use crate::CliError;

pub const OUT_ENV: &str = "PCODOM_OUT";
const DEFAULT_ROOT: &str = "runs";

fn out_dir(given: Option<PathBuf>, command: &str) -> Result<PathBuf, CliError> {
    let dir = given.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_ROOT), PathBuf::from);
        root.join(command)
    });
    fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Consecutive-frame pairs of several KITTI sequences, in order.
struct Sequences(Vec<KittiSequence>);

impl Dataset for Sequences {
    fn len(&self) -> usize {
        self.0.iter().map(Dataset::len).sum()
    }

    fn get(&self, mut i: usize) -> pcodom::Result<FramePair> {
        for s in &self.0 {
            if i < s.len() {
                return s.get(i);
            }
            i -= s.len();
        }
        Err(pcodom::Error::Index {
            op: "kitti sequences",
            index: i,
            bound: self.len(),
        })
    }
}

/// Named groups of pairs; a synthetic dataset is one group, KITTI gives one
/// per sequence.
fn open_groups(d: &DataArgs) -> Result<Vec<(String, Box<dyn Dataset + Sync>)>, CliError> {
    match (&d.data, &d.kitti) {
        (Some(dir), None) => Ok(vec![("synth".to_string(), Box::new(SynthDataset::open(dir)?) as Box<dyn Dataset + Sync>)]),
        (None, Some(root)) => {
            if d.sequences.is_empty() {
                return Err(usage("--kitti needs --sequences"));
            }
            d.sequences
                .iter()
                .map(|name| Ok((name.clone(), Box::new(KittiSequence::open(root, name)?) as Box<dyn Dataset + Sync>)))
                .collect()
        }
        _ => Err(usage("one of --data or --kitti is required")),
    }
}

fn open_training_data(d: &DataArgs) -> Result<(Box<dyn Dataset + Sync>, String), CliError> {
    match (&d.data, &d.kitti) {
        (Some(dir), None) => Ok((Box::new(SynthDataset::open(dir)?), dir.display().to_string())),
        (None, Some(root)) => {
            if d.sequences.is_empty() {
                return Err(usage("--kitti needs --sequences"));
            }
            let seqs = d.sequences.iter().map(|n| KittiSequence::open(root, n)).collect::<pcodom::Result<Vec<_>>>()?;
            Ok((Box::new(Sequences(seqs)), format!("{} sequences {}", root.display(), d.sequences.join(","))))
        }
        _ => Err(usage("one of --data or --kitti is required")),
    }
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::start("synth");
    let opts = SynthOptions {
        n_points: a.points,
        max_rot_deg: a.max_rot_deg,
        max_trans: a.max_trans,
        noise: a.noise,
        dropout: a.dropout,
        extent: a.extent,
    };
    if opts.n_points == 0 || !(0.0..1.0).contains(&opts.dropout) || opts.noise < 0.0 || opts.extent <= 0.0 {
        return Err(usage("--points must be positive, --dropout in [0, 1), --noise non-negative and --extent positive"));
    }
    if opts.max_rot_deg < 0.0 || opts.max_trans < 0.0 {
        return Err(usage("--max-rot-deg and --max-trans must be non-negative"));
    }
    let out = out_dir(a.out, "synth")?;
    let pairs = (0..a.count)
        .into_par_iter()
        .map(|i| synth_scene(&opts, derive_seed(a.seed, i as u64)))
        .collect::<pcodom::Result<Vec<_>>>()?;
    SynthDataset::write(&out, &pairs)?;
    log::info!("wrote {} pairs to {}", pairs.len(), out.display());

    manifest.seed = Some(a.seed);
    manifest.config_text = format!("{opts:?}\ncount = {}\nseed = {}\n", a.count, a.seed);
    manifest.write(&out)
}

fn apply_ablation(cfg: &mut RunConfig, a: Ablation) {
    let n = &mut cfg.net;
    match a {
        Ablation::NoMask => n.mask = false,
        Ablation::NoMaskOpt => n.mask_optimization = false,
        Ablation::NoWarp => n.warp = false,
        Ablation::NoRefine => n.refinement = false,
        Ablation::UniformCost => n.cost_volume = pcodom::costvol::CostVolumeKind::Uniform,
        Ablation::FirstLast => n.first_embedding = pcodom::net::FirstEmbedding::Last,
    }
}

fn resolve_config(a: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_text(&read_text(p)?)?,
        None => RunConfig::preset(a.preset.unwrap_or(Preset::Desk).name())?,
    };
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.adam.lr = v;
    }
    if let Some(v) = a.beta1 {
        t.adam.beta1 = v;
    }
    if let Some(v) = a.beta2 {
        t.adam.beta2 = v;
    }
    if let Some(v) = a.s_x {
        t.s_x = v;
    }
    if let Some(v) = a.s_q {
        t.s_q = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    if a.no_augment {
        t.augment = false;
    }
    if let Some(v) = &a.alphas {
        cfg.set("alphas", v)?;
    }
    for &ab in &a.ablation {
        apply_ablation(&mut cfg, ab);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn log_header(t: &Trainer, data: &str, pairs: usize, resumed: bool) -> String {
    let n = &t.config.net;
    let mut s = String::new();
    writeln!(s, "# pcodom train {}", crate::manifest::now()).unwrap();
    writeln!(s, "data: {data} ({pairs} pairs)").unwrap();
    if resumed {
        writeln!(s, "resumed at step: {}", t.optim.step).unwrap();
    }
    writeln!(s, "pooling: {}", if n.mask { "mask" } else { "mean" }).unwrap();
    writeln!(s, "mask optimization: {}", on_off(n.mask && n.mask_optimization)).unwrap();
    writeln!(s, "warp: {}", on_off(n.refinement && n.warp)).unwrap();
    writeln!(s, "refinement: {}", on_off(n.refinement)).unwrap();
    writeln!(s, "cost volume: {}", n.cost_volume).unwrap();
    writeln!(s, "first embedding: {}", n.first_embedding).unwrap();
    writeln!(s, "parameters: {}", count_parameters(&t.store)).unwrap();
    writeln!(s, "--- config").unwrap();
    s.push_str(&t.config.to_text());
    writeln!(s, "---").unwrap();
    s
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::start("train");
    let out = out_dir(a.out.clone(), "train")?;
    let paths = RunPaths::in_dir(&out);
    let text_log = out.join("train.log");
    let mut trainer = if a.resume {
        if !paths.checkpoint.exists() {
            return Err(usage(format!("--resume: no checkpoint at {}", paths.checkpoint.display())));
        }
        let mut t = Trainer::from_checkpoint(Checkpoint::load(&paths.checkpoint)?)?;
        if let Some(s) = a.steps {
            t.config.train.steps = s;
        }
        t
    } else {
        let cfg = resolve_config(&a)?;
        if paths.checkpoint.exists() {
            return Err(usage(format!(
                "{} already holds a checkpoint; pass --resume or choose another --out",
                out.display()
            )));
        }
        for stale in [&paths.log, &text_log] {
            if stale.exists() {
                fs::remove_file(stale).map_err(|e| CliError::Data(format!("cannot replace {}: {e}", stale.display())))?;
            }
        }
        Trainer::new(cfg)?
    };
    let (data, desc) = open_training_data(&a.data)?;
    if data.is_empty() {
        return Err(CliError::Data(format!("{desc}: no training pairs")));
    }
    write_atomic(&out.join("config.txt"), trainer.config.to_text().as_bytes())?;

    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&text_log)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", text_log.display())))?;
    let header = log_header(&trainer, &desc, data.len(), a.resume);
    log_file.write_all(header.as_bytes()).map_err(|e| CliError::Data(e.to_string()))?;
    log::info!("training to step {} on {} pairs", trainer.config.train.steps, data.len());

    let target = trainer.config.train.steps;
    let every = a.log_every.max(1);
    let mut write_err = None;
    let summary = train_loop(&mut trainer, data.as_ref(), Some(&paths), |r| {
        let line = match &r.outcome {
            StepOutcome::Applied if r.step % every == 0 || r.step == target => {
                format!("{} step {} loss {:.6} lr {:.3e}\n", crate::manifest::now(), r.step, r.total, r.lr)
            }
            StepOutcome::Rejected { param } => format!("{} step {} rejected: non-finite gradient in {param}\n", crate::manifest::now(), r.step),
            _ => return,
        };
        if let Err(e) = log_file.write_all(line.as_bytes()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::Data(format!("cannot write {}: {e}", text_log.display())));
    }
    let tail = format!(
        "{} finished at step {}: {} applied, {} rejected\n",
        crate::manifest::now(),
        trainer.optim.step,
        summary.applied,
        summary.rejected
    );
    log_file.write_all(tail.as_bytes()).map_err(|e| CliError::Data(e.to_string()))?;
    log::info!("step {}; checkpoint at {}", trainer.optim.step, paths.checkpoint.display());

    manifest.config_path = a.config.as_ref().map(|p| p.display().to_string());
    manifest.seed = Some(trainer.config.train.seed);
    manifest.config_text = trainer.config.to_text();
    manifest.write(&out)
}

pub fn infer(a: InferArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::start("infer");
    let mut ck = Checkpoint::load(&a.checkpoint)?;
    if let Some(p) = &a.config {
        ck.config = RunConfig::from_text(&read_text(p)?)?;
    } else if let Some(p) = a.preset {
        ck.config.net = pcodom::net::NetConfig::preset(p.name())?;
    }
    let trainer = Trainer::from_checkpoint(ck)?;
    let groups = open_groups(&a.data)?;
    let out = out_dir(a.out, "infer")?;
    let mask_dir = out.join("masks");
    if a.export_masks {
        fs::create_dir_all(&mask_dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", mask_dir.display())))?;
    }
    let (net, store) = (&trainer.net, &trainer.store);
    for (name, data) in &groups {
        let mut poses: Vec<(usize, Pose)> = (0..data.len())
            .into_par_iter()
            .map(|i| -> Result<(usize, Pose), CliError> {
                let pair = data.get(i)?;
                let pred = net.predict(store, &pair.pc1, &pair.pc2, derive_seed(a.seed, i as u64))?;
                let finest = &pred[0];
                if a.export_masks {
                    if let Some(m) = &finest.mask {
                        export_mask(&mask_dir.join(format!("{name}_{i:06}.txt")), &finest.coords, m)?;
                    }
                }
                Ok((i, finest.pose))
            })
            .collect::<Result<_, _>>()?;
        poses.sort_by_key(|p| p.0);
        let rel: Vec<Pose> = poses.into_iter().map(|p| p.1).collect();
        let traj = accumulate(&rel);
        let path = out.join(format!("{name}.txt"));
        write_poses(&path, &traj.poses)?;
        log::info!("{name}: {} frames -> {}", traj.len(), path.display());
    }
    if a.export_masks && !trainer.config.net.mask {
        log::warn!("mask disabled in this network; no masks exported");
    }

    manifest.config_path = a.config.as_ref().map(|p| p.display().to_string());
    manifest.seed = Some(a.seed);
    manifest.config_text = trainer.config.to_text();
    manifest.write(&out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "trajectory".into(), |s| s.to_string_lossy().into_owned())
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::start("eval");
    if a.est.len() != a.gt.len() {
        return Err(usage(format!("{} --est files but {} --gt files", a.est.len(), a.gt.len())));
    }
    let mut trajs = Vec::new();
    let mut metrics = Vec::new();
    for (e, g) in a.est.iter().zip(&a.gt) {
        let est = Trajectory::from_poses(read_poses(e)?);
        let gt = Trajectory::from_poses(read_poses(g)?);
        let m = kitti_errors(&est, &gt).map_err(|err| CliError::Data(format!("{} vs {}: {err}", e.display(), g.display())))?;
        let mut name = stem(e);
        if metrics.iter().any(|(n, _)| *n == name) {
            name = format!("{name}_{}", metrics.len());
        }
        metrics.push((name.clone(), m));
        trajs.push((name, est, gt));
    }
    let table = metrics_table(&metrics);
    print!("{table}");
    let out = out_dir(a.out, "eval")?;
    let plot: Vec<PlotTrajectory<'_>> = trajs
        .iter()
        .flat_map(|(n, e, g)| {
            [
                PlotTrajectory {
                    name: format!("{n}_est"),
                    trajectory: e,
                },
                PlotTrajectory {
                    name: format!("{n}_gt"),
                    trajectory: g,
                },
            ]
        })
        .collect();
    emit_plot_data(&plot, &metrics, &out)?;
    write_atomic(&out.join("metrics.txt"), table.as_bytes())?;

    manifest.config_text = a
        .est
        .iter()
        .zip(&a.gt)
        .map(|(e, g)| format!("{} {}\n", e.display(), g.display()))
        .collect();
    manifest.write(&out)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::start("gradcheck");
    let mut suite = default_suite();
    if let Some(op) = &a.inject_broken {
        suite.push(Box::new(BrokenCheck { op: op.clone() }));
    }
    let report = run_suite(&suite, a.op.as_deref(), FdOptions::default()).map_err(|e| match e {
        pcodom::Error::Invalid(m) => CliError::Usage(m),
        other => other.into(),
    })?;
    let table = report.table();
    print!("{table}");
    let out = out_dir(a.out, "gradcheck")?;
    write_atomic(&out.join("report.txt"), table.as_bytes())?;
    manifest.config_text = format!("op = {}\n", a.op.as_deref().unwrap_or("all"));
    manifest.write(&out)?;
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Acceptance(format!("gradient check failed: {}", report.failures().join(", "))))
    }
}
