//! KITTI odometry files, preprocessing, augmentation, and a synthetic
//! rigid-motion generator that stands in for KITTI at small scale.
//!
//! All clouds handed to the network are in the left camera frame: `x`
//! right, `y` down, `z` forward, meters.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::error::{Error, Result};
use crate::geom::{euler_to_quat, Pose, Quaternion, Transform4, Vec3};
use crate::pcops::PointCloud;
use crate::tensor::write_atomic;

/// Two consecutive scans and the pose mapping frame-1 coordinates into
/// frame 2, so that `gt.transform_point(p1) ≈ p2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub pc1: PointCloud,
    pub pc2: PointCloud,
    pub gt: Pose,
    pub sequence: String,
    pub frame: usize,
}

/// Velodyne to left-camera extrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub tr: Transform4,
}

impl Calibration {
    pub const IDENTITY: Calibration = Calibration {
        tr: Transform4::IDENTITY,
    };
}

const CALIB_ORTHO_TOL: f64 = 1e-4;

/// Parses `x y z reflectance` little-endian `f32` records. Records with a
/// non-finite coordinate are dropped; the count is returned alongside.
pub fn parse_velodyne(bytes: &[u8], path: &Path) -> Result<(PointCloud, usize)> {
    if bytes.len() % 16 != 0 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            msg: format!("length {} is not a multiple of 16 bytes", bytes.len()),
        });
    }
    let mut pts = Vec::with_capacity(bytes.len() / 16);
    let mut dropped = 0;
    for rec in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap()) as f64;
        let p = [f(0), f(1), f(2)];
        if p.iter().all(|v| v.is_finite()) {
            pts.push(p);
        } else {
            dropped += 1;
        }
    }
    Ok((PointCloud::from_points(&pts), dropped))
}

pub fn read_velodyne_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (pc, dropped) = parse_velodyne(&bytes, path)?;
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} non-finite points", path.display());
    }
    Ok(pc)
}

/// Encodes points in the velodyne layout with zero reflectance.
pub fn velodyne_bytes(points: &[Vec3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in [p[0] as f32, p[1] as f32, p[2] as f32, 0.0] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn parse_floats(s: &str, path: &Path, line: usize) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("bad number {tok:?}"),
                })
        })
        .collect()
}

fn twelve(vals: Vec<f64>, path: &Path, line: usize) -> Result<[f64; 12]> {
    vals.try_into().map_err(|v: Vec<f64>| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("expected 12 numbers, found {}", v.len()),
    })
}

pub fn parse_calib(text: &str, path: &Path) -> Result<Calibration> {
    for (i, line) in text.lines().enumerate() {
        if let Some(rest) = line.trim_start().strip_prefix("Tr:") {
            let tr = Transform4::from_3x4(&twelve(parse_floats(rest, path, i + 1)?, path, i + 1)?);
            let err = tr.orthonormality_error();
            if !(err <= CALIB_ORTHO_TOL) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("Tr rotation is not orthonormal (error {err:.2e})"),
                });
            }
            return Ok(Calibration { tr });
        }
    }
    Err(Error::Malformed {
        path: path.to_path_buf(),
        msg: "no `Tr:` row".into(),
    })
}

pub fn read_calib(path: &Path) -> Result<Calibration> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calib(&text, path)
}

/// One row-major 3×4 matrix per non-blank line.
pub fn parse_poses(text: &str, path: &Path) -> Result<Vec<Transform4>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(Transform4::from_3x4(&twelve(parse_floats(line, path, i + 1)?, path, i + 1)?));
    }
    Ok(out)
}

pub fn read_poses(path: &Path) -> Result<Vec<Transform4>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text, path)
}

/// KITTI pose text with 9 significant digits per value.
pub fn poses_text(poses: &[Transform4]) -> String {
    let mut s = String::new();
    for p in poses {
        let row: Vec<String> = p.to_3x4().iter().map(|v| format!("{v:.8e}")).collect();
        writeln!(s, "{}", row.join(" ")).unwrap();
    }
    s
}

pub fn write_poses(path: &Path, poses: &[Transform4]) -> Result<()> {
    write_atomic(path, poses_text(poses).as_bytes())
}

/// Crop and ground-removal settings, camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocessOptions {
    /// Half the side of the kept square on camera `x`/`z`.
    pub half_width: f64,
    pub sensor_height: f64,
    pub ground_clearance: f64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            half_width: 15.0,
            sensor_height: 1.73,
            ground_clearance: 0.55,
        }
    }
}

impl PreprocessOptions {
    /// Points with camera `y` above this value are treated as ground.
    pub fn max_y(&self) -> f64 {
        self.sensor_height - self.ground_clearance
    }

    pub fn keeps(&self, p: Vec3) -> bool {
        p[0].abs() <= self.half_width && p[2].abs() <= self.half_width && p[1] <= self.max_y()
    }
}

pub fn to_camera(raw: &PointCloud, calib: &Calibration) -> PointCloud {
    raw.transform(&calib.tr)
}

pub fn filter_points(pc: &PointCloud, opts: &PreprocessOptions) -> PointCloud {
    let keep: Vec<usize> = pc
        .points()
        .enumerate()
        .filter(|&(_, p)| opts.keeps(p))
        .map(|(i, _)| i)
        .collect();
    pc.select(&keep)
}

/// Velodyne frame to filtered camera frame. May return an empty cloud.
pub fn preprocess(raw: &PointCloud, calib: &Calibration, opts: &PreprocessOptions) -> PointCloud {
    filter_points(&to_camera(raw, calib), opts)
}

/// Pose taking frame-`i` coordinates into frame `j`: `pose_j⁻¹ · pose_i`.
pub fn relative_gt(pose_i: &Transform4, pose_j: &Transform4) -> Result<Pose> {
    let rel = pose_j.inverse_rigid() * *pose_i;
    Pose::from_matrix_tol(&rel, CALIB_ORTHO_TOL)
}

/// Gaussian augmentation spread: degrees per Euler angle, meters per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSigmas {
    pub rot_deg: f64,
    pub trans: f64,
}

impl Default for AugmentSigmas {
    fn default() -> Self {
        AugmentSigmas {
            rot_deg: 2.0,
            trans: 0.1,
        }
    }
}

/// Draws the augmentation transform used by [`augment`].
pub fn augmentation_pose(sigmas: AugmentSigmas, seed: u64) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |s: f64| {
        if s > 0.0 {
            Normal::new(0.0, s).expect("positive sigma").sample(&mut rng)
        } else {
            0.0
        }
    };
    let r = sigmas.rot_deg.to_radians();
    let (yaw, pitch, roll) = (draw(r), draw(r), draw(r));
    let t = [draw(sigmas.trans), draw(sigmas.trans), draw(sigmas.trans)];
    Pose::new(euler_to_quat(yaw, pitch, roll), t).expect("unit quaternion")
}

/// Moves `pc1` by a random rigid transform `A` and returns the pair with
/// `gt' = gt · A⁻¹`, so `gt'` still carries the new `pc1` onto `pc2`.
pub fn augment(pair: &FramePair, sigmas: AugmentSigmas, seed: u64) -> FramePair {
    if sigmas.rot_deg == 0.0 && sigmas.trans == 0.0 {
        return pair.clone();
    }
    let a = augmentation_pose(sigmas, seed);
    let pc1 = pair.pc1.transform(&a.to_matrix());
    let gt = pair.gt.compose(&a.inverse());
    FramePair {
        pc1,
        gt,
        ..pair.clone()
    }
}

/// Settings for [`synth_scene`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    pub n_points: usize,
    pub max_rot_deg: f64,
    pub max_trans: f64,
    pub noise: f64,
    /// Fraction of `pc2` points removed after the motion.
    pub dropout: f64,
    /// Half-width of the scene footprint on camera `x`/`z`, meters.
    pub extent: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            n_points: 1024,
            max_rot_deg: 10.0,
            max_trans: 0.5,
            noise: 0.01,
            dropout: 0.1,
            extent: 4.0,
        }
    }
}

/// Random scene of a few vertical walls, a partial ceiling-free floor
/// patch, and boxy clutter, in camera coordinates.
pub fn synth_points<R: Rng>(rng: &mut R, n: usize, extent: f64) -> Vec<Vec3> {
    struct Patch {
        origin: Vec3,
        u: Vec3,
        v: Vec3,
        area: f64,
    }
    let mut patches = Vec::new();
    let walls = rng.random_range(3..=5);
    for _ in 0..walls {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let len = rng.random_range(0.4 * extent..1.2 * extent);
        let height = rng.random_range(1.5..3.5);
        let cx = rng.random_range(-extent..extent);
        let cz = rng.random_range(-extent..extent);
        let u = [theta.cos() * len, 0.0, theta.sin() * len];
        patches.push(Patch {
            origin: [cx - u[0] / 2.0, 1.0, cz - u[2] / 2.0],
            u,
            v: [0.0, -height, 0.0],
            area: len * height,
        });
    }
    let boxes = rng.random_range(4..=8);
    for _ in 0..boxes {
        let s = [rng.random_range(0.3..1.5), rng.random_range(0.3..2.0), rng.random_range(0.3..1.5)];
        let c = [rng.random_range(-extent..extent), 1.0 - s[1], rng.random_range(-extent..extent)];
        let faces = [
            ([c[0], c[1], c[2]], [s[0], 0.0, 0.0], [0.0, s[1], 0.0]),
            ([c[0], c[1], c[2] + s[2]], [s[0], 0.0, 0.0], [0.0, s[1], 0.0]),
            ([c[0], c[1], c[2]], [0.0, 0.0, s[2]], [0.0, s[1], 0.0]),
            ([c[0] + s[0], c[1], c[2]], [0.0, 0.0, s[2]], [0.0, s[1], 0.0]),
            ([c[0], c[1], c[2]], [s[0], 0.0, 0.0], [0.0, 0.0, s[2]]),
        ];
        for (origin, u, v) in faces {
            let area = crate::geom::norm3(u) * crate::geom::norm3(v);
            patches.push(Patch { origin, u, v, area });
        }
    }
    let total: f64 = patches.iter().map(|p| p.area).sum();
    let clutter = n / 10;
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n - clutter {
        let mut pick = rng.random_range(0.0..total);
        let p = patches
            .iter()
            .find(|p| {
                pick -= p.area;
                pick <= 0.0
            })
            .unwrap_or(&patches[patches.len() - 1]);
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        pts.push([
            p.origin[0] + a * p.u[0] + b * p.v[0],
            p.origin[1] + a * p.u[1] + b * p.v[1],
            p.origin[2] + a * p.u[2] + b * p.v[2],
        ]);
    }
    for _ in 0..clutter {
        pts.push([rng.random_range(-extent..extent), rng.random_range(-2.5..1.0), rng.random_range(-extent..extent)]);
    }
    pts
}

/// Random pose with rotation angle at most `max_rot_deg` about a uniform
/// axis and translation of length at most `max_trans` in a uniform
/// direction.
pub fn random_pose<R: Rng>(rng: &mut R, max_rot_deg: f64, max_trans: f64) -> Pose {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.random_range(0.0..=max_rot_deg.to_radians());
    let len = rng.random_range(0.0..=max_trans);
    let q = Quaternion::from_axis_angle(axis, angle).expect("unit axis");
    Pose::new(q, [dir[0] * len, dir[1] * len, dir[2] * len]).expect("unit quaternion")
}

/// A synthetic pair: `pc2 = gt(pc1)` plus noise and dropout.
pub fn synth_scene(opts: &SynthOptions, seed: u64) -> Result<FramePair> {
    if opts.n_points < 8 {
        return Err(Error::Invalid(format!("synth_scene: need at least 8 points, got {}", opts.n_points)));
    }
    if !(0.0..1.0).contains(&opts.dropout) || opts.noise < 0.0 || opts.max_rot_deg < 0.0 || opts.max_trans < 0.0 {
        return Err(Error::Invalid("synth_scene: dropout must be in [0, 1), other bounds non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = synth_points(&mut rng, opts.n_points, opts.extent);
    let gt = random_pose(&mut rng, opts.max_rot_deg, opts.max_trans);
    let noise = (opts.noise > 0.0).then(|| Normal::new(0.0, opts.noise).expect("positive sigma"));
    let mut moved = Vec::with_capacity(pts.len());
    for &p in &pts {
        let mut q = gt.transform_point(p);
        if let Some(d) = &noise {
            for v in &mut q {
                *v += d.sample(&mut rng);
            }
        }
        moved.push(q);
    }
    if opts.dropout > 0.0 {
        let keep = moved.len() - (moved.len() as f64 * opts.dropout).round() as usize;
        let idx = rand::seq::index::sample(&mut rng, moved.len(), keep).into_vec();
        let mut idx = idx;
        idx.sort_unstable();
        moved = idx.into_iter().map(|i| moved[i]).collect();
    }
    Ok(FramePair {
        pc1: PointCloud::from_points(&pts),
        pc2: PointCloud::from_points(&moved),
        gt,
        sequence: "synth".into(),
        frame: seed as usize,
    })
}

/// Random-access source of training or evaluation pairs.
pub trait Dataset {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> Result<FramePair>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset for Vec<FramePair> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, i: usize) -> Result<FramePair> {
        self.as_slice()
            .get(i)
            .cloned()
            .ok_or(Error::Index {
                op: "dataset",
                index: i,
                bound: self.as_slice().len(),
            })
    }
}

pub const SYNTH_INDEX: &str = "index.txt";
const SYNTH_MAGIC: &str = "pcodom-synth";
const SYNTH_VERSION: u32 = 1;

/// Directory of synthetic pairs.
///
/// `index.txt` starts with `pcodom-synth 1` and `count N`, followed by one
/// line per pair: `id qw qx qy qz tx ty tz`. Each pair's clouds live in
/// `<id>_1.txt` and `<id>_2.txt`, one `x y z` point per line. `id` is a
/// six-digit zero-padded index.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    dir: PathBuf,
    gts: Vec<Pose>,
}

fn cloud_text(pc: &PointCloud) -> String {
    let mut s = String::new();
    for p in pc.points() {
        writeln!(s, "{} {} {}", p[0], p[1], p[2]).unwrap();
    }
    s
}

fn parse_cloud(text: &str, path: &Path) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_floats(line, path, i + 1)?;
        if v.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 3 numbers, found {}", v.len()),
            });
        }
        pts.push([v[0], v[1], v[2]]);
    }
    Ok(PointCloud::from_points(&pts))
}

impl SynthDataset {
    pub fn write(dir: &Path, pairs: &[FramePair]) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = format!("{SYNTH_MAGIC} {SYNTH_VERSION}\ncount {}\n", pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            let q = p.gt.q();
            writeln!(
                index,
                "{i:06} {} {} {} {} {} {} {}",
                q.w, q.x, q.y, q.z, p.gt.t[0], p.gt.t[1], p.gt.t[2]
            )
            .unwrap();
            write_atomic(&dir.join(format!("{i:06}_1.txt")), cloud_text(&p.pc1).as_bytes())?;
            write_atomic(&dir.join(format!("{i:06}_2.txt")), cloud_text(&p.pc2).as_bytes())?;
        }
        write_atomic(&dir.join(SYNTH_INDEX), index.as_bytes())
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(SYNTH_INDEX);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |line: usize, msg: String| Error::Parse {
            path: path.clone(),
            line,
            msg,
        };
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != format!("{SYNTH_MAGIC} {SYNTH_VERSION}") {
            return Err(bad(1, format!("expected header `{SYNTH_MAGIC} {SYNTH_VERSION}`, got {header:?}")));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("count "))
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad(2, "expected `count N`".into()))?;
        let mut gts = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let ln = i + 3;
            let mut fields = line.split_whitespace();
            let id = fields.next().unwrap_or("");
            if id != format!("{:06}", gts.len()) {
                return Err(bad(ln, format!("expected id {:06}, got {id:?}", gts.len())));
            }
            let v = parse_floats(&fields.collect::<Vec<_>>().join(" "), &path, ln)?;
            if v.len() != 7 {
                return Err(bad(ln, format!("expected 7 numbers, found {}", v.len())));
            }
            let pose = Pose::new(Quaternion::new(v[0], v[1], v[2], v[3]), [v[4], v[5], v[6]]).map_err(|e| bad(ln, e.to_string()))?;
            gts.push(pose);
        }
        if gts.len() != count {
            return Err(bad(2, format!("count {count} but {} entries", gts.len())));
        }
        Ok(SynthDataset {
            dir: dir.to_path_buf(),
            gts,
        })
    }

    pub fn gts(&self) -> &[Pose] {
        &self.gts
    }
}

impl Dataset for SynthDataset {
    fn len(&self) -> usize {
        self.gts.len()
    }

    fn get(&self, i: usize) -> Result<FramePair> {
        let gt = *self.gts.get(i).ok_or(Error::Index {
            op: "synthetic dataset",
            index: i,
            bound: self.gts.len(),
        })?;
        let load = |k: u8| -> Result<PointCloud> {
            let path = self.dir.join(format!("{i:06}_{k}.txt"));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            parse_cloud(&text, &path)
        };
        Ok(FramePair {
            pc1: load(1)?,
            pc2: load(2)?,
            gt,
            sequence: "synth".into(),
            frame: i,
        })
    }
}

/// One KITTI odometry sequence under the standard layout:
/// `sequences/NN/velodyne/FFFFFF.bin`, `sequences/NN/calib.txt`,
/// `poses/NN.txt`. Pairs are consecutive frames. Sequences without a poses
/// file yield identity ground truth.
#[derive(Clone, Debug)]
pub struct KittiSequence {
    pub name: String,
    pub calib: Calibration,
    pub frames: Vec<PathBuf>,
    pub poses: Option<Vec<Transform4>>,
    pub preprocess: PreprocessOptions,
}

impl KittiSequence {
    pub fn open(root: &Path, name: &str) -> Result<Self> {
        let seq = root.join("sequences").join(name);
        let calib = read_calib(&seq.join("calib.txt"))?;
        let vdir = seq.join("velodyne");
        let mut frames: Vec<PathBuf> = fs::read_dir(&vdir)
            .map_err(|e| Error::io(&vdir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        frames.sort();
        let pose_path = root.join("poses").join(format!("{name}.txt"));
        let poses = if pose_path.exists() {
            let p = read_poses(&pose_path)?;
            if p.len() != frames.len() {
                return Err(Error::Malformed {
                    path: pose_path,
                    msg: format!("{} poses for {} frames", p.len(), frames.len()),
                });
            }
            Some(p)
        } else {
            None
        };
        Ok(KittiSequence {
            name: name.to_string(),
            calib,
            frames,
            poses,
            preprocess: PreprocessOptions::default(),
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn load_frame(&self, i: usize) -> Result<PointCloud> {
        let raw = read_velodyne_bin(&self.frames[i])?;
        Ok(preprocess(&raw, &self.calib, &self.preprocess))
    }
}

impl Dataset for KittiSequence {
    fn len(&self) -> usize {
        self.frames.len().saturating_sub(1)
    }

    fn get(&self, i: usize) -> Result<FramePair> {
        if i + 1 >= self.frames.len() {
            return Err(Error::Index {
                op: "kitti sequence",
                index: i,
                bound: self.len(),
            });
        }
        let gt = match &self.poses {
            Some(p) => relative_gt(&p[i], &p[i + 1])?,
            None => Pose::IDENTITY,
        };
        Ok(FramePair {
            pc1: self.load_frame(i)?,
            pc2: self.load_frame(i + 1)?,
            gt,
            sequence: self.name.clone(),
            frame: i,
        })
    }
}

/// Largest distance from a warped `pc1` point to its partner in `pc2`,
/// assuming `pc2` lists the same points in the same order.
pub fn warp_residual(pc1: &PointCloud, pc2: &PointCloud, pose: &Pose) -> f64 {
    assert_eq!(pc1.len(), pc2.len(), "paired clouds");
    pc1.points()
        .zip(pc2.points())
        .map(|(a, b)| crate::geom::norm3(crate::geom::sub3(pose.transform_point(a), b)))
        .fold(0.0, f64::max)
}

/// Symmetric chamfer distance (mean of both directed averages), brute force.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let directed = |x: &PointCloud, y: &PointCloud| {
        x.points()
            .map(|p| {
                y.points()
                    .map(|q| crate::geom::norm3(crate::geom::sub3(p, q)))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / x.len().max(1) as f64
    };
    0.5 * (directed(a, b) + directed(b, a))
}
