//! Trajectories and the KITTI odometry error metrics.
//!
//! Relative poses follow the pair convention of [`crate::kittio`]: the
//! relative pose `T_k` maps frame-`k` coordinates into frame `k+1`, and
//! absolute poses map frame coordinates into the first frame, so
//! `P_{k+1} = P_k · T_k⁻¹`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{norm3, Pose, Transform4};
use crate::kittio::poses_text;
use crate::tensor::write_atomic;

pub const LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Transform4>,
    /// Cumulative path length at each frame, meters.
    pub arc: Vec<f64>,
}

impl Trajectory {
    pub fn from_poses(poses: Vec<Transform4>) -> Self {
        let mut arc = Vec::with_capacity(poses.len());
        let mut d = 0.0;
        for (i, p) in poses.iter().enumerate() {
            if i > 0 {
                d += norm3(crate::geom::sub3(p.translation(), poses[i - 1].translation()));
            }
            arc.push(d);
        }
        Trajectory { poses, arc }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn total_length(&self) -> f64 {
        self.arc.last().copied().unwrap_or(0.0)
    }
}

/// Chains relative poses into absolute ones starting at the identity; `n`
/// relatives give `n + 1` frames.
pub fn accumulate(relatives: &[Pose]) -> Trajectory {
    let mut poses = Vec::with_capacity(relatives.len() + 1);
    let mut cur = Transform4::IDENTITY;
    poses.push(cur);
    for r in relatives {
        cur = cur * r.to_matrix().inverse_rigid();
        poses.push(cur);
    }
    Trajectory::from_poses(poses)
}

/// Mean errors for one subsequence length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LengthError {
    pub length: f64,
    pub samples: usize,
    /// Percent.
    pub t_err: f64,
    /// Degrees per 100 m.
    pub r_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryMetrics {
    /// Percent.
    pub t_rel: f64,
    /// Degrees per 100 m.
    pub r_rel: f64,
    pub per_length: Vec<LengthError>,
    /// Set when no subsequence of 100 m exists.
    pub insufficient_length: bool,
}

/// Rotation angle of `m` in radians via the trace formula, clamped.
pub fn rotation_angle(m: &Transform4) -> f64 {
    let tr = m.m[0][0] + m.m[1][1] + m.m[2][2];
    (0.5 * (tr - 1.0)).clamp(-1.0, 1.0).acos()
}

fn last_frame_from(arc: &[f64], first: usize, len: f64) -> Option<usize> {
    (first..arc.len()).find(|&i| arc[i] > arc[first] + len)
}

/// Averages over every start frame and every length in [`LENGTHS`]; the
/// subsequence ends at the first frame whose ground-truth arc length
/// exceeds start + L.
pub fn kitti_errors(est: &Trajectory, gt: &Trajectory) -> Result<TrajectoryMetrics> {
    if est.len() != gt.len() {
        return Err(Error::Invalid(format!(
            "trajectory lengths differ: {} estimated, {} ground truth",
            est.len(),
            gt.len()
        )));
    }
    let per_length: Vec<LengthError> = LENGTHS
        .par_iter()
        .map(|&len| {
            let (mut t_sum, mut r_sum, mut n) = (0.0, 0.0, 0usize);
            for first in 0..gt.len() {
                let Some(last) = last_frame_from(&gt.arc, first, len) else {
                    continue;
                };
                let gt_rel = gt.poses[first].inverse_rigid() * gt.poses[last];
                let est_rel = est.poses[first].inverse_rigid() * est.poses[last];
                let e = gt_rel.inverse_rigid() * est_rel;
                t_sum += norm3(e.translation()) / len;
                r_sum += rotation_angle(&e) / len;
                n += 1;
            }
            let mean = |s: f64| if n > 0 { s / n as f64 } else { 0.0 };
            LengthError {
                length: len,
                samples: n,
                t_err: 100.0 * mean(t_sum),
                r_err: 100.0 * mean(r_sum).to_degrees(),
            }
        })
        .collect();
    let valid: Vec<&LengthError> = per_length.iter().filter(|e| e.samples > 0).collect();
    let k = valid.len().max(1) as f64;
    Ok(TrajectoryMetrics {
        t_rel: valid.iter().map(|e| e.t_err).sum::<f64>() / k,
        r_rel: valid.iter().map(|e| e.r_err).sum::<f64>() / k,
        insufficient_length: valid.is_empty(),
        per_length,
    })
}

pub const PATH_COLUMNS: [&str; 4] = ["frame", "x", "y", "z"];
pub const PATH2D_COLUMNS: [&str; 3] = ["frame", "x", "z"];
pub const ERROR_COLUMNS: [&str; 5] = ["sequence", "length", "samples", "t_err_percent", "r_err_deg_per_100m"];

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// `frame,x,y,z` rows of the camera positions.
pub fn path_csv(t: &Trajectory) -> Result<String> {
    csv_text(
        &PATH_COLUMNS,
        t.poses.iter().enumerate().map(|(i, p)| {
            let c = p.translation();
            vec![i.to_string(), c[0].to_string(), c[1].to_string(), c[2].to_string()]
        }),
    )
}

/// Bird's-eye `frame,x,z` rows.
pub fn path2d_csv(t: &Trajectory) -> Result<String> {
    csv_text(
        &PATH2D_COLUMNS,
        t.poses.iter().enumerate().map(|(i, p)| {
            let c = p.translation();
            vec![i.to_string(), c[0].to_string(), c[2].to_string()]
        }),
    )
}

pub fn read_path_csv(text: &str) -> Result<Vec<[f64; 3]>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != PATH_COLUMNS.len() {
            return Err(Error::Invalid(format!("path row has {} fields", rec.len())));
        }
        let f = |i: usize| rec[i].parse::<f64>().map_err(|_| Error::Invalid(format!("bad number {:?}", &rec[i])));
        out.push([f(1)?, f(2)?, f(3)?]);
    }
    Ok(out)
}

/// Per-length error table for named sequences.
pub fn errors_csv(metrics: &[(String, TrajectoryMetrics)]) -> Result<String> {
    csv_text(
        &ERROR_COLUMNS,
        metrics.iter().flat_map(|(name, m)| {
            m.per_length.iter().map(move |e| {
                vec![
                    name.clone(),
                    e.length.to_string(),
                    e.samples.to_string(),
                    e.t_err.to_string(),
                    e.r_err.to_string(),
                ]
            })
        }),
    )
}

/// One named trajectory for plotting.
pub struct PlotTrajectory<'a> {
    pub name: String,
    pub trajectory: &'a Trajectory,
}

/// Writes `<name>_path.csv`, `<name>_path2d.csv` and `<name>.txt` (KITTI
/// pose format) per trajectory, and `errors.csv` for the metrics. Returns
/// the files written.
pub fn emit_plot_data(trajectories: &[PlotTrajectory<'_>], metrics: &[(String, TrajectoryMetrics)], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        let path = out_dir.join(name);
        write_atomic(&path, text.as_bytes())?;
        files.push(path);
        Ok(())
    };
    for t in trajectories {
        put(format!("{}_path.csv", t.name), path_csv(t.trajectory)?)?;
        put(format!("{}_path2d.csv", t.name), path2d_csv(t.trajectory)?)?;
        put(format!("{}.txt", t.name), poses_text(&t.trajectory.poses))?;
    }
    put("errors.csv".into(), errors_csv(metrics)?)?;
    Ok(files)
}

/// Plain-text table: one row per sequence plus the mean.
pub fn metrics_table(metrics: &[(String, TrajectoryMetrics)]) -> String {
    let mut s = String::new();
    writeln!(s, "{:<10} {:>10} {:>14}", "sequence", "t_rel(%)", "r_rel(deg/100m)").unwrap();
    for (name, m) in metrics {
        let note = if m.insufficient_length { "  insufficient length" } else { "" };
        writeln!(s, "{name:<10} {:>10.4} {:>14.4}{note}", m.t_rel, m.r_rel).unwrap();
    }
    if metrics.len() > 1 {
        let n = metrics.len() as f64;
        let t = metrics.iter().map(|(_, m)| m.t_rel).sum::<f64>() / n;
        let r = metrics.iter().map(|(_, m)| m.r_rel).sum::<f64>() / n;
        writeln!(s, "{:<10} {t:>10.4} {r:>14.4}", "mean").unwrap();
    }
    s
}
