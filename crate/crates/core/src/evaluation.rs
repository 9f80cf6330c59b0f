//! Trajectory accuracy metrics: APE after first-pose alignment, fixed-distance
//! RPE and loop-closure drift.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Quat, Vec3};

pub const DEFAULT_MAX_DT: f64 = 0.01;
pub const DEFAULT_RPE_DELTA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub position: Vec3,
    pub orientation: Quat,
}

impl TrajectorySample {
    pub fn new(t: f64, position: Vec3, orientation: Quat) -> Self {
        Self { t, position, orientation }
    }

    pub fn pose(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }

    pub fn from_pose(t: f64, pose: &Isometry3<f64>) -> Self {
        Self::new(t, pose.translation.vector, pose.rotation)
    }

    /// Applies `g` on the left (re-expresses the sample in another world frame).
    pub fn transformed(&self, g: &Isometry3<f64>) -> Self {
        Self::from_pose(self.t, &(g * self.pose()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorStats {
    pub rmse: f64,
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

impl ErrorStats {
    pub fn from_errors(e: &[f64]) -> Self {
        if e.is_empty() {
            return Self::default();
        }
        let n = e.len() as f64;
        Self {
            rmse: (e.iter().map(|x| x * x).sum::<f64>() / n).sqrt(),
            mean: e.iter().sum::<f64>() / n,
            max: e.iter().cloned().fold(0.0, f64::max),
            count: e.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpeSegment {
    pub t_start: f64,
    pub t_end: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ape_rmse: f64,
    pub ape_mean: f64,
    pub ape_max: f64,
    pub rpe_delta: f64,
    pub rpe_rmse: f64,
    /// cm per m of ground-truth path.
    pub final_drift: f64,
    pub gt_length: f64,
    pub pairs: usize,
    pub ape_errors: Vec<f64>,
    pub rpe_segments: Vec<RpeSegment>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut s = self.to_json()?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "pairs {}  length {:.3} m  APE rmse {:.4} m  RPE({} m) rmse {:.4} m  final drift {:.4} cm/m",
            self.pairs, self.gt_length, self.ape_rmse, self.rpe_delta, self.rpe_rmse, self.final_drift
        )
    }
}

/// Pairs each estimate with the nearest ground-truth sample in time.
///
/// Both inputs must be sorted by time. Estimates with no ground truth within
/// `max_dt` are dropped.
pub fn associate(
    gt: &[TrajectorySample],
    est: &[TrajectorySample],
    max_dt: f64,
) -> Result<Vec<(TrajectorySample, TrajectorySample)>> {
    let mut out = Vec::new();
    if gt.is_empty() || est.is_empty() {
        return Err(Error::NoAssociation(max_dt));
    }
    for e in est {
        let k = gt.partition_point(|g| g.t < e.t);
        let best = [k.checked_sub(1), (k < gt.len()).then_some(k)]
            .into_iter()
            .flatten()
            .min_by(|a, b| (gt[*a].t - e.t).abs().total_cmp(&(gt[*b].t - e.t).abs()))
            .expect("non-empty gt");
        if (gt[best].t - e.t).abs() <= max_dt + 1e-12 {
            out.push((gt[best], *e));
        }
    }
    if out.is_empty() {
        return Err(Error::NoAssociation(max_dt));
    }
    Ok(out)
}

/// Moves `est` so its first pose coincides with the first pose of `gt`.
pub fn align_first_pose(gt: &[TrajectorySample], est: &[TrajectorySample]) -> Vec<TrajectorySample> {
    let (Some(g0), Some(e0)) = (gt.first(), est.first()) else {
        return Vec::new();
    };
    let align = g0.pose() * e0.pose().inverse();
    est.iter().map(|e| e.transformed(&align)).collect()
}

fn split(pairs: &[(TrajectorySample, TrajectorySample)]) -> (Vec<TrajectorySample>, Vec<TrajectorySample>) {
    pairs.iter().cloned().unzip()
}

/// Per-pair translational error after first-pose alignment.
pub fn ape_errors(pairs: &[(TrajectorySample, TrajectorySample)]) -> Vec<f64> {
    let (gt, est) = split(pairs);
    let aligned = align_first_pose(&gt, &est);
    gt.iter().zip(&aligned).map(|(g, e)| (g.position - e.position).norm()).collect()
}

pub fn ape(pairs: &[(TrajectorySample, TrajectorySample)]) -> Result<ErrorStats> {
    if pairs.is_empty() {
        return Err(Error::NoAssociation(0.0));
    }
    Ok(ErrorStats::from_errors(&ape_errors(pairs)))
}

/// Cumulative chord length along a trajectory.
pub fn cumulative_length(traj: &[TrajectorySample]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(traj.len());
    for (k, s) in traj.iter().enumerate() {
        if k > 0 {
            acc += (s.position - traj[k - 1].position).norm();
        }
        out.push(acc);
    }
    out
}

pub fn trajectory_length(traj: &[TrajectorySample]) -> f64 {
    cumulative_length(traj).last().copied().unwrap_or(0.0)
}

/// Relative pose error over overlapping segments of `delta` metres of
/// ground-truth arc length, one segment per start sample.
pub fn rpe_segments(pairs: &[(TrajectorySample, TrajectorySample)], delta: f64) -> Result<Vec<RpeSegment>> {
    let (gt, est) = split(pairs);
    let s = cumulative_length(&gt);
    let length = s.last().copied().unwrap_or(0.0);
    if !(delta > 0.0) || length + 1e-9 < delta {
        return Err(Error::TrajectoryTooShort { length, delta });
    }
    let mut out = Vec::new();
    let mut j = 0;
    for i in 0..gt.len() {
        j = j.max(i);
        while j < gt.len() && s[j] - s[i] < delta - 1e-9 {
            j += 1;
        }
        if j == gt.len() {
            break;
        }
        let rel_gt = gt[i].orientation.inverse() * (gt[j].position - gt[i].position);
        let rel_est = est[i].orientation.inverse() * (est[j].position - est[i].position);
        out.push(RpeSegment {
            t_start: gt[i].t,
            t_end: gt[j].t,
            error: (rel_gt - rel_est).norm(),
        });
    }
    Ok(out)
}

pub fn rpe(pairs: &[(TrajectorySample, TrajectorySample)], delta: f64) -> Result<ErrorStats> {
    let e: Vec<f64> = rpe_segments(pairs, delta)?.iter().map(|s| s.error).collect();
    Ok(ErrorStats::from_errors(&e))
}

/// Start-to-end gap of a loop trajectory in cm per metre travelled.
pub fn final_drift(est: &[TrajectorySample], trajectory_length: f64) -> f64 {
    match (est.first(), est.last()) {
        (Some(a), Some(b)) if trajectory_length > 0.0 => 100.0 * (b.position - a.position).norm() / trajectory_length,
        _ => 0.0,
    }
}

pub fn evaluate(gt: &[TrajectorySample], est: &[TrajectorySample], delta: f64, max_dt: f64) -> Result<MetricReport> {
    let pairs = associate(gt, est, max_dt)?;
    let ape_e = ape_errors(&pairs);
    let ape_s = ErrorStats::from_errors(&ape_e);
    let segments = rpe_segments(&pairs, delta)?;
    let rpe_e: Vec<f64> = segments.iter().map(|s| s.error).collect();
    let (gt_p, est_p) = split(&pairs);
    let gt_length = trajectory_length(&gt_p);
    Ok(MetricReport {
        ape_rmse: ape_s.rmse,
        ape_mean: ape_s.mean,
        ape_max: ape_s.max,
        rpe_delta: delta,
        rpe_rmse: ErrorStats::from_errors(&rpe_e).rmse,
        final_drift: final_drift(&est_p, gt_length),
        gt_length,
        pairs: pairs.len(),
        ape_errors: ape_e,
        rpe_segments: segments,
    })
}

/// Parses a TUM trajectory (`t x y z qx qy qz qw`); `#` starts a comment.
pub fn read_tum<R: BufRead>(reader: R) -> Result<Vec<TrajectorySample>> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let vals: Vec<f64> = body
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: k + 1,
                msg: e.to_string(),
            })?;
        if vals.len() != 8 || vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: k + 1,
                msg: format!("expected 8 finite values, got {}", vals.len()),
            });
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if q.norm() < 1e-9 {
            return Err(Error::Parse {
                line: k + 1,
                msg: "zero quaternion".into(),
            });
        }
        out.push(TrajectorySample::new(
            vals[0],
            Vec3::new(vals[1], vals[2], vals[3]),
            UnitQuaternion::from_quaternion(q),
        ));
    }
    Ok(out)
}

pub fn read_tum_file(path: &Path) -> Result<Vec<TrajectorySample>> {
    let f = std::fs::File::open(path)?;
    read_tum(std::io::BufReader::new(f))
}

pub fn format_tum_line(s: &TrajectorySample) -> String {
    let p = s.position;
    let q = s.orientation.quaternion();
    format!(
        "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
        s.t, p.x, p.y, p.z, q.i, q.j, q.k, q.w
    )
}

pub fn write_tum<W: Write>(mut w: W, traj: &[TrajectorySample]) -> Result<()> {
    for s in traj {
        writeln!(w, "{}", format_tum_line(s))?;
    }
    Ok(())
}
