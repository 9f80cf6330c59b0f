//! JSON Lines datasets, flat key-value run configuration and the
//! file-driven estimator runner.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{initial_velocity, Estimator, EstimatorConfig, InitialPose, ScanLog, TickRecord};
use crate::evaluation::{
    evaluate, format_tum_line, read_tum, MetricReport, TrajectorySample, DEFAULT_MAX_DT, DEFAULT_RPE_DELTA,
};
use crate::geometry::{so3_exp, CameraIntrinsics, Quat, Vec3};
use crate::propagation::{ImuSample, PropagationMode};
use crate::radar::{RadarScan, RadarTarget};
use crate::simulator::{preset, simulate, Dataset, GtPose};
use crate::vision::{PixelFrame, PixelObservation};

/// Cross-type latency tolerated by the reordering buffer [s].
pub const REORDER_WINDOW: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub d: f64,
    pub theta: f64,
    pub phi: f64,
    pub v_r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: u32,
    pub h: u32,
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DatasetRecord {
    Imu {
        t: f64,
        f: [f64; 3],
        w: [f64; 3],
    },
    Radar {
        t: f64,
        t_start: f64,
        t_end: f64,
        targets: Vec<TargetRecord>,
    },
    Features {
        t: f64,
        intr: IntrinsicsRecord,
        obs: Vec<PixelObservation>,
    },
    Gt {
        t: f64,
        p: [f64; 3],
        /// w, x, y, z
        q: [f64; 4],
    },
}

impl DatasetRecord {
    pub fn t(&self) -> f64 {
        match self {
            Self::Imu { t, .. } | Self::Radar { t, .. } | Self::Features { t, .. } | Self::Gt { t, .. } => *t,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Imu { .. } => "imu",
            Self::Radar { .. } => "radar",
            Self::Features { .. } => "features",
            Self::Gt { .. } => "gt",
        }
    }

    /// Tie-break order for records sharing a timestamp.
    fn rank(&self) -> u8 {
        match self {
            Self::Gt { .. } => 0,
            Self::Imu { .. } => 1,
            Self::Radar { .. } => 2,
            Self::Features { .. } => 3,
        }
    }

    pub fn from_imu(s: &ImuSample) -> Self {
        Self::Imu {
            t: s.t,
            f: s.f_tilde.into(),
            w: s.w_tilde.into(),
        }
    }

    pub fn from_radar(s: &RadarScan) -> Self {
        Self::Radar {
            t: s.t_mid(),
            t_start: s.t_start,
            t_end: s.t_end,
            targets: s
                .targets
                .iter()
                .map(|x| TargetRecord {
                    d: x.d,
                    theta: x.theta,
                    phi: x.phi,
                    v_r: x.v_r,
                })
                .collect(),
        }
    }

    pub fn from_features(f: &PixelFrame) -> Self {
        let i = &f.intrinsics;
        Self::Features {
            t: f.t,
            intr: IntrinsicsRecord {
                fx: i.fx,
                fy: i.fy,
                cx: i.cx,
                cy: i.cy,
                w: i.width,
                h: i.height,
            },
            obs: f.obs.clone(),
        }
    }

    pub fn from_gt(g: &GtPose) -> Self {
        let q = g.q.quaternion();
        Self::Gt {
            t: g.t,
            p: g.p.into(),
            q: [q.w, q.i, q.j, q.k],
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            Self::Imu { t, f, w } => {
                if !(finite(&[*t]) && finite(f) && finite(w)) {
                    return Err("non-finite imu value".into());
                }
            }
            Self::Radar {
                t,
                t_start,
                t_end,
                targets,
            } => {
                if !finite(&[*t, *t_start, *t_end]) || t_end < t_start {
                    return Err("invalid radar scan interval".into());
                }
                if targets.iter().any(|x| !(finite(&[x.d, x.theta, x.phi, x.v_r]) && x.d > 0.0)) {
                    return Err("invalid radar target".into());
                }
            }
            Self::Features { t, intr, obs } => {
                if !finite(&[*t]) || obs.iter().any(|o| !finite(&[o.u, o.v])) {
                    return Err("non-finite feature value".into());
                }
                CameraIntrinsics::new(intr.fx, intr.fy, intr.cx, intr.cy, intr.w, intr.h).map_err(|e| e.to_string())?;
            }
            Self::Gt { t, p, q } => {
                if !(finite(&[*t]) && finite(p) && finite(q)) || q.iter().map(|x| x * x).sum::<f64>() < 1e-12 {
                    return Err("invalid ground-truth pose".into());
                }
            }
        }
        Ok(())
    }
}

fn gt_sample(t: f64, p: &[f64; 3], q: &[f64; 4]) -> TrajectorySample {
    TrajectorySample::new(
        t,
        Vec3::from(*p),
        UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])),
    )
}

/// All records of a dataset in timestamp order.
pub fn dataset_records(d: &Dataset) -> Vec<DatasetRecord> {
    let mut out: Vec<DatasetRecord> = d
        .imu
        .iter()
        .map(DatasetRecord::from_imu)
        .chain(d.radar.iter().map(DatasetRecord::from_radar))
        .chain(d.features.iter().map(DatasetRecord::from_features))
        .chain(d.gt.iter().map(DatasetRecord::from_gt))
        .collect();
    out.sort_by(|a, b| a.t().total_cmp(&b.t()).then(a.rank().cmp(&b.rank())));
    out
}

pub fn write_dataset<W: Write>(d: &Dataset, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    for r in dataset_records(d) {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_file(d: &Dataset, path: &Path) -> Result<()> {
    write_dataset(d, std::fs::File::create(path)?)
}

/// Streams records from a JSON Lines source, checking per-type time order.
pub struct DatasetReader<R> {
    lines: std::io::Lines<R>,
    line: usize,
    last: BTreeMap<&'static str, f64>,
}

impl<R: BufRead> DatasetReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines(),
            line: 0,
            last: BTreeMap::new(),
        }
    }
}

impl<R: BufRead> Iterator for DatasetReader<R> {
    type Item = Result<DatasetRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line += 1;
            if line.trim().is_empty() {
                continue;
            }
            let line_no = self.line;
            let rec: DatasetRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    return Some(Err(Error::Parse {
                        line: line_no,
                        msg: e.to_string(),
                    }))
                }
            };
            if let Err(msg) = rec.validate() {
                return Some(Err(Error::Parse { line: line_no, msg }));
            }
            let kind = rec.kind();
            if let Some(prev) = self.last.get(kind) {
                if rec.t() < *prev {
                    return Some(Err(Error::OutOfOrder {
                        line: line_no,
                        kind,
                        t: rec.t(),
                    }));
                }
            }
            self.last.insert(kind, rec.t());
            return Some(Ok(rec));
        }
    }
}

pub fn open_dataset(path: &Path) -> Result<DatasetReader<BufReader<std::fs::File>>> {
    Ok(DatasetReader::new(BufReader::new(std::fs::File::open(path)?)))
}

/// Reads a whole dataset into memory.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut d = Dataset::default();
    for rec in DatasetReader::new(reader) {
        match rec? {
            DatasetRecord::Imu { t, f, w } => d.imu.push(ImuSample {
                t,
                f_tilde: f.into(),
                w_tilde: w.into(),
            }),
            DatasetRecord::Radar {
                t_start,
                t_end,
                targets,
                ..
            } => d.radar.push(radar_scan(t_start, t_end, &targets)),
            DatasetRecord::Features { t, intr, obs } => d.features.push(pixel_frame(t, &intr, obs)),
            DatasetRecord::Gt { t, p, q } => {
                let s = gt_sample(t, &p, &q);
                d.gt.push(GtPose {
                    t,
                    p: s.position,
                    q: s.orientation,
                })
            }
        }
    }
    Ok(d)
}

fn radar_scan(t_start: f64, t_end: f64, targets: &[TargetRecord]) -> RadarScan {
    RadarScan {
        t_start,
        t_end,
        targets: targets
            .iter()
            .map(|x| RadarTarget {
                d: x.d,
                theta: x.theta,
                phi: x.phi,
                v_r: x.v_r,
                snr: None,
            })
            .collect(),
    }
}

fn pixel_frame(t: f64, intr: &IntrinsicsRecord, obs: Vec<PixelObservation>) -> PixelFrame {
    PixelFrame {
        t,
        intrinsics: CameraIntrinsics {
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            width: intr.w,
            height: intr.h,
        },
        obs,
    }
}

/// Writes the dataset of a named preset.
pub fn simulate_to_file(preset_name: &str, seed: u64, out: &Path) -> Result<Dataset> {
    let d = simulate(&preset(preset_name, seed)?)?;
    write_dataset_file(&d, out)?;
    Ok(d)
}

/// Everything a run needs besides the dataset records.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub estimator: EstimatorConfig,
    pub dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Start from the first ground-truth poses when the dataset has them.
    pub init_from_gt: bool,
    pub init_p: Vec3,
    /// Body to inertial.
    pub init_q: Quat,
    pub init_v: Vec3,
    pub rpe_delta: f64,
    pub max_dt: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorConfig::default(),
            dataset: None,
            output_dir: PathBuf::from("out"),
            seed: 0,
            init_from_gt: true,
            init_p: Vec3::zeros(),
            init_q: Quat::identity(),
            init_v: Vec3::zeros(),
            rpe_delta: DEFAULT_RPE_DELTA,
            max_dt: DEFAULT_MAX_DT,
        }
    }
}

/// Documented configuration keys.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("dataset", "path of the JSON Lines dataset"),
    ("output_dir", "directory for trajectory.tum, inliers.csv and metrics.json"),
    ("seed", "seed recorded with the run"),
    ("noise.w_f", "accelerometer noise density [m/s^2/sqrt(Hz)]"),
    ("noise.w_omega", "gyroscope noise density [rad/s/sqrt(Hz)]"),
    ("noise.w_ba", "accelerometer bias random walk [m/s^3/sqrt(Hz)]"),
    ("noise.w_bg", "gyroscope bias random walk [rad/s^2/sqrt(Hz)]"),
    ("noise.w_r", "extra position noise density"),
    ("noise.w_rbc", "camera lever-arm random walk"),
    ("noise.w_qbc", "camera rotation random walk"),
    ("noise.w_rbr", "radar lever-arm random walk"),
    ("noise.w_qbr", "radar rotation random walk"),
    ("noise.w_mu", "feature bearing random walk"),
    ("noise.w_rho", "feature inverse-depth random walk"),
    ("noise.freeze_camera_extrinsics", "keep camera extrinsics fixed (true/false)"),
    ("gravity", "gravity vector in the inertial frame, x,y,z [m/s^2]"),
    ("propagation", "averaged | per-sample"),
    ("iekf.max_iterations", "iterations per update"),
    ("iekf.step_tolerance", "convergence threshold on the correction norm"),
    ("radar.enabled", "apply radar updates"),
    ("radar.sigma_vr", "radial-speed noise [m/s]"),
    ("radar.gate", "enable the chi-squared gate"),
    ("radar.gate_confidence", "gate confidence in (0, 1)"),
    ("radar.depth_hints", "initialize feature depth from the radar map"),
    ("vision.enabled", "apply feature updates"),
    ("vision.sigma_px", "pixel noise [px]"),
    ("vision.gate", "enable the chi-squared gate"),
    ("vision.gate_confidence", "gate confidence in (0, 1)"),
    ("vision.max_misses", "frames a feature may go unobserved"),
    ("vision.d_default", "fallback depth without active features [m]"),
    ("vision.hint_range_sigma", "range standard deviation of a radar hint [m]"),
    ("vision.patch_halfsize", "feature patch half-size [px]"),
    ("filter.capacity", "feature slots N_F"),
    ("voxel.size", "voxel edge length [m]"),
    ("voxel.d_max", "map range around the radar [m]"),
    ("voxel.delta_d", "minimum point spacing inside a voxel [m]"),
    ("voxel.n_max", "points per voxel"),
    ("voxel.n_min", "points required for a depth hint"),
    ("voxel.window", "point lifetime [s]"),
    ("init.from_gt", "start from the first ground-truth poses when present"),
    ("init.p", "initial position x,y,z [m]"),
    ("init.q", "initial attitude w,x,y,z (body to inertial)"),
    ("init.v", "initial inertial velocity x,y,z [m/s]"),
    ("init.sigma_p", "initial position std [m]"),
    ("init.sigma_v", "initial velocity std [m/s]"),
    ("init.sigma_att", "initial attitude std [rad]"),
    ("init.sigma_ba", "initial accelerometer bias std [m/s^2]"),
    ("init.sigma_bg", "initial gyroscope bias std [rad/s]"),
    ("init.sigma_r_bc", "camera lever-arm std [m]"),
    ("init.sigma_q_bc", "camera rotation std [rad]"),
    ("init.sigma_r_br", "radar lever-arm std [m]"),
    ("init.sigma_q_br", "radar rotation std [rad]"),
    ("extrinsic.r_bc", "camera position in the body frame x,y,z [m]"),
    ("extrinsic.q_bc", "body-to-camera rotation w,x,y,z"),
    ("extrinsic.r_br", "radar position in the body frame x,y,z [m]"),
    ("extrinsic.q_br", "body-to-radar rotation w,x,y,z"),
    ("extrinsic.estimate_camera", "estimate the camera extrinsics"),
    ("extrinsic.estimate_radar", "estimate the radar extrinsics"),
    ("output.rate", "trajectory output rate [Hz]"),
    ("eval.rpe_delta", "RPE segment length [m]"),
    ("eval.max_dt", "association tolerance [s]"),
];

fn parse_f64(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| format!("'{v}' is not a number"))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("'{v}' is not finite"))
    }
}

fn parse_list(v: &str, n: usize) -> std::result::Result<Vec<f64>, String> {
    let xs = v
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(parse_f64)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if xs.len() != n {
        return Err(format!("expected {n} values, got {}", xs.len()));
    }
    Ok(xs)
}

fn parse_vec3(v: &str) -> std::result::Result<Vec3, String> {
    Ok(Vec3::from_row_slice(&parse_list(v, 3)?))
}

fn parse_quat(v: &str) -> std::result::Result<Quat, String> {
    let q = parse_list(v, 4)?;
    let q = Quaternion::new(q[0], q[1], q[2], q[3]);
    if q.norm() < 1e-9 {
        return Err("zero quaternion".into());
    }
    Ok(UnitQuaternion::from_quaternion(q))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("'{v}' is not a boolean")),
    }
}

fn parse_usize(v: &str) -> std::result::Result<usize, String> {
    v.parse().map_err(|_| format!("'{v}' is not a non-negative integer"))
}

fn fmt_vec3(v: &Vec3) -> String {
    format!("{},{},{}", v.x, v.y, v.z)
}

fn fmt_quat(q: &Quat) -> String {
    let q = q.quaternion();
    format!("{},{},{},{}", q.w, q.i, q.j, q.k)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let e = &mut self.estimator;
        let s = &mut e.init_std;
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "seed" => self.seed = value.parse().map_err(|_| format!("'{value}' is not a seed"))?,
            "noise.w_f" => e.noise.w_f = parse_f64(value)?,
            "noise.w_omega" => e.noise.w_omega = parse_f64(value)?,
            "noise.w_ba" => e.noise.w_ba = parse_f64(value)?,
            "noise.w_bg" => e.noise.w_bg = parse_f64(value)?,
            "noise.w_r" => e.noise.w_r = parse_f64(value)?,
            "noise.w_rbc" => e.noise.w_rbc = parse_f64(value)?,
            "noise.w_qbc" => e.noise.w_qbc = parse_f64(value)?,
            "noise.w_rbr" => e.noise.w_rbr = parse_f64(value)?,
            "noise.w_qbr" => e.noise.w_qbr = parse_f64(value)?,
            "noise.w_mu" => e.noise.w_mu = parse_f64(value)?,
            "noise.w_rho" => e.noise.w_rho = parse_f64(value)?,
            "noise.freeze_camera_extrinsics" => e.noise.freeze_camera_extrinsics = parse_bool(value)?,
            "gravity" => e.gravity.g = parse_vec3(value)?,
            "propagation" => {
                e.mode = match value {
                    "averaged" => PropagationMode::Averaged,
                    "per-sample" => PropagationMode::PerSample,
                    _ => return Err(format!("unknown propagation mode '{value}'")),
                }
            }
            "iekf.max_iterations" => {
                e.iekf.max_iterations = parse_usize(value)?;
                e.vision.iekf.max_iterations = e.iekf.max_iterations;
            }
            "iekf.step_tolerance" => {
                e.iekf.step_tolerance = parse_f64(value)?;
                e.vision.iekf.step_tolerance = e.iekf.step_tolerance;
            }
            "radar.enabled" => e.use_radar = parse_bool(value)?,
            "radar.sigma_vr" => e.radar_noise.sigma_vr = parse_f64(value)?,
            "radar.gate" => e.radar_gate.enabled = parse_bool(value)?,
            "radar.gate_confidence" => e.radar_gate.confidence = parse_f64(value)?,
            "radar.depth_hints" => e.radar_depth_hints = parse_bool(value)?,
            "vision.enabled" => e.use_vision = parse_bool(value)?,
            "vision.sigma_px" => e.vision.sigma_px = parse_f64(value)?,
            "vision.gate" => e.vision.gate.enabled = parse_bool(value)?,
            "vision.gate_confidence" => e.vision.gate.confidence = parse_f64(value)?,
            "vision.max_misses" => {
                e.vision.max_misses = value.parse().map_err(|_| format!("'{value}' is not a count"))?
            }
            "vision.d_default" => e.vision.d_default = parse_f64(value)?,
            "vision.hint_range_sigma" => e.vision.hint_range_sigma = parse_f64(value)?,
            "vision.patch_halfsize" => e.patch_halfsize_px = parse_f64(value)?,
            "filter.capacity" => e.capacity = parse_usize(value)?,
            "voxel.size" => e.voxel.voxel_size = parse_f64(value)?,
            "voxel.d_max" => e.voxel.kappa_d_max = parse_f64(value)?,
            "voxel.delta_d" => e.voxel.kappa_delta_d = parse_f64(value)?,
            "voxel.n_max" => e.voxel.kappa_n_max = parse_usize(value)?,
            "voxel.n_min" => e.voxel.kappa_n_min = parse_usize(value)?,
            "voxel.window" => e.voxel.window_duration = parse_f64(value)?,
            "init.from_gt" => self.init_from_gt = parse_bool(value)?,
            "init.p" => self.init_p = parse_vec3(value)?,
            "init.q" => self.init_q = parse_quat(value)?,
            "init.v" => self.init_v = parse_vec3(value)?,
            "init.sigma_p" => s.p = parse_f64(value)?,
            "init.sigma_v" => s.v = parse_f64(value)?,
            "init.sigma_att" => s.att = parse_f64(value)?,
            "init.sigma_ba" => s.b_a = parse_f64(value)?,
            "init.sigma_bg" => s.b_g = parse_f64(value)?,
            "init.sigma_r_bc" => s.r_bc = parse_f64(value)?,
            "init.sigma_q_bc" => s.q_bc = parse_f64(value)?,
            "init.sigma_r_br" => s.r_br = parse_f64(value)?,
            "init.sigma_q_br" => s.q_br = parse_f64(value)?,
            "extrinsic.r_bc" => e.extrinsics.r_bc = parse_vec3(value)?,
            "extrinsic.q_bc" => e.extrinsics.q_b_c = parse_quat(value)?,
            "extrinsic.r_br" => e.extrinsics.r_br = parse_vec3(value)?,
            "extrinsic.q_br" => e.extrinsics.q_b_r = parse_quat(value)?,
            "extrinsic.estimate_camera" => e.estimate_camera_extrinsics = parse_bool(value)?,
            "extrinsic.estimate_radar" => e.estimate_radar_extrinsics = parse_bool(value)?,
            "output.rate" => e.output_rate = parse_f64(value)?,
            "eval.rpe_delta" => self.rpe_delta = parse_f64(value)?,
            "eval.max_dt" => self.max_dt = parse_f64(value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: k + 1,
                msg: "expected key = value".into(),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|msg| Error::Parse { line: k + 1, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        if !(self.rpe_delta > 0.0 && self.max_dt > 0.0) {
            return Err(Error::InvalidConfig("evaluation parameters must be > 0".into()));
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let e = &self.estimator;
        let s = &e.init_std;
        match key {
            "dataset" => self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "output_dir" => self.output_dir.display().to_string(),
            "seed" => self.seed.to_string(),
            "noise.w_f" => e.noise.w_f.to_string(),
            "noise.w_omega" => e.noise.w_omega.to_string(),
            "noise.w_ba" => e.noise.w_ba.to_string(),
            "noise.w_bg" => e.noise.w_bg.to_string(),
            "noise.w_r" => e.noise.w_r.to_string(),
            "noise.w_rbc" => e.noise.w_rbc.to_string(),
            "noise.w_qbc" => e.noise.w_qbc.to_string(),
            "noise.w_rbr" => e.noise.w_rbr.to_string(),
            "noise.w_qbr" => e.noise.w_qbr.to_string(),
            "noise.w_mu" => e.noise.w_mu.to_string(),
            "noise.w_rho" => e.noise.w_rho.to_string(),
            "noise.freeze_camera_extrinsics" => e.noise.freeze_camera_extrinsics.to_string(),
            "gravity" => fmt_vec3(&e.gravity.g),
            "propagation" => match e.mode {
                PropagationMode::Averaged => "averaged".into(),
                PropagationMode::PerSample => "per-sample".into(),
            },
            "iekf.max_iterations" => e.iekf.max_iterations.to_string(),
            "iekf.step_tolerance" => e.iekf.step_tolerance.to_string(),
            "radar.enabled" => e.use_radar.to_string(),
            "radar.sigma_vr" => e.radar_noise.sigma_vr.to_string(),
            "radar.gate" => e.radar_gate.enabled.to_string(),
            "radar.gate_confidence" => e.radar_gate.confidence.to_string(),
            "radar.depth_hints" => e.radar_depth_hints.to_string(),
            "vision.enabled" => e.use_vision.to_string(),
            "vision.sigma_px" => e.vision.sigma_px.to_string(),
            "vision.gate" => e.vision.gate.enabled.to_string(),
            "vision.gate_confidence" => e.vision.gate.confidence.to_string(),
            "vision.max_misses" => e.vision.max_misses.to_string(),
            "vision.d_default" => e.vision.d_default.to_string(),
            "vision.hint_range_sigma" => e.vision.hint_range_sigma.to_string(),
            "vision.patch_halfsize" => e.patch_halfsize_px.to_string(),
            "filter.capacity" => e.capacity.to_string(),
            "voxel.size" => e.voxel.voxel_size.to_string(),
            "voxel.d_max" => e.voxel.kappa_d_max.to_string(),
            "voxel.delta_d" => e.voxel.kappa_delta_d.to_string(),
            "voxel.n_max" => e.voxel.kappa_n_max.to_string(),
            "voxel.n_min" => e.voxel.kappa_n_min.to_string(),
            "voxel.window" => e.voxel.window_duration.to_string(),
            "init.from_gt" => self.init_from_gt.to_string(),
            "init.p" => fmt_vec3(&self.init_p),
            "init.q" => fmt_quat(&self.init_q),
            "init.v" => fmt_vec3(&self.init_v),
            "init.sigma_p" => s.p.to_string(),
            "init.sigma_v" => s.v.to_string(),
            "init.sigma_att" => s.att.to_string(),
            "init.sigma_ba" => s.b_a.to_string(),
            "init.sigma_bg" => s.b_g.to_string(),
            "init.sigma_r_bc" => s.r_bc.to_string(),
            "init.sigma_q_bc" => s.q_bc.to_string(),
            "init.sigma_r_br" => s.r_br.to_string(),
            "init.sigma_q_br" => s.q_br.to_string(),
            "extrinsic.r_bc" => fmt_vec3(&e.extrinsics.r_bc),
            "extrinsic.q_bc" => fmt_quat(&e.extrinsics.q_b_c),
            "extrinsic.r_br" => fmt_vec3(&e.extrinsics.r_br),
            "extrinsic.q_br" => fmt_quat(&e.extrinsics.q_b_r),
            "extrinsic.estimate_camera" => e.estimate_camera_extrinsics.to_string(),
            "extrinsic.estimate_radar" => e.estimate_radar_extrinsics.to_string(),
            "output.rate" => e.output_rate.to_string(),
            "eval.rpe_delta" => self.rpe_delta.to_string(),
            "eval.max_dt" => self.max_dt.to_string(),
            _ => String::new(),
        }
    }

    /// The configuration as a commented key-value file.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for (key, doc) in CONFIG_KEYS {
            let v = self.value_of(key);
            if v.is_empty() {
                let _ = writeln!(out, "# {doc}\n# {key} =");
            } else {
                let _ = writeln!(out, "# {doc}\n{key} = {v}");
            }
        }
        out
    }

    /// Rotates the radar extrinsic prior by `deg` degrees about one radar axis.
    pub fn perturb_radar_rotation(&mut self, axis: usize, deg: f64) {
        let mut a = Vec3::zeros();
        a[axis] = deg.to_radians();
        let q = &mut self.estimator.extrinsics.q_b_r;
        *q = so3_exp(&a) * *q;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Seq(u64);

#[derive(Debug, Clone, Copy)]
struct BufKey {
    t: f64,
    rank: u8,
    seq: Seq,
}

impl PartialEq for BufKey {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for BufKey {}
impl PartialOrd for BufKey {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for BufKey {
    fn cmp(&self, o: &Self) -> Ordering {
        self.t.total_cmp(&o.t).then(self.rank.cmp(&o.rank)).then(self.seq.cmp(&o.seq))
    }
}

enum Pending {
    Radar(RadarScan),
    Features(PixelFrame),
}

/// Results of a run held in memory.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub trajectory: Vec<TrajectorySample>,
    pub scans: Vec<ScanLog>,
    pub ground_truth: Vec<TrajectorySample>,
    pub metrics: Option<MetricReport>,
    pub ticks: Vec<TickRecord>,
    pub stats: crate::estimator::EstimatorStats,
}

/// Consumes dataset records in file order and drives an [`Estimator`].
pub struct Runner {
    cfg: RunConfig,
    est: Option<Estimator>,
    imu_before_init: Vec<ImuSample>,
    buffer: BTreeMap<BufKey, Pending>,
    latest: f64,
    seq: u64,
    out: RunOutputs,
    keep_ticks: bool,
}

impl Runner {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            est: None,
            imu_before_init: Vec::new(),
            buffer: BTreeMap::new(),
            latest: f64::NEG_INFINITY,
            seq: 0,
            out: RunOutputs::default(),
            keep_ticks: false,
        })
    }

    /// Runner around an already initialized estimator.
    pub fn with_estimator(cfg: RunConfig, est: Estimator) -> Result<Self> {
        let mut r = Self::new(cfg)?;
        r.est = Some(est);
        Ok(r)
    }

    /// Keep full tick records (state and navigation covariance) in the outputs.
    pub fn keep_ticks(mut self, keep: bool) -> Self {
        self.keep_ticks = keep;
        self
    }

    fn initial_pose(&self) -> InitialPose {
        let gt = &self.out.ground_truth;
        if self.cfg.init_from_gt && !gt.is_empty() {
            let v = if gt.len() >= 3 {
                initial_velocity([gt[0].position, gt[1].position, gt[2].position], gt[1].t - gt[0].t)
            } else if gt.len() == 2 {
                (gt[1].position - gt[0].position) / (gt[1].t - gt[0].t)
            } else {
                Vec3::zeros()
            };
            return InitialPose {
                t: gt[0].t,
                p: gt[0].position,
                q: gt[0].orientation,
                v,
            };
        }
        InitialPose {
            t: self.imu_before_init.first().map(|s| s.t).unwrap_or(0.0),
            p: self.cfg.init_p,
            q: self.cfg.init_q,
            v: self.cfg.init_v,
        }
    }

    fn ensure_init(&mut self) -> Result<&mut Estimator> {
        if self.est.is_none() {
            let pose = self.initial_pose();
            info!("initializing at t = {} from {:?}", pose.t, pose.p);
            let mut est = Estimator::new(self.cfg.estimator, &pose)?;
            for s in self.imu_before_init.drain(..) {
                est.push_imu(s)?;
            }
            self.est = Some(est);
        }
        Ok(self.est.as_mut().expect("initialized"))
    }

    pub fn push(&mut self, rec: DatasetRecord) -> Result<()> {
        let t = rec.t();
        let rank = rec.rank();
        match rec {
            DatasetRecord::Imu { t, f, w } => {
                let s = ImuSample {
                    t,
                    f_tilde: f.into(),
                    w_tilde: w.into(),
                };
                match self.est.as_mut() {
                    Some(e) => e.push_imu(s)?,
                    None => {
                        if self.imu_before_init.last().is_some_and(|l| !(t > l.t)) {
                            return Err(Error::NonMonotoneImu(t));
                        }
                        self.imu_before_init.push(s)
                    }
                }
            }
            DatasetRecord::Gt { t, p, q } => self.out.ground_truth.push(gt_sample(t, &p, &q)),
            DatasetRecord::Radar {
                t_start,
                t_end,
                targets,
                ..
            } => self.enqueue(t, rank, Pending::Radar(radar_scan(t_start, t_end, &targets))),
            DatasetRecord::Features { t, intr, obs } => {
                self.enqueue(t, rank, Pending::Features(pixel_frame(t, &intr, obs)))
            }
        }
        self.latest = self.latest.max(t);
        self.release(self.latest - REORDER_WINDOW)
    }

    fn enqueue(&mut self, t: f64, rank: u8, p: Pending) {
        self.seq += 1;
        self.buffer.insert(
            BufKey {
                t,
                rank,
                seq: Seq(self.seq),
            },
            p,
        );
    }

    fn release(&mut self, horizon: f64) -> Result<()> {
        while let Some(entry) = self.buffer.first_entry() {
            if entry.key().t > horizon {
                break;
            }
            let (key, item) = entry.remove_entry();
            self.dispatch(key.t, item)?;
        }
        Ok(())
    }

    fn dispatch(&mut self, t: f64, item: Pending) -> Result<()> {
        let keep = self.keep_ticks;
        self.ensure_init()?;
        let est = self.est.as_mut().expect("initialized");
        if t < est.time() - 1e-9 && est.ticks().len() <= 1 && est.stats.radar_scans + est.stats.feature_frames == 0 {
            // measurements preceding the initial pose
            warn!("skipping measurement at t = {t} before the initial pose");
            return Ok(());
        }
        match item {
            Pending::Radar(scan) => {
                let log = est.process_radar(&scan)?;
                self.out.scans.push(log);
            }
            Pending::Features(frame) => {
                est.process_features(&frame)?;
            }
        }
        let ticks = est.drain_ticks();
        self.collect(ticks, keep);
        Ok(())
    }

    fn collect(&mut self, ticks: Vec<TickRecord>, keep: bool) {
        self.out.trajectory.extend(ticks.iter().map(TickRecord::sample));
        if keep {
            self.out.ticks.extend(ticks);
        }
    }

    /// Flushes the buffer, runs to the last IMU sample and evaluates against
    /// the ground truth when there is one.
    pub fn finish(mut self) -> Result<RunOutputs> {
        self.release(f64::INFINITY)?;
        let keep = self.keep_ticks;
        let est = self.ensure_init()?;
        est.finish()?;
        let ticks = est.drain_ticks();
        let stats = est.stats.clone();
        self.collect(ticks, keep);
        self.out.stats = stats;
        if !self.out.ground_truth.is_empty() && !self.out.trajectory.is_empty() {
            match evaluate(&self.out.ground_truth, &self.out.trajectory, self.cfg.rpe_delta, self.cfg.max_dt) {
                Ok(m) => self.out.metrics = Some(m),
                Err(e) => warn!("no metrics: {e}"),
            }
        }
        Ok(self.out)
    }
}

/// Runs the estimator over an in-memory dataset.
pub fn run_dataset(d: &Dataset, cfg: &RunConfig, keep_ticks: bool) -> Result<RunOutputs> {
    let mut r = Runner::new(cfg.clone())?.keep_ticks(keep_ticks);
    for rec in dataset_records(d) {
        r.push(rec)?;
    }
    r.finish()
}

pub fn run_records<I: IntoIterator<Item = Result<DatasetRecord>>>(records: I, cfg: &RunConfig) -> Result<RunOutputs> {
    let mut r = Runner::new(cfg.clone())?;
    for rec in records {
        r.push(rec?)?;
    }
    r.finish()
}

pub const TRAJECTORY_FILE: &str = "trajectory.tum";
pub const INLIER_FILE: &str = "inliers.csv";
pub const METRICS_FILE: &str = "metrics.json";

pub fn write_outputs(out: &RunOutputs, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(std::fs::File::create(dir.join(TRAJECTORY_FILE))?);
    for s in &out.trajectory {
        writeln!(w, "{}", format_tum_line(s))?;
    }
    w.flush()?;
    let mut w = BufWriter::new(std::fs::File::create(dir.join(INLIER_FILE))?);
    writeln!(w, "t,n_targets,n_inliers")?;
    for s in &out.scans {
        writeln!(w, "{:.6},{},{}", s.t, s.n_targets, s.n_inliers)?;
    }
    w.flush()?;
    if let Some(m) = &out.metrics {
        m.write_json(&dir.join(METRICS_FILE))?;
    }
    Ok(())
}

/// Streams the configured dataset through the estimator and writes the outputs.
pub fn run_estimator(cfg: &RunConfig) -> Result<RunOutputs> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("no dataset path configured".into()))?;
    let out = run_records(open_dataset(path)?, cfg)?;
    write_outputs(&out, &cfg.output_dir)?;
    Ok(out)
}

/// Reads a trajectory from a TUM file, or the ground truth of a dataset file.
pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectorySample>> {
    let text = std::fs::read_to_string(path)?;
    if text.trim_start().starts_with('{') {
        let mut out = Vec::new();
        for rec in DatasetReader::new(text.as_bytes()) {
            if let DatasetRecord::Gt { t, p, q } = rec? {
                out.push(gt_sample(t, &p, &q));
            }
        }
        return Ok(out);
    }
    read_tum(text.as_bytes())
}

pub fn evaluate_files(gt: &Path, est: &Path, delta: f64, max_dt: f64) -> Result<MetricReport> {
    evaluate(&read_trajectory(gt)?, &read_trajectory(est)?, delta, max_dt)
}
