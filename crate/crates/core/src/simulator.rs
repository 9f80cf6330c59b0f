//! Deterministic synthetic datasets: trajectory, landmarks and sensor streams.
//!
//! Each stream draws from its own seeded generator, so disabling or changing
//! one sensor leaves the others bit-identical.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::UnitQuaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pinhole_project, so3_exp, CameraIntrinsics, Mat3, Quat, Vec3};
use crate::propagation::ImuSample;
use crate::radar::{RadarScan, RadarTarget};
use crate::vision::{PixelFrame, PixelObservation};

pub const GRAVITY: Vec3 = Vec3::new(0.0, 0.0, -9.81);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChirpConfig {
    pub max_range: f64,
    pub max_doppler: f64,
    pub range_res: f64,
    pub doppler_res: f64,
    /// Physical angular resolution [rad]; informational.
    pub angular_res: f64,
    /// Reporting step of the angle estimates [rad].
    pub angle_quantum: f64,
    pub start_freq_ghz: f64,
}

impl Default for ChirpConfig {
    fn default() -> Self {
        Self {
            max_range: 20.013,
            max_doppler: 3.995,
            range_res: 0.078,
            doppler_res: 0.133,
            angular_res: 29f64.to_radians(),
            angle_quantum: 1f64.to_radians(),
            start_freq_ghz: 60.0,
        }
    }
}

impl ChirpConfig {
    pub fn validate(&self) -> Result<()> {
        let res = [self.range_res, self.doppler_res, self.angular_res, self.angle_quantum];
        if res.iter().any(|r| !(*r > 0.0)) || self.max_range <= self.range_res || self.max_doppler <= self.doppler_res {
            return Err(Error::InvalidConfig("chirp resolutions must be positive and below the maxima".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DopplerAmbiguity {
    /// Targets beyond the unambiguous range are not reported.
    #[default]
    Drop,
    /// Targets are reported with the aliased radial speed.
    Wrap,
}

/// Parametric closed path `p(θ)` traversed with a modulated phase `θ(t)`.
///
/// `p(θ) = center + (rx sin(θ + x_phase), ry sin(y_freq θ), z_amp sin(z_freq θ))`
/// and `θ̇ = Ω (1 − speed_mod cos Ω t)` with `Ω = 2π laps / duration`. Yaw
/// follows the direction of travel plus a sinusoidal offset; roll and pitch
/// are small sinusoids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrbitSpec {
    pub center: Vec3,
    pub rx: f64,
    pub ry: f64,
    pub x_phase: f64,
    pub y_freq: f64,
    pub z_amp: f64,
    pub z_freq: f64,
    pub laps: f64,
    pub duration: f64,
    pub speed_mod: f64,
    pub yaw_offset_amp: f64,
    pub yaw_offset_hz: f64,
    pub roll_amp: f64,
    pub pitch_amp: f64,
    pub tilt_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectorySpec {
    Hover { p: Vec3, yaw: f64 },
    Orbit(OrbitSpec),
}

/// Kinematic truth at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    pub t: f64,
    pub p: Vec3,
    /// Inertial velocity and acceleration.
    pub v: Vec3,
    pub a: Vec3,
    /// Body to inertial.
    pub q: Quat,
    pub w_b: Vec3,
}

impl TruthSample {
    pub fn v_body(&self) -> Vec3 {
        self.q.inverse() * self.v
    }

    pub fn specific_force(&self) -> Vec3 {
        self.q.inverse() * (self.a - GRAVITY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trajectory {
    spec: TrajectorySpec,
}

pub fn generate_trajectory(spec: &TrajectorySpec) -> Result<Trajectory> {
    match spec {
        TrajectorySpec::Hover { p, yaw } => {
            if !(p.iter().all(|v| v.is_finite()) && yaw.is_finite()) {
                return Err(Error::DegenerateTrajectory("non-finite hover pose".into()));
            }
        }
        TrajectorySpec::Orbit(o) => {
            let scalars = [o.rx, o.ry, o.laps, o.duration];
            if scalars.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::DegenerateTrajectory("radii, laps and duration must be positive".into()));
            }
            if !(0.0..1.0).contains(&o.speed_mod) {
                return Err(Error::DegenerateTrajectory("speed modulation must lie in [0, 1)".into()));
            }
            // the direction of travel must be defined everywhere
            let traj = Trajectory { spec: *spec };
            for k in 0..=4000 {
                let th = TAU * k as f64 / 4000.0;
                let (_, d1, _) = traj.path(o, th);
                if d1.xy().norm() < 1e-6 {
                    return Err(Error::DegenerateTrajectory(format!("horizontal tangent vanishes at θ = {th}")));
                }
            }
        }
    }
    Ok(Trajectory { spec: *spec })
}

impl Trajectory {
    pub fn spec(&self) -> &TrajectorySpec {
        &self.spec
    }

    /// Path point and its first two θ-derivatives.
    fn path(&self, o: &OrbitSpec, th: f64) -> (Vec3, Vec3, Vec3) {
        let ax = th + o.x_phase;
        let ay = o.y_freq * th;
        let az = o.z_freq * th;
        let p = o.center + Vec3::new(o.rx * ax.sin(), o.ry * ay.sin(), o.z_amp * az.sin());
        let d1 = Vec3::new(o.rx * ax.cos(), o.ry * o.y_freq * ay.cos(), o.z_amp * o.z_freq * az.cos());
        let d2 = Vec3::new(
            -o.rx * ax.sin(),
            -o.ry * o.y_freq * o.y_freq * ay.sin(),
            -o.z_amp * o.z_freq * o.z_freq * az.sin(),
        );
        (p, d1, d2)
    }

    /// Phase and its first two time derivatives.
    fn phase(&self, o: &OrbitSpec, t: f64) -> (f64, f64, f64) {
        let omega = TAU * o.laps / o.duration;
        let m = o.speed_mod;
        let th = omega * t - m * (omega * t).sin();
        let th_d = omega * (1.0 - m * (omega * t).cos());
        let th_dd = omega * omega * m * (omega * t).sin();
        (th, th_d, th_dd)
    }

    pub fn sample(&self, t: f64) -> TruthSample {
        match &self.spec {
            TrajectorySpec::Hover { p, yaw } => TruthSample {
                t,
                p: *p,
                v: Vec3::zeros(),
                a: Vec3::zeros(),
                q: UnitQuaternion::from_euler_angles(0.0, 0.0, *yaw),
                w_b: Vec3::zeros(),
            },
            TrajectorySpec::Orbit(o) => {
                let (th, th_d, th_dd) = self.phase(o, t);
                let (p, d1, d2) = self.path(o, th);
                let v = d1 * th_d;
                let a = d2 * th_d * th_d + d1 * th_dd;

                let heading = d1.y.atan2(d1.x);
                let heading_rate = th_d * (d1.x * d2.y - d1.y * d2.x) / (d1.x * d1.x + d1.y * d1.y);
                let wy = TAU * o.yaw_offset_hz;
                let wt = TAU * o.tilt_hz;
                let yaw = heading + o.yaw_offset_amp * (wy * t).sin();
                let yaw_d = heading_rate + o.yaw_offset_amp * wy * (wy * t).cos();
                let roll = o.roll_amp * (wt * t).sin();
                let roll_d = o.roll_amp * wt * (wt * t).cos();
                let pitch = o.pitch_amp * (wt * t + FRAC_PI_2 * 0.5).sin();
                let pitch_d = o.pitch_amp * wt * (wt * t + FRAC_PI_2 * 0.5).cos();

                let q = UnitQuaternion::from_euler_angles(roll, pitch, yaw);
                let (sr, cr) = roll.sin_cos();
                let (sp, cp) = pitch.sin_cos();
                let w_b = Vec3::new(
                    roll_d - yaw_d * sp,
                    pitch_d * cr + yaw_d * sr * cp,
                    -pitch_d * sr + yaw_d * cr * cp,
                );
                TruthSample { t, p, v, a, q, w_b }
            }
        }
    }

    /// Arc length over `[0, t_end]` by summed chords at `dt`.
    pub fn length(&self, t_end: f64, dt: f64) -> f64 {
        let n = (t_end / dt).ceil() as usize;
        let mut prev = self.sample(0.0).p;
        let mut total = 0.0;
        for k in 1..=n {
            let p = self.sample((k as f64 * dt).min(t_end)).p;
            total += (p - prev).norm();
            prev = p;
        }
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u64,
    pub p: Vec3,
    /// Per-scan detection probability.
    pub reflectivity: f64,
    pub camera_visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkConfig {
    pub count: usize,
    /// Minimum distance from the flight path [m].
    pub clearance: f64,
    /// Maximum horizontal distance from the flight path [m].
    pub max_distance: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub reflectivity: f64,
    /// Fraction of landmarks that are strong reflectors (always detected when in view).
    pub strong_fraction: f64,
    pub camera_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSimConfig {
    pub rate: f64,
    pub w_f: f64,
    pub w_omega: f64,
    pub w_ba: f64,
    pub w_bg: f64,
    pub b_a0: Vec3,
    pub b_g0: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSimConfig {
    pub rate: f64,
    pub intrinsics: CameraIntrinsics,
    pub r_bc: Vec3,
    /// Body to camera.
    pub q_b_c: Quat,
    pub pixel_noise: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    pub max_tracks: usize,
    pub track_lifetime: Option<f64>,
    /// Intervals `[start, end]` without any feature frame.
    pub dropouts: Vec<(f64, f64)>,
    pub enabled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarSimConfig {
    pub rate: f64,
    pub chirp: ChirpConfig,
    pub chirp_duration: f64,
    pub az_fov: f64,
    pub el_fov: f64,
    pub r_br: Vec3,
    /// Body to radar.
    pub q_b_r: Quat,
    pub range_noise: f64,
    pub angle_noise: f64,
    pub doppler_noise: f64,
    pub quantize: bool,
    pub ambiguity: DopplerAmbiguity,
    /// Expected clutter targets per scan.
    pub clutter_rate: f64,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub duration: f64,
    pub trajectory: TrajectorySpec,
    pub landmarks: LandmarkConfig,
    pub imu: ImuSimConfig,
    pub camera: CameraSimConfig,
    pub radar: RadarSimConfig,
    pub gt_rate: f64,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::InvalidConfig("duration must be positive".into()));
        }
        let rates = [self.imu.rate, self.camera.rate, self.radar.rate, self.gt_rate];
        if rates.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidConfig("rates must be positive".into()));
        }
        self.radar.chirp.validate()?;
        self.camera.intrinsics.validate()?;
        Ok(())
    }

    /// Removes every random and quantization error; biases become zero.
    pub fn noise_free(mut self) -> Self {
        self.imu.w_f = 0.0;
        self.imu.w_omega = 0.0;
        self.imu.w_ba = 0.0;
        self.imu.w_bg = 0.0;
        self.imu.b_a0 = Vec3::zeros();
        self.imu.b_g0 = Vec3::zeros();
        self.camera.pixel_noise = 0.0;
        self.radar.range_noise = 0.0;
        self.radar.angle_noise = 0.0;
        self.radar.doppler_noise = 0.0;
        self.radar.quantize = false;
        self.radar.clutter_rate = 0.0;
        self.name.push_str("_noise_free");
        self
    }

    /// Whether a feature frame is emitted at `t`.
    pub fn camera_active(&self, t: f64) -> bool {
        self.camera.enabled && !self.camera.dropouts.iter().any(|(a, b)| t >= *a && t <= *b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtPose {
    pub t: f64,
    pub p: Vec3,
    pub q: Quat,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub radar: Vec<RadarScan>,
    pub features: Vec<PixelFrame>,
    pub gt: Vec<GtPose>,
}

const PRESETS: [&str; 3] = ["nominal", "vision_dropout", "radar_sparse_fast"];

pub fn preset_names() -> &'static [&'static str] {
    &PRESETS
}

/// Camera looking along body x, image x to the right.
pub fn forward_camera_rotation() -> Quat {
    UnitQuaternion::from_matrix(&Mat3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0))
}

pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 400.0,
        fy: 400.0,
        cx: 320.0,
        cy: 240.0,
        width: 640,
        height: 480,
    }
}

/// Mounting of the simulated radar relative to its nominal (identity) design.
pub fn radar_mount_truth() -> (Vec3, Quat) {
    (Vec3::new(0.12, 0.01, -0.04), so3_exp(&Vec3::new(0.01, 0.03, -0.02)))
}

pub fn camera_mount_truth() -> (Vec3, Quat) {
    (Vec3::new(0.1, 0.0, 0.03), forward_camera_rotation())
}

fn base_scenario(seed: u64) -> ScenarioConfig {
    let duration = 60.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let normal = |rng: &mut ChaCha8Rng, s: f64| {
        Vec3::from_fn(|_, _| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
    };
    let (r_bc, q_b_c) = camera_mount_truth();
    let (r_br, q_b_r) = radar_mount_truth();
    ScenarioConfig {
        name: "nominal".into(),
        duration,
        trajectory: TrajectorySpec::Orbit(OrbitSpec {
            center: Vec3::new(0.0, 0.0, 1.5),
            rx: 5.0,
            ry: 3.0,
            x_phase: 0.0,
            y_freq: 2.0,
            z_amp: 0.5,
            z_freq: 3.0,
            laps: 3.0,
            duration,
            speed_mod: 0.0,
            yaw_offset_amp: 0.5,
            yaw_offset_hz: 0.07,
            roll_amp: 0.08,
            pitch_amp: 0.08,
            tilt_hz: 0.13,
        }),
        landmarks: LandmarkConfig {
            count: 600,
            clearance: 1.5,
            max_distance: 12.0,
            z_min: -0.5,
            z_max: 4.0,
            reflectivity: 0.4,
            strong_fraction: 0.0,
            camera_fraction: 0.8,
        },
        imu: ImuSimConfig {
            rate: 200.0,
            w_f: 0.002,
            w_omega: 2e-4,
            w_ba: 3e-4,
            w_bg: 2e-5,
            b_a0: normal(&mut rng, 0.05),
            b_g0: normal(&mut rng, 0.005),
        },
        camera: CameraSimConfig {
            rate: 20.0,
            intrinsics: default_intrinsics(),
            r_bc,
            q_b_c,
            pixel_noise: 1.0,
            min_depth: 0.5,
            max_depth: 20.0,
            max_tracks: 60,
            track_lifetime: None,
            dropouts: Vec::new(),
            enabled: true,
        },
        radar: RadarSimConfig {
            rate: 10.0,
            chirp: ChirpConfig::default(),
            chirp_duration: 0.02,
            az_fov: 60f64.to_radians(),
            el_fov: 30f64.to_radians(),
            r_br,
            q_b_r,
            range_noise: 0.02,
            angle_noise: 1f64.to_radians(),
            doppler_noise: 0.03,
            quantize: true,
            ambiguity: DopplerAmbiguity::Drop,
            clutter_rate: 0.0,
            enabled: true,
        },
        gt_rate: 100.0,
        seed,
    }
}

/// Documented scenario presets.
///
/// * `nominal`: 5 m × 3 m figure-eight, three laps in 60 s at 1–2 m/s,
///   landmark-rich scene.
/// * `vision_dropout`: nominal with no feature frames in [22 s, 52 s], half the run.
/// * `radar_sparse_fast`: two laps of a 36 m circle with speed cycling
///   between 5 and 10 m/s, above the unambiguous Doppler range, few radar reflectors.
pub fn preset(name: &str, seed: u64) -> Result<ScenarioConfig> {
    let mut cfg = base_scenario(seed);
    match name {
        "nominal" => {}
        "vision_dropout" => {
            cfg.name = name.into();
            cfg.camera.dropouts = vec![(22.0, 52.0)];
        }
        "radar_sparse_fast" => {
            cfg.name = name.into();
            let laps = 2.0;
            let omega = TAU * laps / cfg.duration;
            // speed = R Ω (1 − m cos Ω t) between 5 and 10 m/s
            let radius = 7.5 / omega;
            cfg.trajectory = TrajectorySpec::Orbit(OrbitSpec {
                center: Vec3::new(0.0, 0.0, 2.0),
                rx: radius,
                ry: radius,
                x_phase: FRAC_PI_2,
                y_freq: 1.0,
                z_amp: 0.5,
                z_freq: 4.0,
                laps,
                duration: cfg.duration,
                speed_mod: 2.5 / 7.5,
                yaw_offset_amp: 0.3,
                yaw_offset_hz: 0.09,
                roll_amp: 0.05,
                pitch_amp: 0.05,
                tilt_hz: 0.11,
            });
            cfg.landmarks = LandmarkConfig {
                count: 1500,
                clearance: 2.5,
                max_distance: 15.0,
                z_min: -1.0,
                z_max: 5.0,
                reflectivity: 0.03,
                strong_fraction: 0.0,
                camera_fraction: 0.8,
            };
            cfg.camera.track_lifetime = None;
        }
        _ => return Err(Error::UnknownPreset(name.into())),
    }
    Ok(cfg)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream)
}

/// Samples landmarks in a band around the path.
pub fn place_landmarks(cfg: &LandmarkConfig, traj: &Trajectory, duration: f64, seed: u64) -> Vec<Landmark> {
    let mut rng = stream_rng(seed, 1);
    let path: Vec<Vec3> = (0..=((duration / 0.05) as usize)).map(|k| traj.sample(k as f64 * 0.05).p).collect();
    let lo = path.iter().fold(Vec3::repeat(f64::INFINITY), |a, p| a.inf(p));
    let hi = path.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
    let m = cfg.max_distance;
    let mut out = Vec::with_capacity(cfg.count);
    let mut attempts = 0usize;
    while out.len() < cfg.count && attempts < cfg.count * 1000 {
        attempts += 1;
        let p = Vec3::new(
            rng.random_range(lo.x - m..hi.x + m),
            rng.random_range(lo.y - m..hi.y + m),
            rng.random_range(cfg.z_min..cfg.z_max),
        );
        let mut d3 = f64::INFINITY;
        let mut dxy = f64::INFINITY;
        for q in &path {
            d3 = d3.min((p - q).norm());
            dxy = dxy.min((p - q).xy().norm());
        }
        if d3 < cfg.clearance || dxy > m {
            continue;
        }
        let strong = rng.random_bool(cfg.strong_fraction.clamp(0.0, 1.0));
        out.push(Landmark {
            id: out.len() as u64,
            p,
            reflectivity: if strong { 1.0 } else { cfg.reflectivity },
            camera_visible: rng.random_bool(cfg.camera_fraction.clamp(0.0, 1.0)),
        });
    }
    out
}

fn sample_times(rate: f64, duration: f64, offset: f64) -> impl Iterator<Item = f64> {
    let n = ((duration - offset) * rate + 1e-9).floor() as usize;
    (0..=n).map(move |k| offset + k as f64 / rate)
}

pub fn synthesize_imu(traj: &Trajectory, cfg: &ImuSimConfig, duration: f64, seed: u64) -> Vec<ImuSample> {
    let mut rng = stream_rng(seed, 2);
    let dt = 1.0 / cfg.rate;
    let mut b_a = cfg.b_a0;
    let mut b_g = cfg.b_g0;
    let mut out = Vec::new();
    let gauss = |rng: &mut ChaCha8Rng, s: f64| {
        if s == 0.0 {
            Vec3::zeros()
        } else {
            Vec3::from_fn(|_, _| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        }
    };
    for t in sample_times(cfg.rate, duration, 0.0) {
        let s = traj.sample(t);
        let nf = gauss(&mut rng, cfg.w_f / dt.sqrt());
        let nw = gauss(&mut rng, cfg.w_omega / dt.sqrt());
        out.push(ImuSample {
            t,
            f_tilde: s.specific_force() + b_a + nf,
            w_tilde: s.w_b + b_g + nw,
        });
        b_a += gauss(&mut rng, cfg.w_ba * dt.sqrt());
        b_g += gauss(&mut rng, cfg.w_bg * dt.sqrt());
    }
    out
}

fn quantize(x: f64, step: f64) -> f64 {
    (x / step).round() * step
}

/// Radial speed after applying the ambiguity rule; `None` when dropped.
pub fn apply_doppler_limit(v_r: f64, max: f64, mode: DopplerAmbiguity) -> Option<f64> {
    if v_r.abs() <= max {
        return Some(v_r);
    }
    match mode {
        DopplerAmbiguity::Drop => None,
        DopplerAmbiguity::Wrap => Some(v_r - 2.0 * max * (v_r / (2.0 * max)).round()),
    }
}

/// Radar-frame position and velocity of a static point, without noise.
pub fn radar_frame_truth(s: &TruthSample, cfg: &RadarSimConfig, p: &Vec3) -> (Vec3, Vec3) {
    let p_b = s.q.inverse() * (p - s.p);
    let p_r = cfg.q_b_r * (p_b - cfg.r_br);
    let v_radar_b = s.v_body() + s.w_b.cross(&cfg.r_br);
    (p_r, cfg.q_b_r * v_radar_b)
}

pub fn in_radar_fov(p_r: &Vec3, cfg: &RadarSimConfig) -> bool {
    let d = p_r.norm();
    if !(d > 1e-3) || d > cfg.chirp.max_range {
        return false;
    }
    let theta = p_r.y.atan2(p_r.x);
    let phi = (p_r.z / d).asin();
    theta.abs() <= cfg.az_fov && phi.abs() <= cfg.el_fov
}

pub fn synthesize_radar(traj: &Trajectory, landmarks: &[Landmark], cfg: &RadarSimConfig, duration: f64, seed: u64) -> Vec<RadarScan> {
    let mut rng = stream_rng(seed, 3);
    let mut out = Vec::new();
    let half = 0.5 * cfg.chirp_duration;
    let gauss = |rng: &mut ChaCha8Rng, s: f64| {
        if s == 0.0 {
            0.0
        } else {
            s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        }
    };
    let offset = (0.25 / cfg.rate).max(half);
    for t in sample_times(cfg.rate, duration - half, offset) {
        let s = traj.sample(t);
        let v_radar_b = s.v_body() + s.w_b.cross(&cfg.r_br);
        let v_radar = cfg.q_b_r * v_radar_b;
        let mut targets = Vec::new();
        let emit = |rng: &mut ChaCha8Rng, p_r: Vec3, v_r_true: f64, targets: &mut Vec<RadarTarget>| {
            let d = p_r.norm();
            let theta = p_r.y.atan2(p_r.x);
            let phi = (p_r.z / d).asin();
            let mut d_m = d + gauss(rng, cfg.range_noise);
            let mut th_m = theta + gauss(rng, cfg.angle_noise);
            let mut ph_m = phi + gauss(rng, cfg.angle_noise);
            let Some(mut vr_m) = apply_doppler_limit(v_r_true + gauss(rng, cfg.doppler_noise), cfg.chirp.max_doppler, cfg.ambiguity) else {
                return;
            };
            if cfg.quantize {
                d_m = quantize(d_m, cfg.chirp.range_res);
                th_m = quantize(th_m, cfg.chirp.angle_quantum);
                ph_m = quantize(ph_m, cfg.chirp.angle_quantum);
                vr_m = quantize(vr_m, cfg.chirp.doppler_res);
            }
            if d_m <= 0.0 || d_m > cfg.chirp.max_range {
                return;
            }
            targets.push(RadarTarget {
                d: d_m,
                theta: th_m,
                phi: ph_m,
                v_r: vr_m,
                snr: None,
            });
        };
        for lm in landmarks {
            let (p_r, _) = radar_frame_truth(&s, cfg, &lm.p);
            if !in_radar_fov(&p_r, cfg) {
                continue;
            }
            if !rng.random_bool(lm.reflectivity.clamp(0.0, 1.0)) {
                continue;
            }
            let mu = p_r / p_r.norm();
            emit(&mut rng, p_r, -mu.dot(&v_radar), &mut targets);
        }
        if cfg.clutter_rate > 0.0 {
            let n = rand_distr::Poisson::new(cfg.clutter_rate).map(|p| p.sample(&mut rng) as usize).unwrap_or(0);
            for _ in 0..n {
                let d = rng.random_range(0.5..cfg.chirp.max_range);
                let th = rng.random_range(-cfg.az_fov..cfg.az_fov);
                let ph = rng.random_range(-cfg.el_fov..cfg.el_fov);
                let p_r = crate::geometry::bearing_from_angles(th, ph).into_inner() * d;
                let v_r = rng.random_range(-cfg.chirp.max_doppler..cfg.chirp.max_doppler);
                emit(&mut rng, p_r, v_r, &mut targets);
            }
        }
        out.push(RadarScan {
            t_start: t - half,
            t_end: t + half,
            targets,
        });
    }
    out
}

/// Pixel of a landmark in the camera, `None` when not visible.
pub fn camera_projection(s: &TruthSample, cfg: &CameraSimConfig, p: &Vec3) -> Option<(nalgebra::Vector2<f64>, f64)> {
    let p_b = s.q.inverse() * (p - s.p);
    let p_c = cfg.q_b_c * (p_b - cfg.r_bc);
    if p_c.z < cfg.min_depth || p_c.norm() > cfg.max_depth {
        return None;
    }
    let px = pinhole_project(&p_c, &cfg.intrinsics)?;
    cfg.intrinsics.contains(&px).then_some((px, p_c.norm()))
}

pub fn synthesize_features(traj: &Trajectory, landmarks: &[Landmark], scenario: &ScenarioConfig, seed: u64) -> Vec<PixelFrame> {
    synthesize_feature_tracks(traj, landmarks, scenario, seed).0
}

/// Feature frames together with the landmark index of every track id.
pub fn synthesize_feature_tracks(
    traj: &Trajectory,
    landmarks: &[Landmark],
    scenario: &ScenarioConfig,
    seed: u64,
) -> (Vec<PixelFrame>, Vec<usize>) {
    let cfg = &scenario.camera;
    let mut track_landmark = Vec::new();
    let mut rng = stream_rng(seed, 4);
    let noise = Normal::new(0.0, cfg.pixel_noise.max(0.0)).expect("finite noise");
    // per landmark: (track id, start time, seen in previous frame)
    let mut tracks: Vec<Option<(u64, f64)>> = vec![None; landmarks.len()];
    let mut next_id: u64 = 0;
    let mut out = Vec::new();
    for t in sample_times(cfg.rate, scenario.duration, 0.0) {
        if !scenario.camera_active(t) {
            tracks.iter_mut().for_each(|tr| *tr = None);
            continue;
        }
        let s = traj.sample(t);
        let mut visible: Vec<(usize, nalgebra::Vector2<f64>, f64)> = landmarks
            .iter()
            .enumerate()
            .filter(|(_, lm)| lm.camera_visible)
            .filter_map(|(k, lm)| camera_projection(&s, cfg, &lm.p).map(|(px, d)| (k, px, d)))
            .collect();
        // ongoing tracks first, then nearest
        visible.sort_by(|a, b| {
            tracks[b.0]
                .is_some()
                .cmp(&tracks[a.0].is_some())
                .then(a.2.total_cmp(&b.2))
                .then(a.0.cmp(&b.0))
        });
        visible.truncate(cfg.max_tracks);
        let mut seen = vec![false; landmarks.len()];
        let mut obs = Vec::with_capacity(visible.len());
        for (k, px, _) in visible {
            let expired = match (tracks[k], cfg.track_lifetime) {
                (Some((_, start)), Some(life)) => t - start >= life,
                _ => false,
            };
            if tracks[k].is_none() || expired {
                tracks[k] = Some((next_id, t));
                track_landmark.push(k);
                next_id += 1;
            }
            seen[k] = true;
            let (u, v) = if cfg.pixel_noise > 0.0 {
                (px.x + noise.sample(&mut rng), px.y + noise.sample(&mut rng))
            } else {
                (px.x, px.y)
            };
            obs.push(PixelObservation {
                id: tracks[k].expect("track assigned").0,
                u,
                v,
            });
        }
        for (k, tr) in tracks.iter_mut().enumerate() {
            if !seen[k] {
                *tr = None;
            }
        }
        obs.sort_by_key(|o| o.id);
        out.push(PixelFrame {
            t,
            intrinsics: cfg.intrinsics,
            obs,
        });
    }
    (out, track_landmark)
}

pub fn ground_truth(traj: &Trajectory, rate: f64, duration: f64) -> Vec<GtPose> {
    sample_times(rate, duration, 0.0)
        .map(|t| {
            let s = traj.sample(t);
            GtPose { t, p: s.p, q: s.q }
        })
        .collect()
}

/// Everything needed to regenerate a dataset and to query its truth.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub trajectory: Trajectory,
    pub landmarks: Vec<Landmark>,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let trajectory = generate_trajectory(&config.trajectory)?;
        let landmarks = place_landmarks(&config.landmarks, &trajectory, config.duration, config.seed);
        Ok(Self {
            config,
            trajectory,
            landmarks,
        })
    }

    pub fn dataset(&self) -> Dataset {
        let c = &self.config;
        Dataset {
            imu: synthesize_imu(&self.trajectory, &c.imu, c.duration, c.seed),
            radar: if c.radar.enabled {
                synthesize_radar(&self.trajectory, &self.landmarks, &c.radar, c.duration, c.seed)
            } else {
                Vec::new()
            },
            features: if c.camera.enabled {
                synthesize_features(&self.trajectory, &self.landmarks, c, c.seed)
            } else {
                Vec::new()
            },
            gt: ground_truth(&self.trajectory, c.gt_rate, c.duration),
        }
    }

    pub fn truth(&self, t: f64) -> TruthSample {
        self.trajectory.sample(t)
    }

    /// Landmark index of every feature track id in [`Scenario::dataset`].
    pub fn track_landmarks(&self) -> Vec<usize> {
        let c = &self.config;
        synthesize_feature_tracks(&self.trajectory, &self.landmarks, c, c.seed).1
    }

    /// Distance from the true camera centre to landmark `k` at time `t`.
    pub fn camera_depth(&self, t: f64, k: usize) -> f64 {
        let s = self.truth(t);
        let cam = s.p + s.q * self.config.camera.r_bc;
        (self.landmarks[k].p - cam).norm()
    }
}

pub fn simulate(cfg: &ScenarioConfig) -> Result<Dataset> {
    Ok(Scenario::new(cfg.clone())?.dataset())
}

/// Angle wrapped to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}
