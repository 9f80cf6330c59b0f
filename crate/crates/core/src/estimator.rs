//! Online estimator: buffers IMU samples and applies radar and feature
//! updates in time order, feeding radar inliers to the voxel map.

use std::collections::VecDeque;

use log::debug;
use nalgebra::{DMatrix, Isometry3, Translation3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::TrajectorySample;
use crate::filter::{
    boxminus, Covariance, FullState, GateConfig, IekfConfig, ATT, BA, BASE_DIM, BG, POS, Q_BC, Q_BR, R_BC, R_BR, VEL,
};
use crate::geometry::{Quat, Vec3};
use crate::propagation::{propagate, GravityVector, ImuSample, ProcessNoiseConfig, PropagationMode};
use crate::radar::{radar_scan_update, DopplerNoiseConfig, RadarScan, RadarUpdateResult};
use crate::vision::{observation_pixel, vision_frame_update, DepthHint, PixelFrame, VisionConfig, VisionStats};
use crate::voxel_map::{VoxelMap, VoxelMapConfig};

/// Initial standard deviations of the base error state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialStd {
    pub p: f64,
    pub v: f64,
    pub att: f64,
    pub b_a: f64,
    pub b_g: f64,
    pub r_bc: f64,
    pub q_bc: f64,
    pub r_br: f64,
    pub q_br: f64,
}

impl Default for InitialStd {
    fn default() -> Self {
        Self {
            p: 0.01,
            v: 0.05,
            att: 0.01,
            b_a: 0.05,
            b_g: 0.005,
            r_bc: 0.01,
            q_bc: 0.01,
            r_br: 0.05,
            q_br: 0.05,
        }
    }
}

impl InitialStd {
    pub fn validate(&self) -> Result<()> {
        let all = [self.p, self.v, self.att, self.b_a, self.b_g, self.r_bc, self.q_bc, self.r_br, self.q_br];
        if all.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidConfig("initial standard deviations must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    pub r_bc: Vec3,
    /// Body to camera.
    pub q_b_c: Quat,
    pub r_br: Vec3,
    /// Body to radar.
    pub q_b_r: Quat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub noise: ProcessNoiseConfig,
    pub gravity: GravityVector,
    pub mode: PropagationMode,
    pub radar_noise: DopplerNoiseConfig,
    pub radar_gate: GateConfig,
    pub iekf: IekfConfig,
    pub vision: VisionConfig,
    pub voxel: VoxelMapConfig,
    pub use_radar: bool,
    pub use_vision: bool,
    /// Query the radar map for the depth of new features.
    pub radar_depth_hints: bool,
    pub patch_halfsize_px: f64,
    pub capacity: usize,
    pub init_std: InitialStd,
    pub extrinsics: Extrinsics,
    pub estimate_camera_extrinsics: bool,
    pub estimate_radar_extrinsics: bool,
    /// Rate of the emitted trajectory [Hz].
    pub output_rate: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let (r_bc, q_b_c) = crate::simulator::camera_mount_truth();
        Self {
            noise: ProcessNoiseConfig::default(),
            gravity: GravityVector::default(),
            mode: PropagationMode::PerSample,
            // matched to the simulated radar: white Doppler noise plus
            // resolution and angle quantization
            radar_noise: DopplerNoiseConfig { sigma_vr: 0.06 },
            radar_gate: GateConfig::default(),
            iekf: IekfConfig::default(),
            vision: VisionConfig::default(),
            voxel: VoxelMapConfig::default(),
            use_radar: true,
            use_vision: true,
            radar_depth_hints: true,
            patch_halfsize_px: 10.0,
            capacity: crate::filter::DEFAULT_CAPACITY,
            init_std: InitialStd::default(),
            extrinsics: Extrinsics {
                r_bc,
                q_b_c,
                r_br: Vec3::new(0.1, 0.0, -0.05),
                q_b_r: Quat::identity(),
            },
            estimate_camera_extrinsics: false,
            estimate_radar_extrinsics: true,
            output_rate: 20.0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.voxel.validate()?;
        self.init_std.validate()?;
        if !(self.radar_noise.sigma_vr > 0.0 && self.vision.sigma_px > 0.0) {
            return Err(Error::InvalidConfig("measurement noise must be > 0".into()));
        }
        if !(self.patch_halfsize_px > 0.0 && self.output_rate > 0.0) {
            return Err(Error::InvalidConfig("patch size and output rate must be > 0".into()));
        }
        for c in [self.radar_gate.confidence, self.vision.gate.confidence] {
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::InvalidConfig("gate confidence must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }

    /// Radar-only configuration: no feature updates.
    pub fn radar_only(mut self) -> Self {
        self.use_vision = false;
        self
    }

    /// Vision-only configuration: no radar updates, no map.
    pub fn vision_only(mut self) -> Self {
        self.use_radar = false;
        self
    }
}

/// Navigation pose and velocity used to start the filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialPose {
    pub t: f64,
    pub p: Vec3,
    pub q: Quat,
    /// Inertial-frame velocity.
    pub v: Vec3,
}

/// Velocity from the first three equally spaced positions (one-sided second order).
pub fn initial_velocity(p: [Vec3; 3], dt: f64) -> Vec3 {
    (-3.0 * p[0] + 4.0 * p[1] - p[2]) / (2.0 * dt)
}

/// Base state and covariance for the configured priors.
pub fn initial_state(cfg: &EstimatorConfig, pose: &InitialPose) -> (FullState, Covariance) {
    let mut x = FullState {
        capacity: cfg.capacity,
        r_bc_b: cfg.extrinsics.r_bc,
        q_b_c: cfg.extrinsics.q_b_c,
        r_br_b: cfg.extrinsics.r_br,
        q_b_r: cfg.extrinsics.q_b_r,
        ..Default::default()
    };
    x.set_pose_inertial(&pose.p, &pose.q);
    x.v_ib_b = pose.q.inverse() * pose.v;
    let s = &cfg.init_std;
    let mut p = Covariance::zeros(BASE_DIM);
    for (o, sd) in [(POS, s.p), (VEL, s.v), (ATT, s.att), (BA, s.b_a), (BG, s.b_g)] {
        p.set_block_diag(o, &[sd * sd; 3]);
    }
    if cfg.estimate_camera_extrinsics && !cfg.noise.freeze_camera_extrinsics {
        p.set_block_diag(R_BC, &[s.r_bc * s.r_bc; 3]);
        p.set_block_diag(Q_BC, &[s.q_bc * s.q_bc; 3]);
    }
    if cfg.estimate_radar_extrinsics {
        p.set_block_diag(R_BR, &[s.r_br * s.r_br; 3]);
        p.set_block_diag(Q_BR, &[s.q_br * s.q_br; 3]);
    }
    (x, p)
}

/// Snapshot at an output tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub t: f64,
    pub p: Vec3,
    pub q: Quat,
    /// Inertial-frame velocity.
    pub v: Vec3,
    /// Base state at the tick (features omitted).
    pub base: FullState,
    /// Covariance of the position, velocity and attitude error blocks.
    pub nav_cov: DMatrix<f64>,
}

impl TickRecord {
    pub fn sample(&self) -> TrajectorySample {
        TrajectorySample::new(self.t, self.p, self.q)
    }
}

/// Position, velocity and attitude error of `est` with respect to a truth
/// pose, in the filter's error coordinates.
pub fn navigation_error(est: &FullState, p: &Vec3, v: &Vec3, q: &Quat) -> Result<nalgebra::SVector<f64, 9>> {
    let mut truth = est.clone();
    truth.set_pose_inertial(p, q);
    truth.v_ib_b = q.inverse() * v;
    let d = boxminus(&truth, est)?;
    Ok(nalgebra::SVector::<f64, 9>::from_iterator(d.0.rows(0, 9).iter().copied()))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimatorStats {
    pub radar_scans: usize,
    pub radar_inliers: usize,
    pub radar_outliers: usize,
    pub feature_frames: usize,
    pub feature_updates: usize,
    pub features_initialized: usize,
    pub features_radar_initialized: usize,
}

/// Outcome of one radar scan, as written to the inlier log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanLog {
    pub t: f64,
    pub n_targets: usize,
    pub n_inliers: usize,
}

pub struct Estimator {
    cfg: EstimatorConfig,
    state: FullState,
    cov: Covariance,
    t: f64,
    imu: VecDeque<ImuSample>,
    map: VoxelMap,
    next_tick: u64,
    ticks: Vec<TickRecord>,
    pub stats: EstimatorStats,
}

impl Estimator {
    pub fn new(cfg: EstimatorConfig, pose: &InitialPose) -> Result<Self> {
        cfg.validate()?;
        let (state, cov) = initial_state(&cfg, pose);
        let map = VoxelMap::new(cfg.voxel)?;
        let mut est = Self {
            cfg,
            state,
            cov,
            t: pose.t,
            imu: VecDeque::new(),
            map,
            next_tick: (pose.t * cfg.output_rate).ceil().max(0.0) as u64,
            ticks: Vec::new(),
            stats: EstimatorStats::default(),
        };
        if est.tick_time(est.next_tick) <= pose.t + 1e-9 {
            est.record_tick(pose.t);
            est.next_tick += 1;
        }
        Ok(est)
    }

    pub fn with_state(cfg: EstimatorConfig, t: f64, state: FullState, cov: Covariance) -> Result<Self> {
        let pose = InitialPose {
            t,
            p: state.position_inertial(),
            q: state.q_b_i,
            v: state.q_b_i * state.v_ib_b,
        };
        let mut est = Self::new(cfg, &pose)?;
        est.state = state;
        est.cov = cov;
        est.ticks.clear();
        if est.tick_time(est.next_tick.saturating_sub(1)) >= t - 1e-9 {
            est.record_tick(t);
        }
        Ok(est)
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn state(&self) -> &FullState {
        &self.state
    }

    pub fn covariance(&self) -> &Covariance {
        &self.cov
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn map(&self) -> &VoxelMap {
        &self.map
    }

    pub fn ticks(&self) -> &[TickRecord] {
        &self.ticks
    }

    /// Removes and returns the ticks recorded so far.
    pub fn drain_ticks(&mut self) -> Vec<TickRecord> {
        std::mem::take(&mut self.ticks)
    }

    pub fn trajectory(&self) -> Vec<TrajectorySample> {
        self.ticks.iter().map(TickRecord::sample).collect()
    }

    fn tick_time(&self, k: u64) -> f64 {
        k as f64 / self.cfg.output_rate
    }

    fn record_tick(&mut self, t: f64) {
        let mut base = self.state.clone();
        base.features.clear();
        self.ticks.push(TickRecord {
            t,
            p: self.state.position_inertial(),
            q: self.state.q_b_i,
            v: self.state.q_b_i * self.state.v_ib_b,
            base,
            nav_cov: self.cov.block(POS, 9),
        });
    }

    pub fn push_imu(&mut self, s: ImuSample) -> Result<()> {
        if let Some(last) = self.imu.back() {
            if !(s.t > last.t) {
                return Err(Error::NonMonotoneImu(s.t));
            }
        }
        self.imu.push_back(s);
        Ok(())
    }

    fn trim_imu(&mut self) {
        // keep one sample at or before the filter time
        while self.imu.len() > 2 && self.imu[1].t <= self.t {
            self.imu.pop_front();
        }
    }

    fn propagate_to(&mut self, t1: f64) -> Result<()> {
        if !(t1 > self.t) {
            return Ok(());
        }
        let window = self.imu.make_contiguous();
        propagate(
            &mut self.state,
            &mut self.cov,
            window,
            self.t,
            t1,
            &self.cfg.noise,
            &self.cfg.gravity,
            self.cfg.mode,
        )?;
        self.t = t1;
        Ok(())
    }

    /// Propagates to `t`, recording every output tick on the way.
    pub fn advance_to(&mut self, t: f64) -> Result<()> {
        if t < self.t - 1e-9 {
            return Err(Error::StaleMeasurement { t, filter_t: self.t });
        }
        if self.imu.is_empty() {
            return Err(Error::EmptyImuWindow);
        }
        loop {
            let tick = self.tick_time(self.next_tick);
            if tick > t + 1e-9 {
                break;
            }
            self.propagate_to(tick)?;
            self.record_tick(tick);
            self.next_tick += 1;
        }
        self.propagate_to(t)?;
        self.trim_imu();
        Ok(())
    }

    fn radar_to_inertial(&self, p_r: &Vec3) -> Vec3 {
        let x = &self.state;
        x.q_b_i * (x.r_ib_b + x.r_br_b + x.q_b_r.inverse() * p_r)
    }

    pub fn process_radar(&mut self, scan: &RadarScan) -> Result<ScanLog> {
        let t = scan.t_mid();
        self.advance_to(t)?;
        self.stats.radar_scans += 1;
        let mut log = ScanLog {
            t,
            n_targets: scan.targets.len(),
            n_inliers: 0,
        };
        if !self.cfg.use_radar {
            return Ok(log);
        }
        let window = self.imu.make_contiguous();
        let res: RadarUpdateResult = radar_scan_update(
            &mut self.state,
            &mut self.cov,
            scan,
            window,
            &self.cfg.radar_noise,
            &self.cfg.radar_gate,
            &self.cfg.iekf,
        )?;
        log.n_inliers = res.inlier_count();
        self.stats.radar_inliers += res.inlier_count();
        self.stats.radar_outliers += res.outlier_count();
        let points: Vec<Vec3> = res
            .inliers
            .iter()
            .map(|&k| self.radar_to_inertial(&scan.targets[k].position()))
            .collect();
        self.map.insert_points(&points, t);
        let sensor = self.radar_to_inertial(&Vec3::zeros());
        self.map.prune(&sensor, t);
        Ok(log)
    }

    pub fn process_features(&mut self, frame: &PixelFrame) -> Result<VisionStats> {
        self.advance_to(frame.t)?;
        self.stats.feature_frames += 1;
        if !self.cfg.use_vision {
            return Ok(VisionStats::default());
        }
        let ff = frame.to_feature_frame(self.cfg.patch_halfsize_px);
        let use_hints = self.cfg.use_radar && self.cfg.radar_depth_hints;
        let half = self.cfg.patch_halfsize_px;
        let map = &mut self.map;
        let stats = vision_frame_update(&mut self.state, &mut self.cov, &ff, &self.cfg.vision, |x, obs| {
            if !use_hints {
                return None;
            }
            let center: Vector2<f64> = observation_pixel(obs, &ff.intrinsics)?;
            let q_c_i = x.q_b_i * x.q_b_c.inverse();
            let t_c = x.q_b_i * (x.r_ib_b + x.r_bc_b);
            let pose = Isometry3::from_parts(Translation3::from(t_c), q_c_i);
            let q = map.query_feature_depth(&pose, &ff.intrinsics, &center, half);
            if !q.erased.is_empty() {
                debug!("feature {} erased {} occluded voxels", obs.track_id, q.erased.len());
            }
            q.hint.map(|h| DepthHint {
                range_mean: h.range_mean,
                count: h.count,
            })
        })?;
        self.stats.feature_updates += stats.updated;
        self.stats.features_initialized += stats.initialized.len();
        self.stats.features_radar_initialized += stats.radar_initialized.len();
        Ok(stats)
    }

    /// Propagates to the newest buffered IMU sample.
    pub fn finish(&mut self) -> Result<()> {
        if let Some(last) = self.imu.back().map(|s| s.t) {
            self.advance_to(last)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{preset, Scenario, GRAVITY};

    fn hover_imu(t_end: f64, q: &Quat) -> Vec<ImuSample> {
        (0..=((t_end * 200.0) as usize))
            .map(|k| ImuSample {
                t: k as f64 / 200.0,
                f_tilde: -(q.inverse() * GRAVITY),
                w_tilde: Vec3::zeros(),
            })
            .collect()
    }

    fn hover_pose(q: Quat) -> InitialPose {
        InitialPose {
            t: 0.0,
            p: Vec3::new(1.0, 2.0, 3.0),
            q,
            v: Vec3::zeros(),
        }
    }

    #[test]
    fn imu_only_hover_stays_put() {
        let q = Quat::from_euler_angles(0.1, -0.05, 1.2);
        let mut est = Estimator::new(EstimatorConfig::default(), &hover_pose(q)).unwrap();
        for s in hover_imu(5.0, &q) {
            est.push_imu(s).unwrap();
        }
        est.finish().unwrap();
        let traj = est.trajectory();
        assert_eq!(traj.len(), 101);
        for s in &traj {
            assert!((s.position - Vec3::new(1.0, 2.0, 3.0)).norm() < 1e-9);
            assert!(s.orientation.angle_to(&q) < 1e-12);
        }
        assert!((traj[100].t - 5.0).abs() < 1e-12);
    }

    #[test]
    fn stale_measurements_are_rejected() {
        let q = Quat::identity();
        let mut est = Estimator::new(EstimatorConfig::default(), &hover_pose(q)).unwrap();
        for s in hover_imu(1.0, &q) {
            est.push_imu(s).unwrap();
        }
        est.advance_to(0.5).unwrap();
        assert!(matches!(est.advance_to(0.4), Err(Error::StaleMeasurement { .. })));
        assert!(est.push_imu(hover_imu(0.1, &q)[0]).is_err());
    }

    #[test]
    fn initial_velocity_is_exact_for_quadratics() {
        let p = |t: f64| Vec3::new(1.0 + 2.0 * t + 3.0 * t * t, -t, 0.5 * t * t);
        let v = initial_velocity([p(0.0), p(0.01), p(0.02)], 0.01);
        assert!((v - Vec3::new(2.0, -1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn navigation_error_of_exact_state_is_zero() {
        let pose = InitialPose {
            t: 0.0,
            p: Vec3::new(1.0, 2.0, 3.0),
            q: Quat::from_euler_angles(0.2, 0.1, -1.0),
            v: Vec3::new(0.5, -1.0, 0.1),
        };
        let (x, p) = initial_state(&EstimatorConfig::default(), &pose);
        assert_eq!(p.dim(), BASE_DIM);
        let e = navigation_error(&x, &pose.p, &pose.v, &pose.q).unwrap();
        assert!(e.norm() < 1e-12);
        let e = navigation_error(&x, &(pose.p + pose.q * Vec3::new(0.1, 0.0, 0.0)), &pose.v, &pose.q).unwrap();
        assert!((e[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn radar_inliers_fill_the_map() {
        let sc = Scenario::new(preset("nominal", 1).unwrap().noise_free()).unwrap();
        let d = sc.dataset();
        let s0 = sc.truth(0.0);
        let pose = InitialPose {
            t: 0.0,
            p: s0.p,
            q: s0.q,
            v: s0.v,
        };
        let mut cfg = EstimatorConfig::default();
        cfg.extrinsics.r_br = sc.config.radar.r_br;
        cfg.extrinsics.q_b_r = sc.config.radar.q_b_r;
        cfg.use_vision = false;
        let mut est = Estimator::new(cfg, &pose).unwrap();
        let mut imu = d.imu.iter().peekable();
        for scan in d.radar.iter().take(30) {
            while let Some(s) = imu.next_if(|s| s.t <= scan.t_end + 0.05) {
                est.push_imu(*s).unwrap();
            }
            let log = est.process_radar(scan).unwrap();
            assert_eq!(log.n_inliers, log.n_targets);
        }
        assert!(est.map().point_count() > 50);
        // inserted points sit at landmarks
        for v in est.map().voxels() {
            for q in &v.points {
                let near = sc.landmarks.iter().map(|l| (l.p - q.p).norm()).fold(f64::INFINITY, f64::min);
                assert!(near < 1e-3, "{near}");
            }
        }
    }
}
