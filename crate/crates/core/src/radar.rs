//! Radial-speed measurements of static radar targets.

use log::warn;
use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{
    iekf_update, Covariance, FnMeasurement, FullState, GateConfig, IekfConfig, BG, Q_BR, R_BR, VEL,
};
use crate::geometry::{bearing_from_angles, skew, BearingVector, Vec3};
use crate::propagation::ImuSample;

/// Radial-speed resolution of the reference chirp configuration [m/s].
pub const DOPPLER_RESOLUTION: f64 = 0.133;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarTarget {
    pub d: f64,
    pub theta: f64,
    pub phi: f64,
    pub v_r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr: Option<f64>,
}

impl RadarTarget {
    pub fn bearing(&self) -> BearingVector {
        bearing_from_angles(self.theta, self.phi)
    }

    /// Target position in the radar frame.
    pub fn position(&self) -> Vec3 {
        self.bearing().as_vec() * self.d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarScan {
    pub t_start: f64,
    pub t_end: f64,
    pub targets: Vec<RadarTarget>,
}

impl RadarScan {
    pub fn t_mid(&self) -> f64 {
        0.5 * (self.t_start + self.t_end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DopplerNoiseConfig {
    pub sigma_vr: f64,
}

impl Default for DopplerNoiseConfig {
    fn default() -> Self {
        Self {
            sigma_vr: DOPPLER_RESOLUTION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GyroInterpolation {
    pub w: Vec3,
    /// `t_mid` was outside the window and the nearest sample was used.
    pub extrapolated: bool,
}

pub fn interpolate_gyro(imu_window: &[ImuSample], t_mid: f64) -> Result<GyroInterpolation> {
    let (first, last) = match (imu_window.first(), imu_window.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::EmptyImuWindow),
    };
    if t_mid < first.t {
        return Ok(GyroInterpolation {
            w: first.w_tilde,
            extrapolated: true,
        });
    }
    if t_mid > last.t {
        return Ok(GyroInterpolation {
            w: last.w_tilde,
            extrapolated: true,
        });
    }
    let k = imu_window.partition_point(|s| s.t < t_mid);
    if imu_window[k].t == t_mid {
        return Ok(GyroInterpolation {
            w: imu_window[k].w_tilde,
            extrapolated: false,
        });
    }
    let (a, b) = (&imu_window[k - 1], &imu_window[k]);
    let s = (t_mid - a.t) / (b.t - a.t);
    Ok(GyroInterpolation {
        w: a.w_tilde + (b.w_tilde - a.w_tilde) * s,
        extrapolated: false,
    })
}

/// Radar-frame velocity of the radar origin.
fn radar_velocity_body(state: &FullState, w_bar: &Vec3) -> Vec3 {
    state.v_ib_b + (w_bar - state.b_g).cross(&state.r_br_b)
}

/// Predicted radial speed. Approaching targets have negative radial speed.
pub fn doppler_predict(state: &FullState, mu_tilde: &BearingVector, w_bar: &Vec3) -> f64 {
    -mu_tilde.as_vec().dot(&(state.q_b_r * radar_velocity_body(state, w_bar)))
}

/// Row Jacobian of [`doppler_predict`] over the error state.
pub fn doppler_jacobian(state: &FullState, mu_tilde: &BearingVector, w_bar: &Vec3) -> RowDVector<f64> {
    let mut j = RowDVector::zeros(state.error_dim());
    let mu = mu_tilde.as_vec();
    let rot = state.q_b_r.to_rotation_matrix().into_inner();
    let mu_r = -mu.transpose() * rot;
    let y = rot * radar_velocity_body(state, w_bar);
    j.fixed_columns_mut::<3>(VEL).copy_from(&mu_r);
    j.fixed_columns_mut::<3>(BG).copy_from(&(mu_r * skew(&state.r_br_b)));
    j.fixed_columns_mut::<3>(R_BR).copy_from(&(mu_r * skew(&(w_bar - state.b_g))));
    j.fixed_columns_mut::<3>(Q_BR).copy_from(&(mu.transpose() * skew(&y)));
    j
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RadarUpdateResult {
    /// Indices into `scan.targets`.
    pub inliers: Vec<usize>,
    pub outliers: Vec<usize>,
    /// Targets skipped because the update failed numerically.
    pub failed: Vec<usize>,
    pub extrapolated_gyro: bool,
}

impl RadarUpdateResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.len()
    }
    pub fn outlier_count(&self) -> usize {
        self.outliers.len()
    }
}

/// Fuses every target of `scan` as a separate scalar update.
pub fn radar_scan_update(
    state: &mut FullState,
    cov: &mut Covariance,
    scan: &RadarScan,
    imu_window: &[ImuSample],
    noise: &DopplerNoiseConfig,
    gate: &GateConfig,
    iekf: &IekfConfig,
) -> Result<RadarUpdateResult> {
    let mut out = RadarUpdateResult::default();
    if scan.targets.is_empty() {
        return Ok(out);
    }
    let gyro = interpolate_gyro(imu_window, scan.t_mid())?;
    if gyro.extrapolated {
        warn!("radar scan at t = {} outside the IMU window, holding the nearest gyro sample", scan.t_mid());
    }
    out.extrapolated_gyro = gyro.extrapolated;
    let w_bar = gyro.w;
    let r = DMatrix::from_element(1, 1, noise.sigma_vr * noise.sigma_vr);
    for (k, target) in scan.targets.iter().enumerate() {
        let mu = target.bearing();
        let v_r = target.v_r;
        let model = FnMeasurement {
            dim: 1,
            residual: |x: &FullState| DVector::from_element(1, doppler_predict(x, &mu, &w_bar) - v_r),
            jacobian: |x: &FullState| DMatrix::from_row_slice(1, x.error_dim(), doppler_jacobian(x, &mu, &w_bar).as_slice()),
        };
        match iekf_update(state, cov, &model, &r, gate, iekf) {
            Ok(o) if o.accepted => out.inliers.push(k),
            Ok(_) => out.outliers.push(k),
            Err(e) => {
                warn!("radar target {k} skipped: {e}");
                out.failed.push(k);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::test_util::{random_state, random_vec};
    use crate::filter::{boxplus, ErrorState, BASE_DIM};
    use crate::geometry::{so3_exp, Quat};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn sample(t: f64, w: Vec3) -> ImuSample {
        ImuSample {
            t,
            f_tilde: Vec3::zeros(),
            w_tilde: w,
        }
    }

    #[test]
    fn gyro_interpolation_cases() {
        let c = Vec3::new(0.1, 0.2, 0.3);
        let imu: Vec<_> = (0..5).map(|k| sample(k as f64 * 0.1, c)).collect();
        let g = interpolate_gyro(&imu, 0.23).unwrap();
        assert!((g.w - c).norm() < 1e-15 && !g.extrapolated);

        let imu = vec![sample(0.0, Vec3::zeros()), sample(1.0, Vec3::new(0.0, 0.0, 2.0))];
        let g = interpolate_gyro(&imu, 0.5).unwrap();
        assert_eq!(g.w, Vec3::new(0.0, 0.0, 1.0));
        let g = interpolate_gyro(&imu, -0.5).unwrap();
        assert!(g.extrapolated);
        assert_eq!(g.w, Vec3::zeros());
        let g = interpolate_gyro(&imu, 1.0).unwrap();
        assert!(!g.extrapolated);
        assert_eq!(g.w, Vec3::new(0.0, 0.0, 2.0));
        assert!(interpolate_gyro(&[], 0.0).is_err());
    }

    #[test]
    fn predict_sign_convention() {
        let mut x = FullState::default();
        x.v_ib_b = Vec3::x();
        let mu = BearingVector::new(Vec3::x()).unwrap();
        assert_eq!(doppler_predict(&x, &mu, &Vec3::zeros()), -1.0);
    }

    #[test]
    fn predict_lever_arm() {
        let mut x = FullState::default();
        x.r_br_b = Vec3::new(0.1, 0.0, 0.0);
        let mu = BearingVector::new(Vec3::y()).unwrap();
        assert!((doppler_predict(&x, &mu, &Vec3::z()) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn predict_orthogonal_is_zero() {
        let mut x = FullState::default();
        x.v_ib_b = Vec3::new(1.0, 2.0, 0.0);
        x.q_b_r = so3_exp(&Vec3::new(0.0, 0.0, 0.3));
        let vr = x.q_b_r * x.v_ib_b;
        let mu = BearingVector::new(vr.cross(&Vec3::z())).unwrap();
        assert!(doppler_predict(&x, &mu, &Vec3::zeros()).abs() < 1e-15);
    }

    #[test]
    fn jacobian_simple_blocks() {
        let mut x = FullState::default();
        x.v_ib_b = Vec3::new(0.3, 0.1, 0.0);
        x.r_br_b = Vec3::new(0.2, 0.0, 0.1);
        let mu = BearingVector::new(Vec3::x()).unwrap();
        let j = doppler_jacobian(&x, &mu, &Vec3::zeros());
        assert_eq!(j.fixed_columns::<3>(VEL).transpose(), Vec3::new(-1.0, 0.0, 0.0));
        assert_eq!(j.fixed_columns::<3>(R_BR).amax(), 0.0);
    }

    fn random_target_state(rng: &mut ChaCha8Rng, seed: u64) -> (FullState, BearingVector, Vec3) {
        let x = random_state(seed, 2);
        let mu = BearingVector::new(random_vec(rng, 1.0) + Vec3::x() * 0.5).unwrap();
        let w = random_vec(rng, 1.0);
        (x, mu, w)
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        for seed in 0..200 {
            let (x, mu, w) = random_target_state(&mut rng, seed);
            let n = x.error_dim();
            let j = doppler_jacobian(&x, &mu, &w);
            let mut fd = RowDVector::zeros(n);
            for k in 0..n {
                let mut d = ErrorState::zeros(n);
                d.0[k] = h;
                let p = doppler_predict(&boxplus(&x, &d).unwrap(), &mu, &w);
                d.0[k] = -h;
                let m = doppler_predict(&boxplus(&x, &d).unwrap(), &mu, &w);
                fd[k] = (p - m) / (2.0 * h);
            }
            let err = (&j - &fd).amax();
            assert!(err <= 1e-5 * fd.amax().max(1.0), "seed {seed}: {err}");
        }
    }

    #[test]
    fn jacobian_has_only_four_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (x, mu, w) = random_target_state(&mut rng, 7);
        let j = doppler_jacobian(&x, &mu, &w);
        for k in 0..x.error_dim() {
            let inside = [VEL, BG, R_BR, Q_BR].iter().any(|&o| (o..o + 3).contains(&k));
            if !inside {
                assert_eq!(j[k], 0.0);
            }
        }
    }

    fn imu_const(w: Vec3) -> Vec<ImuSample> {
        (0..=10).map(|k| sample(k as f64 * 0.01, w)).collect()
    }

    fn moving_state() -> (FullState, Covariance) {
        let mut x = FullState::default();
        x.v_ib_b = Vec3::new(1.5, 0.2, 0.0);
        x.r_br_b = Vec3::new(0.1, 0.0, 0.05);
        x.q_b_r = so3_exp(&Vec3::new(0.0, 0.05, 0.0));
        let mut p = Covariance(DMatrix::identity(BASE_DIM, BASE_DIM) * 1e-6);
        p.set_block_diag(VEL, &[0.04, 0.04, 0.04]);
        (x, p)
    }

    fn consistent_target(x: &FullState, w: &Vec3, theta: f64, phi: f64) -> RadarTarget {
        let mu = bearing_from_angles(theta, phi);
        RadarTarget {
            d: 5.0,
            theta,
            phi,
            v_r: doppler_predict(x, &mu, w),
            snr: None,
        }
    }

    #[test]
    fn empty_scan_is_noop() {
        let (mut x, mut p) = moving_state();
        let before = (x.clone(), p.clone());
        let scan = RadarScan {
            t_start: 0.04,
            t_end: 0.06,
            targets: vec![],
        };
        let out = radar_scan_update(&mut x, &mut p, &scan, &[], &Default::default(), &Default::default(), &Default::default()).unwrap();
        assert_eq!((out.inlier_count(), out.outlier_count()), (0, 0));
        assert_eq!((x, p), before);
    }

    #[test]
    fn consistent_target_shrinks_velocity_variance() {
        let (mut x, mut p) = moving_state();
        let w = Vec3::new(0.0, 0.0, 0.3);
        let target = consistent_target(&x, &w, 0.0, 0.0);
        let scan = RadarScan {
            t_start: 0.04,
            t_end: 0.06,
            targets: vec![target],
        };
        let mu = target.bearing();
        let dir = x.q_b_r.inverse() * mu.as_vec();
        let var = |p: &Covariance| {
            let s = p.0.fixed_view::<3, 3>(VEL, VEL);
            (dir.transpose() * s * dir)[0]
        };
        let before = var(&p);
        let out = radar_scan_update(&mut x, &mut p, &scan, &imu_const(w), &Default::default(), &Default::default(), &Default::default()).unwrap();
        assert_eq!(out.inliers, vec![0]);
        assert!(var(&p) < before);
    }

    #[test]
    fn inconsistent_target_is_rejected() {
        let (mut x, mut p) = moving_state();
        let w = Vec3::new(0.0, 0.0, 0.3);
        let good = consistent_target(&x, &w, 0.2, 0.1);
        let mut bad = consistent_target(&x, &w, -0.3, 0.0);
        bad.v_r += 10.0;
        let scan = RadarScan {
            t_start: 0.04,
            t_end: 0.06,
            targets: vec![good, bad],
        };
        let out = radar_scan_update(&mut x, &mut p, &scan, &imu_const(w), &Default::default(), &Default::default(), &Default::default()).unwrap();
        assert_eq!(out.inliers, vec![0]);
        assert_eq!(out.outliers, vec![1]);
    }

    #[test]
    fn sequential_matches_stacked_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let (x0, p0) = moving_state();
            let w = random_vec(&mut rng, 0.5);
            let noise = DopplerNoiseConfig { sigma_vr: 0.1 };
            let targets: Vec<_> = (0..4)
                .map(|_| {
                    let mut t = consistent_target(&x0, &w, rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
                    t.v_r += rng.random_range(-1e-3..1e-3);
                    t
                })
                .collect();
            let scan = RadarScan {
                t_start: 0.04,
                t_end: 0.06,
                targets: targets.clone(),
            };
            let (mut xs, mut ps) = (x0.clone(), p0.clone());
            let gate = GateConfig {
                enabled: false,
                ..Default::default()
            };
            radar_scan_update(&mut xs, &mut ps, &scan, &imu_const(w), &noise, &gate, &IekfConfig::default()).unwrap();

            // stacked oracle, linearized once at the prior
            let n = x0.error_dim();
            let m = targets.len();
            let mut h = DMatrix::zeros(m, n);
            let mut e = DVector::zeros(m);
            for (k, t) in targets.iter().enumerate() {
                let mu = t.bearing();
                h.row_mut(k).copy_from(&doppler_jacobian(&x0, &mu, &w));
                e[k] = t.v_r - doppler_predict(&x0, &mu, &w);
            }
            let r = DMatrix::identity(m, m) * noise.sigma_vr.powi(2);
            let s = &h * &p0.0 * h.transpose() + r;
            let k = &p0.0 * h.transpose() * s.try_inverse().unwrap();
            let xe = boxplus(&x0, &ErrorState(&k * e)).unwrap();
            assert!((xs.v_ib_b - xe.v_ib_b).norm() < 1e-6);
            assert!((xs.r_br_b - xe.r_br_b).norm() < 1e-6);
        }
    }

    #[test]
    fn static_platform_stays_near_zero_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut x = FullState::default();
        x.q_b_r = Quat::identity();
        let mut p = Covariance(DMatrix::identity(BASE_DIM, BASE_DIM) * 1e-8);
        p.set_block_diag(VEL, &[0.01, 0.01, 0.01]);
        let noise = DopplerNoiseConfig::default();
        let normal = Normal::new(0.0, noise.sigma_vr).unwrap();
        let imu = imu_const(Vec3::zeros());
        for _ in 0..1000 {
            let targets = (0..3)
                .map(|_| RadarTarget {
                    d: 4.0,
                    theta: rng.random_range(-1.0..1.0),
                    phi: rng.random_range(-0.5..0.5),
                    v_r: normal.sample(&mut rng),
                    snr: None,
                })
                .collect();
            let scan = RadarScan {
                t_start: 0.04,
                t_end: 0.06,
                targets,
            };
            radar_scan_update(&mut x, &mut p, &scan, &imu, &noise, &Default::default(), &Default::default()).unwrap();
            for k in 0..3 {
                let sigma = p.0[(VEL + k, VEL + k)].sqrt();
                assert!(x.v_ib_b[k].abs() <= 5.0 * sigma.max(1e-12));
            }
        }
    }
}
