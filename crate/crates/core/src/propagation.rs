//! Robocentric IMU propagation of the mean and covariance.
//!
//! The discrete step integrates rotation exactly over each interval and uses a
//! trapezoidal rule for position, with the specific force applied at the
//! mid-interval attitude. Features are moved by the rigid camera motion over
//! the interval. The state-transition matrix is the exact linearization of
//! that step.

use nalgebra::{DMatrix, DVector, Matrix3x2, SMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{
    feature_offset, Covariance, FullState, ATT, BA, BG, POS, Q_BC, Q_BR, RHO_MIN, R_BC, R_BR,
    VEL,
};
use crate::geometry::{skew, so3_exp, so3_right_jacobian, tangent_basis, BearingVector, Mat3, Vec3};

/// Longest single integration step [s]; longer intervals are subdivided.
pub const MAX_STEP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    pub f_tilde: Vec3,
    pub w_tilde: Vec3,
}

/// Continuous-time noise densities (square root of the PSD).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessNoiseConfig {
    pub w_r: f64,
    pub w_f: f64,
    pub w_omega: f64,
    pub w_ba: f64,
    pub w_bg: f64,
    pub w_rbc: f64,
    pub w_qbc: f64,
    pub w_rbr: f64,
    pub w_qbr: f64,
    pub w_mu: f64,
    pub w_rho: f64,
    /// Keeps the camera extrinsics fixed: no process noise and zero covariance.
    pub freeze_camera_extrinsics: bool,
}

impl Default for ProcessNoiseConfig {
    fn default() -> Self {
        Self {
            w_r: 0.0,
            w_f: 0.002,
            w_omega: 2e-4,
            w_ba: 3e-4,
            w_bg: 2e-5,
            w_rbc: 0.0,
            w_qbc: 0.0,
            w_rbr: 0.0,
            w_qbr: 0.0,
            w_mu: 0.0,
            w_rho: 0.0,
            freeze_camera_extrinsics: true,
        }
    }
}

impl ProcessNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_r, self.w_f, self.w_omega, self.w_ba, self.w_bg, self.w_rbc, self.w_qbc,
            self.w_rbr, self.w_qbr, self.w_mu, self.w_rho,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("noise densities must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn zero() -> Self {
        Self {
            w_r: 0.0,
            w_f: 0.0,
            w_omega: 0.0,
            w_ba: 0.0,
            w_bg: 0.0,
            w_rbc: 0.0,
            w_qbc: 0.0,
            w_rbr: 0.0,
            w_qbr: 0.0,
            w_mu: 0.0,
            w_rho: 0.0,
            freeze_camera_extrinsics: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GravityVector {
    pub g: Vec3,
}

impl Default for GravityVector {
    fn default() -> Self {
        Self {
            g: Vec3::new(0.0, 0.0, -9.81),
        }
    }
}

impl GravityVector {
    pub fn new(g: Vec3) -> Result<Self> {
        let n = g.norm();
        if !(9.7..=9.9).contains(&n) {
            return Err(Error::InvalidConfig(format!("gravity magnitude {n} outside [9.7, 9.9]")));
        }
        Ok(Self { g })
    }

    /// Accepts any finite vector.
    pub fn overridden(g: Vec3) -> Self {
        Self { g }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropagationMode {
    /// One step with the window mean (subdivided past [`MAX_STEP`]).
    #[default]
    Averaged,
    /// One step per IMU sample interval.
    PerSample,
}

pub fn bias_correct(sample: &ImuSample, b_a: &Vec3, b_g: &Vec3) -> (Vec3, Vec3) {
    (sample.f_tilde - b_a, sample.w_tilde - b_g)
}

/// Time derivative of the state in error-state coordinates.
///
/// The attitude entry is the left-chart rate `R(q) ŵ`; feature entries are
/// `N(μ)ᵀ μ̇` and `ρ̇`.
pub fn continuous_dynamics(state: &FullState, f_hat: &Vec3, w_hat: &Vec3, g: &Vec3) -> DVector<f64> {
    let mut d = DVector::zeros(state.error_dim());
    let r = &state.r_ib_b;
    let v = &state.v_ib_b;
    let rot = state.q_b_i.to_rotation_matrix();
    let r_dot = -w_hat.cross(r) + v;
    let v_dot = -w_hat.cross(v) + f_hat + rot.transpose() * g;
    let th_dot = rot * w_hat;
    d.fixed_rows_mut::<3>(POS).copy_from(&r_dot);
    d.fixed_rows_mut::<3>(VEL).copy_from(&v_dot);
    d.fixed_rows_mut::<3>(ATT).copy_from(&th_dot);

    let (w_c, v_c) = camera_rates(state, w_hat);
    for (i, f) in state.features.iter().enumerate() {
        let mu = f.bearing.as_vec();
        let rho = f.inv_depth;
        let proj = Mat3::identity() - mu * mu.transpose();
        let mu_dot = -w_c.cross(mu) - rho * proj * v_c;
        let rho_dot = rho * rho * mu.dot(&v_c);
        let o = feature_offset(i);
        let t = tangent_basis(&f.bearing).transpose() * mu_dot;
        d[o] = t.x;
        d[o + 1] = t.y;
        d[o + 2] = rho_dot;
    }
    d
}

/// Camera angular rate and camera-origin velocity, both in the camera frame.
fn camera_rates(state: &FullState, w_hat: &Vec3) -> (Vec3, Vec3) {
    let r_bc = state.q_b_c.to_rotation_matrix();
    let w_c = r_bc * w_hat;
    let v_c = r_bc * (state.v_ib_b + w_hat.cross(&state.r_bc_b));
    (w_c, v_c)
}

/// Advances the mean by `dt` with bias-corrected inputs.
pub fn discrete_step(state: &FullState, f_hat: &Vec3, w_hat: &Vec3, g: &Vec3, dt: f64) -> FullState {
    let mut x = state.clone();
    let phi = w_hat * dt;
    let e = so3_exp(&-phi);
    let e_half = so3_exp(&(-0.5 * phi));
    let v = state.v_ib_b;
    let g_b = state.q_b_i.inverse() * g;
    let v_next = e * (v + g_b * dt) + e_half * (f_hat * dt);
    x.r_ib_b = e * state.r_ib_b + 0.5 * dt * (e * v + v_next);
    x.v_ib_b = v_next;
    x.q_b_i = state.q_b_i * so3_exp(&phi);

    let (w_c, v_c) = camera_rates(state, w_hat);
    let m = so3_exp(&(-w_c * dt));
    for f in &mut x.features {
        let u = m * (f.bearing.as_vec() - f.inv_depth * dt * v_c);
        let n = u.norm();
        if let Some(b) = BearingVector::new(u) {
            f.bearing = b;
            f.inv_depth = (f.inv_depth / n).max(RHO_MIN);
        }
    }
    x
}

/// Linearization of [`discrete_step`].
///
/// Returns `F = ∂x'/∂δx` and `G = ∂x'/∂(δb_a, δb_g)` (n × 6). Since the IMU
/// noise enters exactly like a bias error, `G` also maps the averaged
/// accelerometer and gyro noise.
pub fn step_jacobians(
    state: &FullState,
    f_hat: &Vec3,
    w_hat: &Vec3,
    g: &Vec3,
    dt: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = state.error_dim();
    let mut f_mat = DMatrix::identity(n, n);
    let phi = w_hat * dt;
    let e = so3_exp(&-phi).to_rotation_matrix().into_inner();
    let e_half = so3_exp(&(-0.5 * phi)).to_rotation_matrix().into_inner();
    let jr = so3_right_jacobian(&-phi);
    let jr_half = so3_right_jacobian(&(-0.5 * phi));
    let rot = state.q_b_i.to_rotation_matrix().into_inner();
    let rot_next = rot * so3_exp(&phi).to_rotation_matrix().into_inner();
    let v = state.v_ib_b;
    let r = state.r_ib_b;
    let w = v + rot.transpose() * g * dt;

    let dv_dth = e * rot.transpose() * skew(g) * dt;
    let dv_dba = -e_half * dt;
    let dv_dbg = -e * skew(&w) * jr * dt - e_half * skew(&(f_hat * dt)) * jr_half * (0.5 * dt);

    let mut put = |row: usize, col: usize, m: &Mat3| {
        f_mat.fixed_view_mut::<3, 3>(row, col).copy_from(m);
    };
    put(POS, POS, &e);
    put(POS, VEL, &(e * dt));
    put(POS, ATT, &(0.5 * dt * dv_dth));
    put(POS, BA, &(0.5 * dt * dv_dba));
    put(
        POS,
        BG,
        &(-e * skew(&r) * jr * dt + 0.5 * dt * (-e * skew(&v) * jr * dt + dv_dbg)),
    );
    put(VEL, VEL, &e);
    put(VEL, ATT, &dv_dth);
    put(VEL, BA, &dv_dba);
    put(VEL, BG, &dv_dbg);
    put(ATT, BG, &(-rot_next * so3_right_jacobian(&phi) * dt));

    if !state.features.is_empty() {
        let r_bc = state.q_b_c.to_rotation_matrix().into_inner();
        let (w_c, v_c) = camera_rates(state, w_hat);
        let m = so3_exp(&(-w_c * dt)).to_rotation_matrix().into_inner();
        let jr_c = so3_right_jacobian(&(-w_c * dt));
        // ω^C and v^C against (δv, δb_g, δr_BC, δθ_BC)
        let dwc_dbg = -r_bc;
        let dwc_dthc = -skew(&w_c);
        let dvc_dv = r_bc;
        let dvc_dbg = r_bc * skew(&state.r_bc_b);
        let dvc_drbc = r_bc * skew(w_hat);
        let dvc_dthc = -skew(&v_c);
        for (i, feat) in state.features.iter().enumerate() {
            let o = feature_offset(i);
            let mu = feat.bearing.as_vec();
            let rho = feat.inv_depth;
            let wv = mu - rho * dt * v_c;
            let u = m * wv;
            let un = u.norm();
            let mu_next = u / un;
            // du = M dw + A dω^C
            let a = m * skew(&wv) * jr_c * dt;
            let b = -m * (rho * dt); // du / dv^C
            let n_next = tangent_basis(&BearingVector::new(u).unwrap_or(feat.bearing));
            let proj = (Mat3::identity() - mu_next * mu_next.transpose()) / un;
            let dmu: SMatrix<f64, 2, 3> = n_next.transpose() * proj;
            let drho: SMatrix<f64, 1, 3> = -(rho / (un * un)) * mu_next.transpose();
            let mut row_block = |col: usize, du: &Mat3| {
                let top = dmu * du;
                let bot = drho * du;
                f_mat.fixed_view_mut::<2, 3>(o, col).copy_from(&top);
                f_mat.fixed_view_mut::<1, 3>(o + 2, col).copy_from(&bot);
            };
            row_block(VEL, &(b * dvc_dv));
            row_block(BG, &(a * dwc_dbg + b * dvc_dbg));
            row_block(R_BC, &(b * dvc_drbc));
            row_block(Q_BC, &(a * dwc_dthc + b * dvc_dthc));
            // own block
            let n_mu: Matrix3x2<f64> = tangent_basis(&feat.bearing);
            let du_dmu = m * n_mu;
            let du_drho = -m * v_c * dt;
            let top = dmu * du_dmu;
            let bot = drho * du_dmu;
            f_mat.fixed_view_mut::<2, 2>(o, o).copy_from(&top);
            f_mat.fixed_view_mut::<1, 2>(o + 2, o).copy_from(&bot);
            let top = dmu * du_drho;
            f_mat[(o, o + 2)] = top[0];
            f_mat[(o + 1, o + 2)] = top[1];
            f_mat[(o + 2, o + 2)] = 1.0 / un + (drho * du_drho)[0];
        }
    }

    let mut g_mat = DMatrix::zeros(n, 6);
    g_mat
        .view_mut((0, 0), (n, 3))
        .copy_from(&f_mat.view((0, BA), (n, 3)));
    g_mat
        .view_mut((0, 3), (n, 3))
        .copy_from(&f_mat.view((0, BG), (n, 3)));
    for k in 0..3 {
        g_mat[(BA + k, k)] = 0.0;
        g_mat[(BG + k, 3 + k)] = 0.0;
    }
    (f_mat, g_mat)
}

/// Process noise added over one step of length `dt`.
fn add_process_noise(cov: &mut DMatrix<f64>, g_mat: &DMatrix<f64>, n_features: usize, cfg: &ProcessNoiseConfig, dt: f64) {
    let qa = cfg.w_f * cfg.w_f / dt;
    let qg = cfg.w_omega * cfg.w_omega / dt;
    let mut scaled = g_mat.clone();
    for c in 0..3 {
        scaled.column_mut(c).scale_mut(qa);
        scaled.column_mut(3 + c).scale_mut(qg);
    }
    *cov += &scaled * g_mat.transpose();
    let mut diag = |offset: usize, len: usize, density: f64| {
        let q = density * density * dt;
        for k in offset..offset + len {
            cov[(k, k)] += q;
        }
    };
    diag(POS, 3, cfg.w_r);
    diag(BA, 3, cfg.w_ba);
    diag(BG, 3, cfg.w_bg);
    if !cfg.freeze_camera_extrinsics {
        diag(R_BC, 3, cfg.w_rbc);
        diag(Q_BC, 3, cfg.w_qbc);
    }
    diag(R_BR, 3, cfg.w_rbr);
    diag(Q_BR, 3, cfg.w_qbr);
    for i in 0..n_features {
        let o = feature_offset(i);
        diag(o, 2, cfg.w_mu);
        diag(o + 2, 1, cfg.w_rho);
    }
}

/// One mean and covariance step with raw (uncorrected) IMU inputs.
pub fn propagate_step(
    state: &mut FullState,
    cov: &mut Covariance,
    f_tilde: &Vec3,
    w_tilde: &Vec3,
    dt: f64,
    cfg: &ProcessNoiseConfig,
    gravity: &GravityVector,
) {
    let f_hat = f_tilde - state.b_a;
    let w_hat = w_tilde - state.b_g;
    let (f_mat, g_mat) = step_jacobians(state, &f_hat, &w_hat, &gravity.g, dt);
    let fp = &f_mat * &cov.0;
    cov.0 = &fp * f_mat.transpose();
    add_process_noise(&mut cov.0, &g_mat, state.features.len(), cfg, dt);
    if cfg.freeze_camera_extrinsics {
        cov.clear_block(R_BC, 6);
    }
    cov.symmetrize();
    *state = discrete_step(state, &f_hat, &w_hat, &gravity.g, dt);
}

fn check_window(window: &[ImuSample]) -> Result<()> {
    if window.is_empty() {
        return Err(Error::EmptyImuWindow);
    }
    for pair in window.windows(2) {
        if !(pair[1].t > pair[0].t) {
            return Err(Error::NonMonotoneImu(pair[1].t));
        }
    }
    Ok(())
}

/// IMU reading at `t` by linear interpolation, held constant outside the window.
pub fn imu_at(window: &[ImuSample], t: f64) -> (Vec3, Vec3) {
    let first = &window[0];
    let last = &window[window.len() - 1];
    if t <= first.t {
        return (first.f_tilde, first.w_tilde);
    }
    if t >= last.t {
        return (last.f_tilde, last.w_tilde);
    }
    let k = window.partition_point(|s| s.t <= t);
    let (a, b) = (&window[k - 1], &window[k]);
    let s = (t - a.t) / (b.t - a.t);
    (
        a.f_tilde + (b.f_tilde - a.f_tilde) * s,
        a.w_tilde + (b.w_tilde - a.w_tilde) * s,
    )
}

/// Knots of the piecewise-linear IMU signal restricted to `[t0, t1]`.
fn knots(window: &[ImuSample], t0: f64, t1: f64) -> Vec<f64> {
    let mut ts = vec![t0];
    ts.extend(window.iter().map(|s| s.t).filter(|&t| t > t0 && t < t1));
    ts.push(t1);
    ts
}

/// Time average of the IMU signal over `[t0, t1]`.
pub fn average_imu(window: &[ImuSample], t0: f64, t1: f64) -> Result<(Vec3, Vec3)> {
    check_window(window)?;
    if !(t1 > t0) {
        return Err(Error::InvalidTimeSpan(t0, t1));
    }
    Ok(mean_on(window, t0, t1))
}

fn mean_on(window: &[ImuSample], t0: f64, t1: f64) -> (Vec3, Vec3) {
    let ts = knots(window, t0, t1);
    let mut f = Vec3::zeros();
    let mut w = Vec3::zeros();
    for pair in ts.windows(2) {
        let h = pair[1] - pair[0];
        let (fa, wa) = imu_at(window, pair[0]);
        let (fb, wb) = imu_at(window, pair[1]);
        f += (fa + fb) * (0.5 * h);
        w += (wa + wb) * (0.5 * h);
    }
    let span = t1 - t0;
    (f / span, w / span)
}

/// Propagates `state` and `cov` from `t0` to `t1`.
#[allow(clippy::too_many_arguments)]
pub fn propagate(
    state: &mut FullState,
    cov: &mut Covariance,
    imu_window: &[ImuSample],
    t0: f64,
    t1: f64,
    cfg: &ProcessNoiseConfig,
    gravity: &GravityVector,
    mode: PropagationMode,
) -> Result<()> {
    check_window(imu_window)?;
    if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::InvalidTimeSpan(t0, t1));
    }
    if cov.dim() != state.error_dim() {
        return Err(Error::DimensionMismatch {
            expected: state.error_dim(),
            got: cov.dim(),
        });
    }
    let intervals: Vec<(f64, f64)> = match mode {
        PropagationMode::Averaged => vec![(t0, t1)],
        PropagationMode::PerSample => knots(imu_window, t0, t1)
            .windows(2)
            .map(|p| (p[0], p[1]))
            .filter(|(a, b)| b > a)
            .collect(),
    };
    for (a, b) in intervals {
        let pieces = ((b - a) / MAX_STEP).ceil().max(1.0) as usize;
        let h = (b - a) / pieces as f64;
        for k in 0..pieces {
            let s0 = a + h * k as f64;
            let s1 = if k + 1 == pieces { b } else { s0 + h };
            let (f, w) = mean_on(imu_window, s0, s1);
            propagate_step(state, cov, &f, &w, s1 - s0, cfg, gravity);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::test_util::random_state;
    use crate::filter::{boxminus, boxplus, ErrorState, BASE_DIM};
    use crate::geometry::{so3_log, Quat};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g() -> Vec3 {
        GravityVector::default().g
    }

    #[test]
    fn bias_correct_cases() {
        let s = ImuSample {
            t: 0.0,
            f_tilde: Vec3::new(1.0, 2.0, 3.0),
            w_tilde: Vec3::new(0.1, 0.2, 0.3),
        };
        let (f, w) = bias_correct(&s, &Vec3::zeros(), &Vec3::zeros());
        assert_eq!(f, s.f_tilde);
        assert_eq!(w, s.w_tilde);
        let (f, _) = bias_correct(&s, &s.f_tilde, &Vec3::zeros());
        assert_eq!(f, Vec3::zeros());
        let d = Vec3::new(0.5, -0.5, 0.25);
        let (f1, w1) = bias_correct(&s, &d, &d);
        assert!((f1 - (s.f_tilde - d)).norm() < 1e-15);
        assert!((w1 - (s.w_tilde - d)).norm() < 1e-15);
    }

    #[test]
    fn hover_equilibrium_derivatives_vanish() {
        let mut x = random_state(1, 0);
        x.v_ib_b = Vec3::zeros();
        let f_hat = -(x.q_b_i.inverse() * g());
        let d = continuous_dynamics(&x, &f_hat, &Vec3::zeros(), &g());
        assert!(d.rows(0, 9).amax() < 1e-12);
    }

    #[test]
    fn pure_rotation_position_rate() {
        let mut x = FullState::default();
        x.r_ib_b = Vec3::new(1.0, 0.0, 0.0);
        let f_hat = -g();
        let d = continuous_dynamics(&x, &f_hat, &Vec3::z(), &g());
        assert!((d.fixed_rows::<3>(POS) - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn straight_ahead_feature_matches_landmark_depth() {
        // body = camera frame, landmark 4 m ahead on the optical axis
        let mut x = FullState::default();
        let mut p = Covariance::zeros(BASE_DIM);
        let mu = BearingVector::new(Vec3::z()).unwrap();
        crate::filter::feature_slot_add(&mut x, &mut p, 1, mu, 0.25, 0.0, 0.0).unwrap();
        let w = 1.5;
        x.v_ib_b = Vec3::new(0.0, 0.0, w);
        let d = continuous_dynamics(&x, &Vec3::zeros(), &Vec3::zeros(), &g());
        let o = feature_offset(0);
        assert!(d[o].abs() < 1e-15 && d[o + 1].abs() < 1e-15);
        // finite difference of 1/depth(t) for depth(t) = 4 − w t
        let h = 1e-5;
        let fd = (1.0 / (4.0 - w * h) - 1.0 / (4.0 + w * h)) / (2.0 * h);
        assert!((d[o + 2] - fd).abs() < 1e-6);
        assert!((d[o + 2] - 0.25 * 0.25 * w).abs() < 1e-15);
    }

    fn random_inputs(rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
        let r = |rng: &mut ChaCha8Rng, s: f64| {
            Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
        };
        (r(rng, 5.0) + Vec3::new(0.0, 0.0, 9.81), r(rng, 1.0))
    }

    #[test]
    fn step_converges_to_continuous_dynamics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..20 {
            let x = random_state(seed, 3);
            let (f, w) = random_inputs(&mut rng);
            let d = continuous_dynamics(&x, &f, &w, &g());
            let mut prev = f64::INFINITY;
            for dt in [1e-3, 1e-4] {
                let y = discrete_step(&x, &f, &w, &g(), dt);
                let fd = boxminus(&y, &x).unwrap().0 / dt;
                let err = (&fd - &d).amax();
                assert!(err < prev);
                prev = err;
            }
            assert!(prev < 1e-3 * d.amax().max(1.0), "seed {seed}: {prev}");
        }
    }

    /// Step driven by raw readings, so that bias perturbations take effect.
    fn raw_step(x: &FullState, f: &Vec3, w: &Vec3, dt: f64) -> FullState {
        discrete_step(x, &(f - x.b_a), &(w - x.b_g), &g(), dt)
    }

    /// Central differences of the discrete step along each error direction.
    fn fd_jacobian(x: &FullState, f: &Vec3, w: &Vec3, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = x.error_dim();
        let y0 = raw_step(x, f, w, dt);
        let h = 1e-6;
        let mut f_fd = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = ErrorState::zeros(n);
            d.0[j] = h;
            let yp = raw_step(&boxplus(x, &d).unwrap(), f, w, dt);
            d.0[j] = -h;
            let ym = raw_step(&boxplus(x, &d).unwrap(), f, w, dt);
            let col = (boxminus(&yp, &y0).unwrap().0 - boxminus(&ym, &y0).unwrap().0) / (2.0 * h);
            f_fd.set_column(j, &col);
        }
        // raw readings enter with the opposite sign of the biases
        let mut g_fd = DMatrix::zeros(n, 6);
        for j in 0..6 {
            let mut e = Vec3::zeros();
            e[j % 3] = h;
            let (fp, wp, fm, wm) = if j < 3 {
                (f - e, *w, f + e, *w)
            } else {
                (*f, w - e, *f, w + e)
            };
            let yp = raw_step(x, &fp, &wp, dt);
            let ym = raw_step(x, &fm, &wm, dt);
            let col = (boxminus(&yp, &y0).unwrap().0 - boxminus(&ym, &y0).unwrap().0) / (2.0 * h);
            g_fd.set_column(j, &col);
        }
        (f_fd, g_fd)
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1.0)
    }

    #[test]
    fn transition_matrix_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..40 {
            let x = random_state(500 + seed, 3);
            let (f, w) = random_inputs(&mut rng);
            let dt = rng.random_range(0.005..0.1);
            let (fa, ga) = step_jacobians(&x, &(f - x.b_a), &(w - x.b_g), &g(), dt);
            let (ff, gf) = fd_jacobian(&x, &f, &w, dt);
            assert!(rel_err(&fa, &ff) < 1e-5, "seed {seed}: F {}", rel_err(&fa, &ff));
            assert!(rel_err(&ga, &gf) < 1e-5, "seed {seed}: G {}", rel_err(&ga, &gf));
        }
    }

    fn stream(dt: f64, t_end: f64, f: Vec3, w: Vec3) -> Vec<ImuSample> {
        let n = (t_end / dt).round() as usize;
        (0..=n)
            .map(|k| ImuSample {
                t: k as f64 * dt,
                f_tilde: f,
                w_tilde: w,
            })
            .collect()
    }

    #[test]
    fn hover_with_zero_noise_keeps_state() {
        let mut x = FullState::default();
        x.q_b_i = so3_exp(&Vec3::new(0.1, -0.2, 0.7));
        let f = -(x.q_b_i.inverse() * g());
        let imu = stream(0.005, 1.0, f, Vec3::zeros());
        let mut p = Covariance::zeros(BASE_DIM);
        let mut cfg = ProcessNoiseConfig::zero();
        cfg.w_ba = 0.01;
        cfg.w_qbr = 0.02;
        let x0 = x.clone();
        propagate(&mut x, &mut p, &imu, 0.0, 1.0, &cfg, &GravityVector::default(), PropagationMode::PerSample).unwrap();
        assert!(boxminus(&x, &x0).unwrap().norm() < 1e-12);
        assert!((p.0[(BA, BA)] - 1e-4).abs() < 1e-12);
        assert!((p.0[(Q_BR, Q_BR)] - 4e-4).abs() < 1e-12);
        // only the random-walk blocks and what the accel bias drives are non-zero
        for i in 0..BASE_DIM {
            for j in 0..BASE_DIM {
                let driven = |k: usize| k < ATT || (BA..BG).contains(&k);
                let allowed = (driven(i) && driven(j)) || (i == j && (Q_BR..Q_BR + 3).contains(&i));
                if !allowed {
                    assert_eq!(p.0[(i, j)], 0.0, "({i}, {j})");
                }
            }
        }
    }

    #[test]
    fn constant_yaw_rate_integrates_exactly() {
        let imu = stream(0.001, 1.0, -g(), Vec3::z());
        let mut x = FullState::default();
        let mut p = Covariance::zeros(BASE_DIM);
        propagate(&mut x, &mut p, &imu, 0.0, 1.0, &ProcessNoiseConfig::zero(), &GravityVector::default(), PropagationMode::PerSample).unwrap();
        let yaw = so3_log(&x.q_b_i);
        assert!((yaw - Vec3::z()).norm() < 1e-4);
        assert!((x.q_b_i.into_inner().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quaternion_norm_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = random_state(9, 0);
        for _ in 0..10_000 {
            let (f, w) = random_inputs(&mut rng);
            x = discrete_step(&x, &f, &(w * 5.0), &g(), 0.01);
        }
        assert!((x.q_b_i.into_inner().norm() - 1.0).abs() < 1e-9);
    }

    /// Inertial trajectory: circle with constant yaw rate, starting at rest.
    fn circle_imu(dt: f64, t_end: f64) -> Vec<ImuSample> {
        let n = (t_end / dt).round() as usize;
        let w = 0.5;
        (0..=n)
            .map(|k| {
                let t = k as f64 * dt;
                // v_B = (s(t), 0, 0) with s = 2t, a_B = (ṡ, ω s, 0)
                let s = 2.0 * t;
                ImuSample {
                    t,
                    f_tilde: Vec3::new(2.0, w * s, 9.81),
                    w_tilde: Vec3::new(0.0, 0.0, w),
                }
            })
            .collect()
    }

    #[test]
    fn averaged_and_per_sample_agree_as_dt_shrinks() {
        let imu = circle_imu(0.001, 2.0);
        let run = |step: f64, mode| {
            let mut x = FullState::default();
            let mut p = Covariance::zeros(BASE_DIM);
            let steps = (2.0 / step).round() as usize;
            for k in 0..steps {
                let t0 = k as f64 * step;
                propagate(&mut x, &mut p, &imu, t0, t0 + step, &ProcessNoiseConfig::zero(), &GravityVector::default(), mode).unwrap();
            }
            x.position_inertial()
        };
        let reference = run(0.05, PropagationMode::PerSample);
        let d1 = (run(0.05, PropagationMode::Averaged) - reference).norm();
        let d2 = (run(0.025, PropagationMode::Averaged) - reference).norm();
        assert!(d1 < 1e-2, "{d1}");
        // second order: halving the step divides the gap by about four
        assert!(d2 < 0.35 * d1, "{d1} {d2}");
    }

    #[test]
    fn per_sample_matches_analytic_circle() {
        // speed 2t along body x with yaw rate 0.5: heading ψ = 0.5 t
        let imu = circle_imu(0.005, 2.0);
        let mut x = FullState::default();
        let mut p = Covariance::zeros(BASE_DIM);
        propagate(&mut x, &mut p, &imu, 0.0, 2.0, &ProcessNoiseConfig::zero(), &GravityVector::default(), PropagationMode::PerSample).unwrap();
        // p(T) = ∫ 2t (cos 0.5t, sin 0.5t) dt
        let n = 200_000;
        let h = 2.0 / n as f64;
        let mut p_ref = Vec3::zeros();
        for k in 0..n {
            let t = (k as f64 + 0.5) * h;
            p_ref += 2.0 * t * Vec3::new((0.5 * t).cos(), (0.5 * t).sin(), 0.0) * h;
        }
        assert!((x.position_inertial() - p_ref).norm() < 1e-4);
        assert!((x.v_ib_b - Vec3::new(4.0, 0.0, 0.0)).norm() < 1e-4, "{}", x.v_ib_b);
    }

    #[test]
    fn yaw_rotated_frame_gives_same_body_velocity() {
        let imu = circle_imu(0.005, 1.0);
        let run = |yaw: f64| {
            let mut x = FullState::default();
            x.q_b_i = Quat::from_euler_angles(0.0, 0.0, yaw) * so3_exp(&Vec3::new(0.0, 0.0, 0.0));
            let mut p = Covariance::zeros(BASE_DIM);
            propagate(&mut x, &mut p, &imu, 0.0, 1.0, &ProcessNoiseConfig::zero(), &GravityVector::default(), PropagationMode::PerSample).unwrap();
            x.v_ib_b
        };
        let v0 = run(0.0);
        for yaw in [0.3, -1.2, 2.9] {
            assert!((run(yaw) - v0).amax() < 1e-12);
        }
    }

    #[test]
    fn diagonal_never_decreases_with_pd_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut x = random_state(33, 4);
        let n = x.error_dim();
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.1..0.1));
        let mut p = Covariance(&a * a.transpose());
        let cfg = ProcessNoiseConfig {
            w_r: 0.01,
            w_rbc: 0.01,
            w_qbc: 0.01,
            w_rbr: 0.01,
            w_qbr: 0.01,
            w_mu: 0.01,
            w_rho: 0.01,
            freeze_camera_extrinsics: false,
            ..Default::default()
        };
        // identity transition isolates the noise term
        let before = p.0.diagonal();
        let (_, g_mat) = step_jacobians(&x, &Vec3::zeros(), &Vec3::zeros(), &g(), 0.01);
        add_process_noise(&mut p.0, &g_mat, x.features.len(), &cfg, 0.01);
        assert!((p.0.diagonal() - &before).iter().all(|d| *d > 0.0));
        // full step keeps P symmetric PSD
        let imu = stream(0.005, 0.5, -g(), Vec3::new(0.1, 0.0, 0.3));
        propagate(&mut x, &mut p, &imu, 0.0, 0.5, &cfg, &GravityVector::default(), PropagationMode::PerSample).unwrap();
        assert!(p.asymmetry() < 1e-9);
        assert!(p.min_eigenvalue() > -1e-9);
    }

    #[test]
    fn frozen_camera_extrinsics_have_no_covariance() {
        let mut x = random_state(8, 2);
        let n = x.error_dim();
        let mut p = Covariance(DMatrix::identity(n, n) * 1e-2);
        let imu = stream(0.005, 0.2, -g(), Vec3::new(0.1, 0.0, 0.3));
        propagate(&mut x, &mut p, &imu, 0.0, 0.2, &ProcessNoiseConfig::default(), &GravityVector::default(), PropagationMode::Averaged).unwrap();
        assert_eq!(p.0.rows(R_BC, 6).amax(), 0.0);
        assert_eq!(p.0.columns(R_BC, 6).amax(), 0.0);
    }

    #[test]
    fn window_errors() {
        let mut x = FullState::default();
        let mut p = Covariance::zeros(BASE_DIM);
        let cfg = ProcessNoiseConfig::default();
        let gv = GravityVector::default();
        assert!(matches!(
            propagate(&mut x, &mut p, &[], 0.0, 1.0, &cfg, &gv, PropagationMode::Averaged),
            Err(Error::EmptyImuWindow)
        ));
        let mut imu = stream(0.1, 1.0, Vec3::zeros(), Vec3::zeros());
        imu.swap(2, 3);
        assert!(matches!(
            propagate(&mut x, &mut p, &imu, 0.0, 1.0, &cfg, &gv, PropagationMode::Averaged),
            Err(Error::NonMonotoneImu(_))
        ));
        let imu = stream(0.1, 1.0, Vec3::zeros(), Vec3::zeros());
        assert!(propagate(&mut x, &mut p, &imu, 1.0, 1.0, &cfg, &gv, PropagationMode::Averaged).is_err());
    }

    #[test]
    fn average_of_linear_ramp() {
        let imu: Vec<_> = (0..=10)
            .map(|k| ImuSample {
                t: k as f64 * 0.1,
                f_tilde: Vec3::new(k as f64, 0.0, 0.0),
                w_tilde: Vec3::zeros(),
            })
            .collect();
        let (f, _) = average_imu(&imu, 0.25, 0.75).unwrap();
        assert!((f.x - 5.0).abs() < 1e-12);
        // held constant past the end
        let (f, _) = average_imu(&imu, 1.0, 2.0).unwrap();
        assert!((f.x - 10.0).abs() < 1e-12);
        assert!(GravityVector::new(Vec3::new(0.0, 0.0, -5.0)).is_err());
    }

    #[test]
    fn long_gap_is_subdivided() {
        // a 1 s step with rotation only: subdivision does not change the exact rotation
        let imu = stream(1.0, 1.0, -g(), Vec3::new(0.0, 0.0, 0.7));
        let mut x = FullState::default();
        let mut p = Covariance::zeros(BASE_DIM);
        propagate(&mut x, &mut p, &imu, 0.0, 1.0, &ProcessNoiseConfig::zero(), &GravityVector::default(), PropagationMode::Averaged).unwrap();
        assert!((so3_log(&x.q_b_i) - Vec3::new(0.0, 0.0, 0.7)).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn averaging_is_bounded_by_samples(vals in proptest::collection::vec(-10.0f64..10.0, 2..20), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let n = vals.len();
            let imu: Vec<_> = vals.iter().enumerate().map(|(k, v)| ImuSample {
                t: k as f64 / (n - 1) as f64,
                f_tilde: Vec3::new(*v, 0.0, 0.0),
                w_tilde: Vec3::zeros(),
            }).collect();
            let (t0, t1) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(t1 - t0 > 1e-6);
            let (f, _) = average_imu(&imu, t0, t1).unwrap();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(f.x >= lo - 1e-9 && f.x <= hi + 1e-9);
        }
    }
}
