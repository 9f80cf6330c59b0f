//! State container, error-state algebra and the iterated update.
//!
//! The error state is laid out as nine 3-blocks followed by one 3-block per
//! active feature (two tangent coordinates of the bearing, then inverse
//! depth):
//!
//! | offset | block            |
//! |--------|------------------|
//! | 0      | position `r_IB_B`|
//! | 3      | velocity `v_IB_B`|
//! | 6      | attitude `q_B_I` |
//! | 9      | accel bias       |
//! | 12     | gyro bias        |
//! | 15     | `r_BC_B`         |
//! | 18     | `q_B_C`          |
//! | 21     | `r_BR_B`         |
//! | 24     | `q_B_R`          |
//! | 27+3i  | feature i        |
//!
//! Rotation errors are applied on the left, `q = Exp(δθ) ⊗ q̂`, for the
//! attitude and both extrinsic rotations. Feature bearings move in their
//! tangent plane so that the first-order displacement is `N(μ) δμ`.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::geometry::{
    bearing_boxminus, bearing_boxplus, so3_exp, so3_log, BearingVector, Quat, Vec3,
};

pub const POS: usize = 0;
pub const VEL: usize = 3;
pub const ATT: usize = 6;
pub const BA: usize = 9;
pub const BG: usize = 12;
pub const R_BC: usize = 15;
pub const Q_BC: usize = 18;
pub const R_BR: usize = 21;
pub const Q_BR: usize = 24;
pub const BASE_DIM: usize = 27;
pub const FEATURE_DIM: usize = 3;

/// Smallest admissible inverse depth (10 km).
pub const RHO_MIN: f64 = 1e-4;
pub const DEFAULT_CAPACITY: usize = 25;

pub fn feature_offset(index: usize) -> usize {
    BASE_DIM + FEATURE_DIM * index
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSlot {
    pub id: u64,
    pub bearing: BearingVector,
    pub inv_depth: f64,
    /// Consecutive frames without an observation.
    pub misses: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    pub r_ib_b: Vec3,
    pub v_ib_b: Vec3,
    pub q_b_i: Quat,
    pub b_a: Vec3,
    pub b_g: Vec3,
    pub r_bc_b: Vec3,
    pub q_b_c: Quat,
    pub r_br_b: Vec3,
    pub q_b_r: Quat,
    pub features: Vec<FeatureSlot>,
    pub capacity: usize,
}

impl Default for FullState {
    fn default() -> Self {
        Self {
            r_ib_b: Vec3::zeros(),
            v_ib_b: Vec3::zeros(),
            q_b_i: Quat::identity(),
            b_a: Vec3::zeros(),
            b_g: Vec3::zeros(),
            r_bc_b: Vec3::zeros(),
            q_b_c: Quat::identity(),
            r_br_b: Vec3::zeros(),
            q_b_r: Quat::identity(),
            features: Vec::new(),
            capacity: DEFAULT_CAPACITY,
        }
    }
}

impl FullState {
    pub fn error_dim(&self) -> usize {
        BASE_DIM + FEATURE_DIM * self.features.len()
    }

    pub fn feature_index(&self, id: u64) -> Option<usize> {
        self.features.iter().position(|f| f.id == id)
    }

    /// Inertial-frame position of the body, `R(q_B_I) r_IB_B`.
    pub fn position_inertial(&self) -> Vec3 {
        self.q_b_i * self.r_ib_b
    }

    /// Builds the robocentric state from an inertial pose and body velocity.
    pub fn set_pose_inertial(&mut self, p: &Vec3, q_b_i: &Quat) {
        self.q_b_i = *q_b_i;
        self.r_ib_b = q_b_i.inverse() * p;
    }

    pub fn clamp_inverse_depths(&mut self) {
        for f in &mut self.features {
            if !(f.inv_depth > RHO_MIN) {
                f.inv_depth = RHO_MIN;
            }
        }
    }

    fn same_slots(&self, other: &FullState) -> bool {
        self.features.len() == other.features.len()
            && self.features.iter().zip(&other.features).all(|(a, b)| a.id == b.id)
    }
}

/// Minimal-coordinate deviation between two [`FullState`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorState(pub DVector<f64>);

impl ErrorState {
    pub fn zeros(dim: usize) -> Self {
        Self(DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn block3(&self, offset: usize) -> Vec3 {
        Vec3::new(self.0[offset], self.0[offset + 1], self.0[offset + 2])
    }

    pub fn set_block3(&mut self, offset: usize, v: &Vec3) {
        self.0.fixed_rows_mut::<3>(offset).copy_from(v);
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Symmetric positive-semidefinite covariance over the error state.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance(pub DMatrix<f64>);

impl Covariance {
    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn symmetrize(&mut self) {
        let n = self.0.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let m = 0.5 * (self.0[(i, j)] + self.0[(j, i)]);
                self.0[(i, j)] = m;
                self.0[(j, i)] = m;
            }
        }
    }

    pub fn asymmetry(&self) -> f64 {
        (&self.0 - self.0.transpose()).amax()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.0
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn set_block_diag(&mut self, offset: usize, variances: &[f64]) {
        for (k, v) in variances.iter().enumerate() {
            self.0[(offset + k, offset + k)] = *v;
        }
    }

    /// Zeroes rows and columns `[offset, offset + len)`.
    pub fn clear_block(&mut self, offset: usize, len: usize) {
        let n = self.dim();
        for k in offset..offset + len {
            for j in 0..n {
                self.0[(k, j)] = 0.0;
                self.0[(j, k)] = 0.0;
            }
        }
    }

    pub fn block(&self, offset: usize, len: usize) -> DMatrix<f64> {
        self.0.view((offset, offset), (len, len)).into_owned()
    }
}

fn rot_plus(q: &Quat, d: &Vec3) -> Quat {
    so3_exp(d) * q
}

fn rot_minus(a: &Quat, b: &Quat) -> Vec3 {
    so3_log(&(a * b.inverse()))
}

pub fn boxplus(state: &FullState, delta: &ErrorState) -> Result<FullState> {
    if delta.dim() != state.error_dim() {
        return Err(Error::DimensionMismatch {
            expected: state.error_dim(),
            got: delta.dim(),
        });
    }
    let mut x = state.clone();
    x.r_ib_b += delta.block3(POS);
    x.v_ib_b += delta.block3(VEL);
    x.q_b_i = rot_plus(&state.q_b_i, &delta.block3(ATT));
    x.b_a += delta.block3(BA);
    x.b_g += delta.block3(BG);
    x.r_bc_b += delta.block3(R_BC);
    x.q_b_c = rot_plus(&state.q_b_c, &delta.block3(Q_BC));
    x.r_br_b += delta.block3(R_BR);
    x.q_b_r = rot_plus(&state.q_b_r, &delta.block3(Q_BR));
    for (i, f) in x.features.iter_mut().enumerate() {
        let o = feature_offset(i);
        let d = Vector2::new(delta.0[o], delta.0[o + 1]);
        f.bearing = bearing_boxplus(&f.bearing, &d);
        f.inv_depth += delta.0[o + 2];
    }
    Ok(x)
}

/// `x1 ⊟ x2`: the error state that moves `x2` onto `x1`.
pub fn boxminus(x1: &FullState, x2: &FullState) -> Result<ErrorState> {
    if !x1.same_slots(x2) {
        return Err(Error::FeatureSlotMismatch);
    }
    let mut d = ErrorState::zeros(x2.error_dim());
    d.set_block3(POS, &(x1.r_ib_b - x2.r_ib_b));
    d.set_block3(VEL, &(x1.v_ib_b - x2.v_ib_b));
    d.set_block3(ATT, &rot_minus(&x1.q_b_i, &x2.q_b_i));
    d.set_block3(BA, &(x1.b_a - x2.b_a));
    d.set_block3(BG, &(x1.b_g - x2.b_g));
    d.set_block3(R_BC, &(x1.r_bc_b - x2.r_bc_b));
    d.set_block3(Q_BC, &rot_minus(&x1.q_b_c, &x2.q_b_c));
    d.set_block3(R_BR, &(x1.r_br_b - x2.r_br_b));
    d.set_block3(Q_BR, &rot_minus(&x1.q_b_r, &x2.q_b_r));
    for (i, (a, b)) in x1.features.iter().zip(&x2.features).enumerate() {
        let o = feature_offset(i);
        let t = bearing_boxminus(&a.bearing, &b.bearing);
        d.0[o] = t.x;
        d.0[o + 1] = t.y;
        d.0[o + 2] = a.inv_depth - b.inv_depth;
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub enabled: bool,
    pub confidence: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            confidence: 0.95,
        }
    }
}

/// Chi-squared quantile `F⁻¹(confidence; dof)`.
pub fn chi2_threshold(confidence: f64, dof: usize) -> f64 {
    ChiSquared::new(dof as f64)
        .expect("dof > 0")
        .inverse_cdf(confidence)
}

/// Mahalanobis test of an innovation. Returns the squared distance and
/// whether it is accepted. A non positive-definite `innovation_cov` is an
/// error.
pub fn chi2_test(
    innovation: &DVector<f64>,
    innovation_cov: &DMatrix<f64>,
    dof: usize,
    confidence: f64,
) -> Result<(f64, bool)> {
    let chol = innovation_cov
        .clone()
        .cholesky()
        .ok_or(Error::SingularInnovation)?;
    let m = innovation.dot(&chol.solve(innovation));
    if !m.is_finite() {
        return Err(Error::SingularInnovation);
    }
    Ok((m, m <= chi2_threshold(confidence, dof)))
}

/// Boolean form of [`chi2_test`]; a non-PD covariance rejects.
pub fn chi2_gate(
    innovation: &DVector<f64>,
    innovation_cov: &DMatrix<f64>,
    dof: usize,
    confidence: f64,
) -> bool {
    matches!(chi2_test(innovation, innovation_cov, dof, confidence), Ok((_, true)))
}

/// A measurement linearizable around any iterate.
///
/// `residual` must vanish when the state explains the measurement exactly;
/// `jacobian` is its derivative with respect to the error state.
pub trait Measurement {
    fn dim(&self) -> usize;
    fn residual(&self, x: &FullState) -> DVector<f64>;
    fn jacobian(&self, x: &FullState) -> DMatrix<f64>;
}

/// Adapts a pair of closures to [`Measurement`].
pub struct FnMeasurement<R, J> {
    pub dim: usize,
    pub residual: R,
    pub jacobian: J,
}

impl<R, J> Measurement for FnMeasurement<R, J>
where
    R: Fn(&FullState) -> DVector<f64>,
    J: Fn(&FullState) -> DMatrix<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn residual(&self, x: &FullState) -> DVector<f64> {
        (self.residual)(x)
    }
    fn jacobian(&self, x: &FullState) -> DMatrix<f64> {
        (self.jacobian)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IekfConfig {
    pub max_iterations: usize,
    pub step_tolerance: f64,
}

impl Default for IekfConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            step_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOutcome {
    pub accepted: bool,
    /// Squared Mahalanobis distance at the prior.
    pub mahalanobis: f64,
    pub iterations: usize,
}

/// Iterated EKF update on the manifold.
///
/// Each iterate `x_j` solves the Gauss-Newton normal equations of the
/// measurement and prior terms linearized at `x_j`:
/// `δ = K (−r(x_j) + H (x_j ⊟ x_0))`, `x_{j+1} = x_0 ⊞ δ`. Gating is done at
/// the prior; the covariance is updated once, at the last linearization
/// point, with the Joseph form. On rejection `state` and `cov` are untouched.
pub fn iekf_update<M: Measurement + ?Sized>(
    state: &mut FullState,
    cov: &mut Covariance,
    model: &M,
    noise: &DMatrix<f64>,
    gate: &GateConfig,
    cfg: &IekfConfig,
) -> Result<UpdateOutcome> {
    let n = state.error_dim();
    if cov.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: cov.dim(),
        });
    }
    let m = model.dim();
    let p = &cov.0;

    let prior = state.clone();
    let mut iterate = prior.clone();
    let mut offset = DVector::<f64>::zeros(n); // iterate ⊟ prior
    let mut mahalanobis = 0.0;
    let mut last: Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = None;
    let mut iterations = 0;

    for j in 0..cfg.max_iterations.max(1) {
        let r = model.residual(&iterate);
        let h = model.jacobian(&iterate);
        if r.len() != m || h.nrows() != m || h.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: r.len(),
            });
        }
        let pht = p * h.transpose();
        let s = &h * &pht + noise;
        let chol = s.clone().cholesky().ok_or(Error::SingularInnovation)?;
        if j == 0 {
            mahalanobis = r.dot(&chol.solve(&r));
            if !mahalanobis.is_finite() {
                return Err(Error::SingularInnovation);
            }
            if gate.enabled && mahalanobis > chi2_threshold(gate.confidence, m) {
                return Ok(UpdateOutcome {
                    accepted: false,
                    mahalanobis,
                    iterations: 0,
                });
            }
        }
        // K = P Hᵀ S⁻¹
        let k = chol.solve(&pht.transpose()).transpose();
        let delta = &k * (-&r + &h * &offset);
        let step = (&delta - &offset).norm();
        iterate = boxplus(&prior, &ErrorState(delta.clone()))?;
        offset = delta;
        iterations = j + 1;
        last = Some((k, h, s));
        if step < cfg.step_tolerance {
            break;
        }
    }

    let (k, h, s) = last.expect("at least one iteration");
    // Joseph form (I − KH) P (I − KH)ᵀ + K R Kᵀ, expanded as
    // P − K (PHᵀ)ᵀ − (PHᵀ) Kᵀ + K S Kᵀ.
    let pht = p * h.transpose();
    let kpht = &k * pht.transpose();
    let mut updated = p - &kpht - kpht.transpose() + &k * s * k.transpose();
    drop(h);
    std::mem::swap(&mut cov.0, &mut updated);
    cov.symmetrize();

    iterate.clamp_inverse_depths();
    *state = iterate;
    Ok(UpdateOutcome {
        accepted: true,
        mahalanobis,
        iterations,
    })
}

/// Appends a feature with a diagonal prior and no cross-covariance.
/// Returns the slot index of the new feature.
pub fn feature_slot_add(
    state: &mut FullState,
    cov: &mut Covariance,
    id: u64,
    bearing: BearingVector,
    inv_depth: f64,
    sigma_bearing: f64,
    sigma_inv_depth: f64,
) -> Result<usize> {
    if state.features.len() >= state.capacity {
        return Err(Error::NoFreeSlot(state.capacity));
    }
    if state.feature_index(id).is_some() {
        return Err(Error::DuplicateFeature(id));
    }
    let n = state.error_dim();
    let mut grown = DMatrix::zeros(n + FEATURE_DIM, n + FEATURE_DIM);
    grown.view_mut((0, 0), (n, n)).copy_from(&cov.0);
    grown[(n, n)] = sigma_bearing * sigma_bearing;
    grown[(n + 1, n + 1)] = sigma_bearing * sigma_bearing;
    grown[(n + 2, n + 2)] = sigma_inv_depth * sigma_inv_depth;
    cov.0 = grown;
    state.features.push(FeatureSlot {
        id,
        bearing,
        inv_depth: inv_depth.max(RHO_MIN),
        misses: 0,
    });
    Ok(state.features.len() - 1)
}

/// Drops a feature and its rows/columns from the covariance.
pub fn feature_slot_remove(state: &mut FullState, cov: &mut Covariance, id: u64) -> Result<()> {
    let index = state.feature_index(id).ok_or(Error::UnknownFeature(id))?;
    let o = feature_offset(index);
    cov.0 = std::mem::take(&mut cov.0)
        .remove_rows(o, FEATURE_DIM)
        .remove_columns(o, FEATURE_DIM);
    state.features.remove(index);
    Ok(())
}
