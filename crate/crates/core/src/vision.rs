//! Feature tracks: bearing updates, lifecycle and depth initialization.

use log::debug;
use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{
    feature_offset, feature_slot_add, feature_slot_remove, iekf_update, Covariance, FnMeasurement, FullState,
    GateConfig, IekfConfig, RHO_MIN,
};
use crate::geometry::{pinhole_project, tangent_basis, tangent_basis_derivative, BearingVector, CameraIntrinsics};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureObservation {
    pub t: f64,
    pub track_id: u64,
    pub bearing_obs: BearingVector,
    pub patch_halfsize_px: f64,
}

impl FeatureObservation {
    /// Builds an observation from a pixel measurement.
    pub fn from_pixel(t: f64, track_id: u64, u: f64, v: f64, patch_halfsize_px: f64, intr: &CameraIntrinsics) -> Self {
        Self {
            t,
            track_id,
            bearing_obs: intr.unproject(u, v),
            patch_halfsize_px,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrame {
    pub t: f64,
    pub observations: Vec<FeatureObservation>,
    pub intrinsics: CameraIntrinsics,
}

impl FeatureFrame {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let mut ids: Vec<u64> = self.observations.iter().map(|o| o.track_id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig(format!("track id {} repeated in frame at t = {}", w[0], self.t)));
        }
        if self.observations.iter().any(|o| !(o.patch_halfsize_px > 0.0)) {
            return Err(Error::InvalidConfig("patch half-size must be positive".into()));
        }
        Ok(())
    }
}

/// Tracker output in pixels, as stored in datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelObservation {
    pub id: u64,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelFrame {
    pub t: f64,
    pub intrinsics: CameraIntrinsics,
    pub obs: Vec<PixelObservation>,
}

impl PixelFrame {
    pub fn to_feature_frame(&self, patch_halfsize_px: f64) -> FeatureFrame {
        FeatureFrame {
            t: self.t,
            observations: self
                .obs
                .iter()
                .map(|o| FeatureObservation::from_pixel(self.t, o.id, o.u, o.v, patch_halfsize_px, &self.intrinsics))
                .collect(),
            intrinsics: self.intrinsics,
        }
    }
}

/// Range support from the radar map for a new feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthHint {
    pub range_mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    /// Bearing noise in pixels, converted through the focal length.
    pub sigma_px: f64,
    pub max_misses: u32,
    pub d_default: f64,
    /// Range standard deviation attributed to a radar hint [m].
    pub hint_range_sigma: f64,
    pub gate: GateConfig,
    pub iekf: IekfConfig,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            sigma_px: 1.0,
            max_misses: 3,
            d_default: 5.0,
            hint_range_sigma: 0.25,
            gate: GateConfig::default(),
            iekf: IekfConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VisionStats {
    pub updated: usize,
    pub rejected: usize,
    pub failed: usize,
    pub removed: Vec<u64>,
    pub initialized: Vec<u64>,
    /// Tracks started from a radar depth hint.
    pub radar_initialized: Vec<u64>,
    /// New tracks dropped for lack of a free slot.
    pub dropped: usize,
}

pub fn bearing_sigma(intr: &CameraIntrinsics, sigma_px: f64) -> f64 {
    sigma_px / (0.5 * (intr.fx + intr.fy))
}

/// `N(μ̂)ᵀ (μ_obs − μ̂)`.
pub fn bearing_residual(state: &FullState, slot: usize, obs: &FeatureObservation) -> Vector2<f64> {
    let mu = &state.features[slot].bearing;
    tangent_basis(mu).transpose() * (obs.bearing_obs.as_vec() - mu.as_vec())
}

/// Jacobian of [`bearing_residual`]: non-zero only on the tangent block of `slot`.
pub fn bearing_jacobian(state: &FullState, slot: usize, obs: &FeatureObservation) -> DMatrix<f64> {
    let mu = &state.features[slot].bearing;
    let n = tangent_basis(mu);
    let diff = obs.bearing_obs.as_vec() - mu.as_vec();
    let mut j = DMatrix::zeros(2, state.error_dim());
    let o = feature_offset(slot);
    for k in 0..2 {
        let dir = n.column(k).into_owned();
        let col = tangent_basis_derivative(mu, &dir).transpose() * diff;
        j[(0, o + k)] = col.x;
        j[(1, o + k)] = col.y;
        j[(k, o + k)] -= 1.0;
    }
    j
}

/// Median of active feature depths, `d_default` when there are none.
pub fn median_depth(state: &FullState, d_default: f64) -> f64 {
    let mut depths: Vec<f64> = state
        .features
        .iter()
        .filter(|f| f.inv_depth > RHO_MIN)
        .map(|f| 1.0 / f.inv_depth)
        .collect();
    if depths.is_empty() {
        return d_default;
    }
    depths.sort_by(f64::total_cmp);
    let m = depths.len();
    if m % 2 == 1 {
        depths[m / 2]
    } else {
        0.5 * (depths[m / 2 - 1] + depths[m / 2])
    }
}

/// Adds a feature for `obs`, using the radar hint when there is one.
pub fn initialize_feature(
    state: &mut FullState,
    cov: &mut Covariance,
    obs: &FeatureObservation,
    depth_hint: Option<DepthHint>,
    sigma_bearing: f64,
    cfg: &VisionConfig,
) -> Result<usize> {
    let (rho, sigma_rho) = match depth_hint {
        Some(h) if h.range_mean > 0.0 => {
            let rho = 1.0 / h.range_mean;
            (rho, rho * rho * cfg.hint_range_sigma)
        }
        _ => {
            let rho = 1.0 / median_depth(state, cfg.d_default);
            (rho, rho)
        }
    };
    feature_slot_add(state, cov, obs.track_id, obs.bearing_obs, rho, sigma_bearing, sigma_rho)
}

/// Updates matched features, retires stale ones and starts new tracks.
///
/// `depth_hint` is consulted once per new track, in track id order.
pub fn vision_frame_update<H>(
    state: &mut FullState,
    cov: &mut Covariance,
    frame: &FeatureFrame,
    cfg: &VisionConfig,
    mut depth_hint: H,
) -> Result<VisionStats>
where
    H: FnMut(&FullState, &FeatureObservation) -> Option<DepthHint>,
{
    frame.validate()?;
    let mut stats = VisionStats::default();
    let sigma = bearing_sigma(&frame.intrinsics, cfg.sigma_px);
    let noise = DMatrix::identity(2, 2) * (sigma * sigma);

    let ids: Vec<u64> = state.features.iter().map(|f| f.id).collect();
    for id in ids {
        let obs = frame.observations.iter().find(|o| o.track_id == id);
        let mut seen = false;
        if let Some(obs) = obs {
            let model = FnMeasurement {
                dim: 2,
                residual: |x: &FullState| {
                    let slot = x.feature_index(id).expect("active slot");
                    DVector::from_column_slice(bearing_residual(x, slot, obs).as_slice())
                },
                jacobian: |x: &FullState| bearing_jacobian(x, x.feature_index(id).expect("active slot"), obs),
            };
            match iekf_update(state, cov, &model, &noise, &cfg.gate, &cfg.iekf) {
                Ok(o) if o.accepted => {
                    stats.updated += 1;
                    seen = true;
                }
                Ok(_) => stats.rejected += 1,
                Err(e) => {
                    debug!("feature {id} update failed: {e}");
                    stats.failed += 1;
                }
            }
        }
        let slot = state.feature_index(id).expect("active slot");
        let f = &mut state.features[slot];
        if seen {
            f.misses = 0;
        } else {
            f.misses += 1;
        }
    }

    let stale: Vec<u64> = state
        .features
        .iter()
        .filter(|f| f.misses > cfg.max_misses)
        .map(|f| f.id)
        .collect();
    for id in stale {
        feature_slot_remove(state, cov, id)?;
        stats.removed.push(id);
    }

    let mut fresh: Vec<&FeatureObservation> = frame
        .observations
        .iter()
        .filter(|o| state.feature_index(o.track_id).is_none() && !stats.removed.contains(&o.track_id))
        .collect();
    fresh.sort_by_key(|o| o.track_id);
    for obs in fresh {
        if state.features.len() >= state.capacity {
            stats.dropped += 1;
            continue;
        }
        let hint = depth_hint(state, obs);
        initialize_feature(state, cov, obs, hint, sigma, cfg)?;
        stats.initialized.push(obs.track_id);
        if hint.is_some() {
            stats.radar_initialized.push(obs.track_id);
        }
    }
    Ok(stats)
}

/// Pixel location of an observation, when it projects into the image.
pub fn observation_pixel(obs: &FeatureObservation, intr: &CameraIntrinsics) -> Option<Vector2<f64>> {
    pinhole_project(obs.bearing_obs.as_vec(), intr)
}
