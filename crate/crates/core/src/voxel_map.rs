//! Sliding-window voxel map of radar points for feature depth queries.

use std::collections::BTreeMap;

use nalgebra::{Isometry3, Point3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pinhole_project, CameraIntrinsics, Vec3};
use crate::vision::DepthHint;

pub type VoxelIndex = [i64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelMapConfig {
    pub voxel_size: f64,
    pub kappa_d_max: f64,
    pub kappa_delta_d: f64,
    pub kappa_n_max: usize,
    pub kappa_n_min: usize,
    pub window_duration: f64,
}

impl Default for VoxelMapConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.25,
            kappa_d_max: 20.0,
            kappa_delta_d: 0.05,
            kappa_n_max: 20,
            kappa_n_min: 5,
            window_duration: 10.0,
        }
    }
}

impl VoxelMapConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.voxel_size, self.kappa_d_max, self.kappa_delta_d, self.window_duration];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.kappa_n_min == 0 {
            return Err(Error::InvalidConfig("voxel map parameters must be positive".into()));
        }
        if self.kappa_n_min > self.kappa_n_max {
            return Err(Error::InvalidConfig("kappa_n_min exceeds kappa_n_max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub p: Vec3,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Voxel {
    pub index: VoxelIndex,
    pub points: Vec<MapPoint>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DepthQuery {
    pub hint: Option<DepthHint>,
    pub erased: Vec<VoxelIndex>,
}

/// Voxels keyed in lexicographic index order, which makes every traversal
/// deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMap {
    pub cfg: VoxelMapConfig,
    voxels: BTreeMap<VoxelIndex, Voxel>,
}

impl VoxelMap {
    pub fn new(cfg: VoxelMapConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            voxels: BTreeMap::new(),
        })
    }

    pub fn voxel_index(&self, p: &Vec3) -> VoxelIndex {
        let s = self.cfg.voxel_size;
        [(p.x / s).floor() as i64, (p.y / s).floor() as i64, (p.z / s).floor() as i64]
    }

    pub fn voxel_min_corner(&self, index: &VoxelIndex) -> Vec3 {
        let s = self.cfg.voxel_size;
        Vec3::new(index[0] as f64 * s, index[1] as f64 * s, index[2] as f64 * s)
    }

    pub fn voxel_center(&self, index: &VoxelIndex) -> Vec3 {
        self.voxel_min_corner(index) + Vec3::repeat(0.5 * self.cfg.voxel_size)
    }

    pub fn voxel_corners(&self, index: &VoxelIndex) -> [Vec3; 8] {
        let lo = self.voxel_min_corner(index);
        let s = self.cfg.voxel_size;
        std::array::from_fn(|k| lo + Vec3::new((k & 1) as f64 * s, ((k >> 1) & 1) as f64 * s, ((k >> 2) & 1) as f64 * s))
    }

    pub fn voxels(&self) -> impl Iterator<Item = &Voxel> {
        self.voxels.values()
    }

    pub fn get(&self, index: &VoxelIndex) -> Option<&Voxel> {
        self.voxels.get(index)
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn point_count(&self) -> usize {
        self.voxels.values().map(|v| v.points.len()).sum()
    }

    /// Inserts map-frame points observed at `t`. Returns how many were kept.
    pub fn insert_points(&mut self, points: &[Vec3], t: f64) -> usize {
        let mut kept = 0;
        for p in points {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                continue;
            }
            let index = self.voxel_index(p);
            let voxel = self.voxels.entry(index).or_insert_with(|| Voxel {
                index,
                points: Vec::new(),
            });
            if voxel.points.len() >= self.cfg.kappa_n_max {
                continue;
            }
            let min_sq = self.cfg.kappa_delta_d * self.cfg.kappa_delta_d;
            if voxel.points.iter().any(|q| (q.p - p).norm_squared() < min_sq) {
                continue;
            }
            voxel.points.push(MapPoint { p: *p, t });
            kept += 1;
        }
        self.voxels.retain(|_, v| !v.points.is_empty());
        kept
    }

    /// Distance from `p` to the nearest point of the voxel's box.
    pub fn box_distance(&self, index: &VoxelIndex, p: &Vec3) -> f64 {
        let lo = self.voxel_min_corner(index);
        let hi = lo + Vec3::repeat(self.cfg.voxel_size);
        let nearest = Vec3::new(p.x.clamp(lo.x, hi.x), p.y.clamp(lo.y, hi.y), p.z.clamp(lo.z, hi.z));
        (nearest - p).norm()
    }

    pub fn prune(&mut self, sensor_position: &Vec3, t_now: f64) {
        let window = self.cfg.window_duration;
        let d_max = self.cfg.kappa_d_max;
        let far: Vec<VoxelIndex> = self
            .voxels
            .keys()
            .filter(|k| self.box_distance(k, sensor_position) > d_max)
            .copied()
            .collect();
        for k in far {
            self.voxels.remove(&k);
        }
        for v in self.voxels.values_mut() {
            v.points.retain(|q| t_now - q.t <= window);
        }
        self.voxels.retain(|_, v| !v.points.is_empty());
    }

    /// Depth support for a feature patch, erasing voxels it deems occluded.
    ///
    /// `camera_pose` maps camera-frame points into the map frame.
    pub fn query_feature_depth(
        &mut self,
        camera_pose: &Isometry3<f64>,
        intr: &CameraIntrinsics,
        patch_center: &Vector2<f64>,
        patch_halfsize: f64,
    ) -> DepthQuery {
        let to_cam = camera_pose.inverse();
        let inside = |px: &Vector2<f64>| {
            (px.x - patch_center.x).abs() <= patch_halfsize && (px.y - patch_center.y).abs() <= patch_halfsize
        };
        // (index, mean range, count)
        let mut candidates: Vec<(VoxelIndex, f64, usize)> = Vec::new();
        for (index, voxel) in &self.voxels {
            let center = to_cam * Point3::from(self.voxel_center(index));
            if center.z <= 0.0 {
                continue;
            }
            let hit = self.voxel_corners(index).iter().any(|c| {
                let pc = to_cam * Point3::from(*c);
                pinhole_project(&pc.coords, intr).is_some_and(|px| inside(&px))
            });
            if !hit {
                continue;
            }
            let mean = voxel
                .points
                .iter()
                .map(|q| (to_cam * Point3::from(q.p)).coords.norm())
                .sum::<f64>()
                / voxel.points.len() as f64;
            candidates.push((*index, mean, voxel.points.len()));
        }
        let mut best: Option<(f64, usize)> = None;
        for (_, mean, count) in &candidates {
            if *count >= self.cfg.kappa_n_min && best.is_none_or(|(m, _)| *mean < m) {
                best = Some((*mean, *count));
            }
        }
        let Some((range_mean, count)) = best else {
            return DepthQuery::default();
        };
        let limit = range_mean + self.cfg.voxel_size;
        let erased: Vec<VoxelIndex> = candidates
            .iter()
            .filter(|(_, mean, _)| *mean >= limit)
            .map(|(k, _, _)| *k)
            .collect();
        for k in &erased {
            self.voxels.remove(k);
        }
        DepthQuery {
            hint: Some(DepthHint { range_mean, count }),
            erased,
        }
    }

    /// Checks spacing, capacity and index consistency of every voxel.
    pub fn invariants_hold(&self) -> bool {
        let min_sq = self.cfg.kappa_delta_d * self.cfg.kappa_delta_d;
        self.voxels.iter().all(|(k, v)| {
            v.index == *k
                && !v.points.is_empty()
                && v.points.len() <= self.cfg.kappa_n_max
                && v.points.iter().all(|q| self.voxel_index(&q.p) == *k)
                && v.points.iter().enumerate().all(|(i, a)| {
                    v.points[i + 1..].iter().all(|b| (a.p - b.p).norm_squared() >= min_sq)
                })
        })
    }
}
