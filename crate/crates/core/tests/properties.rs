mod common;

use common::random_state;
use nalgebra::{Isometry3, Vector2};
use proptest::prelude::*;
use rvio::filter::{boxminus, boxplus, feature_slot_add, feature_slot_remove, Covariance, ErrorState};
use rvio::geometry::{bearing_boxminus, bearing_boxplus, so3_exp, so3_log, BearingVector, Vec3};
use rvio::geometry::CameraIntrinsics;
use rvio::voxel_map::{VoxelMap, VoxelMapConfig};

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

proptest! {
    #[test]
    fn so3_log_inverts_exp(phi in vec3(3.0)) {
        prop_assume!(phi.norm() < 3.1);
        prop_assert!((so3_log(&so3_exp(&phi)) - phi).norm() < 1e-9);
    }

    #[test]
    fn bearing_boxminus_inverts_boxplus(v in vec3(1.0), dx in -0.5..0.5f64, dy in -0.5..0.5f64) {
        prop_assume!(v.norm() > 0.1);
        let mu = BearingVector::new(v).unwrap();
        let d = Vector2::new(dx, dy);
        let back = bearing_boxminus(&bearing_boxplus(&mu, &d), &mu);
        prop_assert!((back - d).norm() < 1e-9);
    }

    #[test]
    fn state_boxminus_inverts_boxplus(seed in 0u64..10_000, scale in 1e-4..0.5f64, k in 0usize..4) {
        let x = random_state(seed, k);
        let n = x.error_dim();
        let mut d = ErrorState::zeros(n);
        for i in 0..n {
            d.0[i] = scale * (((i as u64 * 7919 + seed) % 1000) as f64 / 500.0 - 1.0);
        }
        let y = boxplus(&x, &d).unwrap();
        prop_assert!((boxminus(&y, &x).unwrap().0 - &d.0).amax() < 1e-8);
    }

    #[test]
    fn slot_add_remove_keeps_covariance_shape(seed in 0u64..10_000, k in 0usize..5) {
        let mut x = random_state(seed, k);
        let n = x.error_dim();
        let mut p = Covariance(nalgebra::DMatrix::identity(n, n));
        let slot = x.features.first().cloned();
        if let Some(s) = slot {
            feature_slot_remove(&mut x, &mut p, s.id).unwrap();
            prop_assert_eq!(p.dim(), x.error_dim());
            feature_slot_add(&mut x, &mut p, s.id, s.bearing, s.inv_depth, 0.01, 0.1).unwrap();
        }
        prop_assert_eq!(p.dim(), x.error_dim());
        prop_assert!(p.asymmetry() < 1e-12);
    }

    #[test]
    fn voxel_map_invariants_survive_queries(
        pts in prop::collection::vec(vec3(4.0), 1..200),
        u in 0.0..640.0f64,
        v in 0.0..480.0f64,
        half in 1.0..80.0f64,
    ) {
        let mut map = VoxelMap::new(VoxelMapConfig::default()).unwrap();
        let shifted: Vec<Vec3> = pts.iter().map(|p| p + Vec3::z() * 5.0).collect();
        map.insert_points(&shifted, 0.0);
        prop_assert!(map.invariants_hold());
        let before = map.len();
        let k = CameraIntrinsics::new(400.0, 400.0, 320.0, 240.0, 640, 480).unwrap();
        let q = map.query_feature_depth(&Isometry3::identity(), &k, &Vector2::new(u, v), half);
        prop_assert!(map.invariants_hold());
        prop_assert_eq!(map.len() + q.erased.len(), before);
        if let Some(h) = q.hint {
            prop_assert!(h.count >= VoxelMapConfig::default().kappa_n_min && h.range_mean > 0.0);
        }
    }
}
