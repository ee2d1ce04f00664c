//! Pinhole projection, PnP pose estimation and pose-error metrics.

mod pnp;
mod ransac;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Bbox3, CameraIntrinsics, PointId};
use crate::pose::Pose;

pub use pnp::{
    perturb_pose, refine_pose, reprojection_jacobian, reprojection_residuals, solve_pnp_linear,
    total_squared_reprojection_error, DEGENERACY_TOLERANCE, LINEAR_MIN_CORRESPONDENCES,
};
pub use ransac::{ransac_pnp, PoseEstimate};

/// Depth at or below which a point counts as behind the camera.
pub const CHIRALITY_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("too few correspondences: need {needed}, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("degenerate point configuration (conditioning {conditioning:e})")]
    Degenerate { conditioning: f64 },
    #[error("invalid estimator config: {0}")]
    InvalidConfig(String),
}

/// A 2D-3D match between a query pixel and a model point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pixel: Vector2<f64>,
    pub point_id: PointId,
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub ransac_max_iterations: usize,
    pub ransac_inlier_threshold_px: f64,
    pub ransac_confidence: f64,
    pub min_correspondences: usize,
    pub refine_max_iterations: usize,
    pub rng_seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            ransac_max_iterations: 1000,
            ransac_inlier_threshold_px: 3.0,
            ransac_confidence: 0.999,
            min_correspondences: 6,
            refine_max_iterations: 50,
            rng_seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.ransac_inlier_threshold_px.is_nan() || self.ransac_inlier_threshold_px <= 0.0 {
            return Err(GeometryError::InvalidConfig(
                "ransac_inlier_threshold_px must be > 0".into(),
            ));
        }
        if self.min_correspondences < 4 {
            return Err(GeometryError::InvalidConfig("min_correspondences must be >= 4".into()));
        }
        if !(self.ransac_confidence > 0.0 && self.ransac_confidence < 1.0) {
            return Err(GeometryError::InvalidConfig(
                "ransac_confidence must lie in (0, 1)".into(),
            ));
        }
        if self.ransac_max_iterations == 0 {
            return Err(GeometryError::InvalidConfig(
                "ransac_max_iterations must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Projects a model point to pixels; `None` when it is not in front of the camera.
pub fn project(camera: &CameraIntrinsics, pose: &Pose, point: &Vector3<f64>) -> Option<Vector2<f64>> {
    let p = pose.transform(point);
    (p.z > CHIRALITY_EPSILON)
        .then(|| Vector2::new(camera.fx * p.x / p.z + camera.cx, camera.fy * p.y / p.z + camera.cy))
}

/// Euclidean distance between true and estimated translations.
pub fn loc_error(t_gt: &Vector3<f64>, t_hat: &Vector3<f64>) -> f64 {
    (t_gt - t_hat).norm()
}

/// Rotation angle of `R_gtᵀ · R_hat`, in radians within `[0, π]`.
///
/// The angle is `arccos((trace − 1) / 2)`. It is evaluated as
/// `atan2(sin, cos)` with the cosine term clamped to `[−1, 1]` and the sine
/// taken from the skew part, which keeps full precision near 0 and π.
pub fn geodesic_error(r_gt: &Matrix3<f64>, r_hat: &Matrix3<f64>) -> f64 {
    let delta = r_gt.transpose() * r_hat;
    let cos = ((delta.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let skew = Vector3::new(
        delta[(2, 1)] - delta[(1, 2)],
        delta[(0, 2)] - delta[(2, 0)],
        delta[(1, 0)] - delta[(0, 1)],
    );
    let sin = (skew.norm() / 2.0).min(1.0);
    sin.atan2(cos)
}

/// Mean displacement of the eight box corners between the two poses, divided by
/// the box diagonal.
pub fn bbox_add_error(pose_gt: &Pose, pose_hat: &Pose, bbox: &Bbox3) -> f64 {
    let dr = pose_gt.rotation() - pose_hat.rotation();
    let dt = pose_gt.translation() - pose_hat.translation();
    let corners = bbox.corners();
    let total: f64 = corners.iter().map(|c| (dr * c + dt).norm()).sum();
    total / corners.len() as f64 / bbox.diagonal()
}

/// Translation error divided by the box diagonal (the alternative edge criterion).
pub fn translation_error_ratio(pose_gt: &Pose, pose_hat: &Pose, bbox: &Bbox3) -> f64 {
    loc_error(pose_gt.translation(), pose_hat.translation()) / bbox.diagonal()
}


#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn project_examples() {
        let cam = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let id = Pose::identity();
        assert_eq!(
            project(&cam, &id, &Vector3::new(0.0, 0.0, 1.0)),
            Some(Vector2::new(50.0, 50.0))
        );
        let cam0 = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0, 100, 100).unwrap();
        assert_eq!(
            project(&cam0, &id, &Vector3::new(1.0, 0.0, 2.0)),
            Some(Vector2::new(50.0, 0.0))
        );
        assert_eq!(project(&cam, &id, &Vector3::new(0.0, 0.0, -1.0)), None);
        assert_eq!(project(&cam, &id, &Vector3::new(0.0, 0.0, 0.0)), None);
    }

    #[test]
    fn loc_error_examples() {
        assert_eq!(loc_error(&Vector3::zeros(), &Vector3::new(3.0, 4.0, 0.0)), 5.0);
        assert_eq!(
            loc_error(&Vector3::new(1.0, 2.0, 3.0), &Vector3::new(1.0, 2.0, 3.0)),
            0.0
        );
        assert_relative_eq!(
            loc_error(&Vector3::repeat(1.0), &Vector3::repeat(2.0)),
            3f64.sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn geodesic_examples() {
        let r = *Rotation3::from_euler_angles(0.4, 0.2, -1.3).matrix();
        assert_eq!(geodesic_error(&r, &r), 0.0);
        let rz90 = *Rotation3::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2).matrix();
        assert_relative_eq!(geodesic_error(&r, &(r * rz90)), FRAC_PI_2, epsilon = 1e-12);
        for axis in [Vector3::x(), Vector3::new(1.0, -2.0, 0.5), Vector3::new(0.3, 0.3, 0.9)] {
            let flip = *Rotation3::from_axis_angle(&Unit::new_normalize(axis), PI).matrix();
            assert_relative_eq!(geodesic_error(&r, &(r * flip)), PI, epsilon = 1e-12);
        }
    }

    #[test]
    fn bbox_add_pure_translation() {
        let cube = Bbox3::new(Vector3::zeros(), Vector3::repeat(1.0)).unwrap();
        let gt = Pose::from_rotation(
            &Rotation3::from_euler_angles(0.1, 0.2, 0.3),
            Vector3::new(0.0, 0.0, 4.0),
        );
        assert_eq!(bbox_add_error(&gt, &gt, &cube), 0.0);
        let delta = 0.37;
        let hat = Pose::new(*gt.rotation(), gt.translation() + Vector3::new(delta, 0.0, 0.0)).unwrap();
        assert_relative_eq!(bbox_add_error(&gt, &hat, &cube), delta / 3f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(
            translation_error_ratio(&gt, &hat, &cube),
            delta / 3f64.sqrt(),
            epsilon = 1e-12
        );
    }

    /// Independent corner-by-corner evaluation.
    fn corner_sum_reference(gt: &Pose, hat: &Pose, bbox: &Bbox3) -> f64 {
        let mut sum = 0.0;
        for &x in &[bbox.min().x, bbox.max().x] {
            for &y in &[bbox.min().y, bbox.max().y] {
                for &z in &[bbox.min().z, bbox.max().z] {
                    let c = Vector3::new(x, y, z);
                    sum += (gt.transform(&c) - hat.transform(&c)).norm();
                }
            }
        }
        sum / 8.0 / (bbox.max() - bbox.min()).norm()
    }

    #[test]
    fn bbox_add_small_rotation_about_center() {
        let bbox = Bbox3::new(Vector3::new(-1.0, -0.5, 0.0), Vector3::new(1.0, 0.5, 2.0)).unwrap();
        let gt = Pose::from_rotation(&Rotation3::identity(), Vector3::new(0.0, 0.0, 5.0));
        // Rotate by theta about the z axis through the box center (0, 0, 1).
        let theta = 0.05;
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), theta);
        let center = bbox.center();
        let hat = Pose::from_rotation(&rot, gt.translation() + center - rot * center);
        let got = bbox_add_error(&gt, &hat, &bbox);
        assert_relative_eq!(got, corner_sum_reference(&gt, &hat, &bbox), epsilon = 1e-14);
        // Every corner sits at horizontal radius sqrt(1.25) from the axis.
        let expected = 2.0 * 1.25f64.sqrt() * (theta / 2.0).sin() / bbox.diagonal();
        assert_relative_eq!(got, expected, epsilon = 1e-14);
    }

    fn rotation_strategy() -> impl Strategy<Value = Rotation3<f64>> {
        (-PI..PI, -PI..PI, -PI..PI).prop_map(|(a, b, c)| Rotation3::from_euler_angles(a, b, c))
    }

    proptest! {
        #[test]
        fn geodesic_symmetric_and_left_invariant(a in rotation_strategy(), b in rotation_strategy(), c in rotation_strategy()) {
            let (a, b, c) = (*a.matrix(), *b.matrix(), *c.matrix());
            let ab = geodesic_error(&a, &b);
            prop_assert!((ab - geodesic_error(&b, &a)).abs() < 1e-12);
            prop_assert!((ab - geodesic_error(&(c * a), &(c * b))).abs() < 1e-9);
        }

        #[test]
        fn geodesic_stays_in_range_off_manifold(a in rotation_strategy(), noise in prop::array::uniform9(-1e-9f64..1e-9)) {
            let a = *a.matrix();
            let perturbed = a + Matrix3::from_row_slice(&noise);
            for (x, y) in [(a, perturbed), (perturbed, a), (perturbed, -perturbed)] {
                let e = geodesic_error(&x, &y);
                prop_assert!((0.0..=PI).contains(&e), "{e}");
            }
        }

        #[test]
        fn bbox_add_translation_identity(dx in -2.0..2.0f64, dy in -2.0..2.0f64, dz in -2.0..2.0f64, r in rotation_strategy()) {
            let bbox = Bbox3::new(Vector3::new(-0.3, 0.1, -2.0), Vector3::new(1.0, 0.4, 0.5)).unwrap();
            let gt = Pose::from_rotation(&r, Vector3::new(0.2, 0.1, 3.0));
            let d = Vector3::new(dx, dy, dz);
            let hat = Pose::new(*gt.rotation(), gt.translation() + d).unwrap();
            prop_assert!((bbox_add_error(&gt, &hat, &bbox) - d.norm() / bbox.diagonal()).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(EstimatorConfig::default().validate().is_ok());
        let bad = [
            EstimatorConfig {
                ransac_inlier_threshold_px: 0.0,
                ..Default::default()
            },
            EstimatorConfig {
                min_correspondences: 3,
                ..Default::default()
            },
            EstimatorConfig {
                ransac_confidence: 1.0,
                ..Default::default()
            },
        ];
        assert!(bad.iter().all(|c| c.validate().is_err()));
    }
}
