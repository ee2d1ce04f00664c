use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Matrix4, Matrix6, Rotation3, Vector2, Vector3, Vector6};

use super::{project, Correspondence, GeometryError};
use crate::model::CameraIntrinsics;
use crate::pose::{nearest_rotation, Pose};

/// The linear solver estimates the 11-dof projection matrix and needs six points.
pub const LINEAR_MIN_CORRESPONDENCES: usize = 6;

/// Relative gap between the two smallest singular values below which the
/// configuration is treated as degenerate (planar, collinear, ...).
pub const DEGENERACY_TOLERANCE: f64 = 1e-10;

const STEP_TOLERANCE: f64 = 1e-10;

/// Similarity normalization: translate to the centroid and scale the mean
/// distance to `target`.
fn normalization<const D: usize>(
    points: &[nalgebra::SVector<f64, D>],
    target: f64,
) -> (nalgebra::SVector<f64, D>, f64) {
    let n = points.len() as f64;
    let centroid = points
        .iter()
        .fold(nalgebra::SVector::<f64, D>::zeros(), |acc, p| acc + p)
        / n;
    let mean_dist = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    let scale = if mean_dist > 0.0 { target / mean_dist } else { 1.0 };
    (centroid, scale)
}

/// Direct linear transform on normalized coordinates, followed by projection of
/// the left 3×3 block onto SO(3).
pub fn solve_pnp_linear(correspondences: &[Correspondence], camera: &CameraIntrinsics) -> Result<Pose, GeometryError> {
    let n = correspondences.len();
    if n < LINEAR_MIN_CORRESPONDENCES {
        return Err(GeometryError::TooFewCorrespondences {
            needed: LINEAR_MIN_CORRESPONDENCES,
            got: n,
        });
    }
    let rays: Vec<Vector2<f64>> = correspondences
        .iter()
        .map(|c| Vector2::new((c.pixel.x - camera.cx) / camera.fx, (c.pixel.y - camera.cy) / camera.fy))
        .collect();
    let world: Vec<Vector3<f64>> = correspondences.iter().map(|c| c.position).collect();
    let (c2, s2) = normalization(&rays, std::f64::consts::SQRT_2);
    let (c3, s3) = normalization(&world, 3f64.sqrt());

    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (ray, x)) in rays.iter().zip(&world).enumerate() {
        let u = (ray - c2) * s2;
        let xn = (x - c3) * s3;
        let xh = [xn.x, xn.y, xn.z, 1.0];
        for k in 0..4 {
            a[(2 * i, k)] = xh[k];
            a[(2 * i, 8 + k)] = -u.x * xh[k];
            a[(2 * i + 1, 4 + k)] = xh[k];
            a[(2 * i + 1, 8 + k)] = -u.y * xh[k];
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let largest = svd.singular_values[order[order.len() - 1]];
    let conditioning = if largest > 0.0 {
        svd.singular_values[order[1]] / largest
    } else {
        0.0
    };
    if conditioning.is_nan() || conditioning < DEGENERACY_TOLERANCE {
        return Err(GeometryError::Degenerate { conditioning });
    }
    let h = v_t.row(order[0]);
    let p_norm = Matrix3x4::from_fn(|r, c| h[4 * r + c]);

    // Undo the normalizations: P = T2⁻¹ · P' · T3.
    let t3 = Matrix4::new(
        s3,
        0.0,
        0.0,
        -s3 * c3.x, //
        0.0,
        s3,
        0.0,
        -s3 * c3.y, //
        0.0,
        0.0,
        s3,
        -s3 * c3.z, //
        0.0,
        0.0,
        0.0,
        1.0,
    );
    let t2_inv = Matrix3::new(
        1.0 / s2,
        0.0,
        c2.x, //
        0.0,
        1.0 / s2,
        c2.y, //
        0.0,
        0.0,
        1.0,
    );
    let mut p = t2_inv * p_norm * t3;

    let in_front = world
        .iter()
        .filter(|x| p.row(2).dot(&x.push(1.0).transpose()) > 0.0)
        .count();
    if 2 * in_front < n {
        p = -p;
    }
    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into();
    let scale = m.svd(false, false).singular_values.sum() / 3.0;
    if !scale.is_finite() || scale <= 0.0 {
        return Err(GeometryError::Degenerate { conditioning });
    }
    let rotation = nearest_rotation(&m);
    let translation: Vector3<f64> = p.column(3) / scale;
    Ok(Pose::from_parts_orthonormalized(rotation, translation))
}

/// Stacked `(projected − observed)` residuals, two per correspondence. Points
/// behind the camera yield `NaN`.
pub fn reprojection_residuals(
    pose: &Pose,
    correspondences: &[Correspondence],
    camera: &CameraIntrinsics,
) -> DVector<f64> {
    let mut r = DVector::zeros(2 * correspondences.len());
    for (i, c) in correspondences.iter().enumerate() {
        let d = project(camera, pose, &c.position).map_or(Vector2::repeat(f64::NAN), |px| px - c.pixel);
        r[2 * i] = d.x;
        r[2 * i + 1] = d.y;
    }
    r
}

/// Sum of squared pixel residuals; infinite if any point is behind the camera.
pub fn total_squared_reprojection_error(
    pose: &Pose,
    correspondences: &[Correspondence],
    camera: &CameraIntrinsics,
) -> f64 {
    let mut total = 0.0;
    for c in correspondences {
        match project(camera, pose, &c.position) {
            Some(px) => total += (px - c.pixel).norm_squared(),
            None => return f64::INFINITY,
        }
    }
    total
}

/// Applies a local update `δ = (ω, ρ)`: `R ← exp(ω)·R`, `t ← t + ρ`.
pub fn perturb_pose(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let omega = Vector3::new(delta[0], delta[1], delta[2]);
    let rho = Vector3::new(delta[3], delta[4], delta[5]);
    let rotation = Rotation3::new(omega).matrix() * pose.rotation();
    Pose::from_parts_orthonormalized(rotation, pose.translation() + rho)
}

/// Analytic Jacobian of [`reprojection_residuals`] with respect to the update of
/// [`perturb_pose`], evaluated at `δ = 0`.
pub fn reprojection_jacobian(
    pose: &Pose,
    correspondences: &[Correspondence],
    camera: &CameraIntrinsics,
) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * correspondences.len(), 6);
    for (i, c) in correspondences.iter().enumerate() {
        let rx = pose.rotation() * c.position;
        let p = rx + pose.translation();
        let iz = 1.0 / p.z;
        // d(pixel)/d(p_cam)
        let du = Vector3::new(camera.fx * iz, 0.0, -camera.fx * p.x * iz * iz);
        let dv = Vector3::new(0.0, camera.fy * iz, -camera.fy * p.y * iz * iz);
        // d(p_cam)/dω = −[R·X]×; a row gradient g maps to (R·X) × g.
        let du_omega = rx.cross(&du);
        let dv_omega = rx.cross(&dv);
        for k in 0..3 {
            j[(2 * i, k)] = du_omega[k];
            j[(2 * i + 1, k)] = dv_omega[k];
            j[(2 * i, 3 + k)] = du[k];
            j[(2 * i + 1, 3 + k)] = dv[k];
        }
    }
    j
}

/// Levenberg–Marquardt minimization of the total squared reprojection error.
///
/// Never returns a pose with a higher error than `initial`. Stops when the
/// step norm drops below 1e-10, after `max_iterations` accepted steps, or
/// when no damping level yields an improvement.
pub fn refine_pose(
    initial: &Pose,
    inliers: &[Correspondence],
    camera: &CameraIntrinsics,
    max_iterations: usize,
) -> Pose {
    if inliers.len() < 4 {
        return *initial;
    }
    let mut pose = *initial;
    let mut cost = total_squared_reprojection_error(&pose, inliers, camera);
    if !cost.is_finite() {
        return *initial;
    }
    let mut lambda = 1e-3;
    for _ in 0..max_iterations {
        if cost == 0.0 {
            break;
        }
        let r = reprojection_residuals(&pose, inliers, camera);
        let jac = reprojection_jacobian(&pose, inliers, camera);
        let jt = jac.transpose();
        let h: Matrix6<f64> = (&jt * &jac).fixed_view::<6, 6>(0, 0).into();
        let g: Vector6<f64> = (&jt * &r).fixed_rows::<6>(0).into();

        let mut accepted = false;
        let mut converged = false;
        for _ in 0..12 {
            let mut damped = h;
            for k in 0..6 {
                damped[(k, k)] += lambda * (h[(k, k)] + 1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&-g)) else {
                lambda *= 10.0;
                continue;
            };
            if step.norm() < STEP_TOLERANCE {
                converged = true;
                break;
            }
            let candidate = perturb_pose(&pose, &step);
            let candidate_cost = total_squared_reprojection_error(&candidate, inliers, camera);
            if candidate_cost < cost {
                pose = candidate;
                cost = candidate_cost;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 10.0;
        }
        if converged || !accepted {
            break;
        }
    }
    pose
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::{geodesic_error, loc_error};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_pose_from_eight_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (truth, corrs) = random_scene(&mut rng, 8);
        let est = solve_pnp_linear(&corrs, &camera()).unwrap();
        assert!(geodesic_error(truth.rotation(), est.rotation()) < 1e-6);
        assert!(loc_error(truth.translation(), est.translation()) < 1e-8);
    }

    #[test]
    fn rejects_collinear_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (truth, _) = random_scene(&mut rng, 1);
        let cam = camera();
        let corrs: Vec<_> = (0..6)
            .map(|i| {
                let position = Vector3::new(0.1 * i as f64, 0.2 * i as f64 - 0.3, 0.05 * i as f64);
                let pixel = project(&cam, &truth, &position).unwrap();
                Correspondence {
                    pixel,
                    point_id: i,
                    position,
                }
            })
            .collect();
        assert!(matches!(
            solve_pnp_linear(&corrs, &cam),
            Err(GeometryError::Degenerate { .. })
        ));
    }

    #[test]
    fn rejects_coplanar_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (truth, _) = random_scene(&mut rng, 1);
        let cam = camera();
        let corrs: Vec<_> = (0..10)
            .map(|i| {
                let position = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0);
                let pixel = project(&cam, &truth, &position).unwrap();
                Correspondence {
                    pixel,
                    point_id: i,
                    position,
                }
            })
            .collect();
        assert!(matches!(
            solve_pnp_linear(&corrs, &cam),
            Err(GeometryError::Degenerate { .. })
        ));
    }

    #[test]
    fn rejects_five_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, corrs) = random_scene(&mut rng, 5);
        assert_eq!(
            solve_pnp_linear(&corrs, &camera()),
            Err(GeometryError::TooFewCorrespondences { needed: 6, got: 5 })
        );
    }

    #[test]
    fn refine_fixed_point_at_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (truth, corrs) = random_scene(&mut rng, 30);
        let refined = refine_pose(&truth, &corrs, &camera(), 50);
        assert!(geodesic_error(truth.rotation(), refined.rotation()) < 1e-12);
        assert!(loc_error(truth.translation(), refined.translation()) < 1e-12);
    }

    #[test]
    fn refine_recovers_from_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (truth, corrs) = random_scene(&mut rng, 30);
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let rot = Rotation3::new(axis * 2f64.to_radians());
            let start = Pose::from_parts_orthonormalized(rot.matrix() * truth.rotation(), truth.translation() * 1.02);
            let refined = refine_pose(&start, &corrs, &camera(), 50);
            assert!(geodesic_error(truth.rotation(), refined.rotation()) < 1e-8);
            assert!(loc_error(truth.translation(), refined.translation()) < 1e-8);
        }
    }

    #[test]
    fn refine_never_increases_error_under_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cam = camera();
        for _ in 0..50 {
            let (truth, mut corrs) = random_scene(&mut rng, 12);
            for c in &mut corrs {
                c.pixel += Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            }
            let start = perturb_pose(&truth, &Vector6::from_fn(|_, _| rng.random_range(-0.05..0.05)));
            let before = total_squared_reprojection_error(&start, &corrs, &cam);
            let after = total_squared_reprojection_error(&refine_pose(&start, &corrs, &cam, 20), &corrs, &cam);
            assert!(after <= before);
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cam = camera();
        let h = 1e-6;
        for _ in 0..25 {
            let (pose, corrs) = random_scene(&mut rng, 8);
            let analytic = reprojection_jacobian(&pose, &corrs, &cam);
            for k in 0..6 {
                let mut e = Vector6::zeros();
                e[k] = h;
                let plus = reprojection_residuals(&perturb_pose(&pose, &e), &corrs, &cam);
                let minus = reprojection_residuals(&perturb_pose(&pose, &-e), &corrs, &cam);
                let numeric = (plus - minus) / (2.0 * h);
                let col = analytic.column(k);
                let rel = (&numeric - col).norm() / col.norm().max(1e-12);
                assert!(rel < 1e-4, "column {k}: relative error {rel}");
            }
        }
    }
}
