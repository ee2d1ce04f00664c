use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pnp::{refine_pose, solve_pnp_linear, LINEAR_MIN_CORRESPONDENCES};
use super::{project, Correspondence, EstimatorConfig, GeometryError};
use crate::model::{CameraIntrinsics, PointId};
use crate::pose::Pose;

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub inlier_ids: BTreeSet<PointId>,
    pub num_iterations_used: usize,
    pub converged: bool,
}

struct Hypothesis {
    pose: Pose,
    inliers: Vec<usize>,
    mean_error: f64,
}

fn score(pose: Pose, correspondences: &[Correspondence], camera: &CameraIntrinsics, threshold: f64) -> Hypothesis {
    let mut inliers = Vec::new();
    let mut total = 0.0;
    for (i, c) in correspondences.iter().enumerate() {
        if let Some(px) = project(camera, &pose, &c.position) {
            let err = (px - c.pixel).norm();
            if err < threshold {
                inliers.push(i);
                total += err;
            }
        }
    }
    let mean_error = if inliers.is_empty() {
        f64::INFINITY
    } else {
        total / inliers.len() as f64
    };
    Hypothesis {
        pose,
        inliers,
        mean_error,
    }
}

/// Local optimization of a new best hypothesis: refine on the inliers under a
/// widened threshold that shrinks back to the nominal one, then alternate
/// refinement and rescoring while the inlier set grows. A linear solution from a
/// minimal noisy sample is often too rough to catch every inlier by itself.
fn local_optimize(
    hyp: Hypothesis,
    correspondences: &[Correspondence],
    camera: &CameraIntrinsics,
    threshold: f64,
    max_iterations: usize,
) -> Hypothesis {
    const WIDENING: [f64; 6] = [4.0, 3.0, 2.0, 1.5, 1.0, 1.0];
    let mut best = hyp;
    let mut pose = best.pose;
    for scale in WIDENING {
        let wide = score(pose, correspondences, camera, threshold * scale);
        if wide.inliers.len() < LINEAR_MIN_CORRESPONDENCES {
            break;
        }
        let inlier_set: Vec<Correspondence> = wide.inliers.iter().map(|&i| correspondences[i]).collect();
        pose = refine_pose(&pose, &inlier_set, camera, max_iterations);
        let next = score(pose, correspondences, camera, threshold);
        if next.inliers.len() > best.inliers.len()
            || (next.inliers.len() == best.inliers.len() && next.mean_error < best.mean_error)
        {
            best = next;
        }
    }
    best
}

/// Iterations needed to draw one all-inlier sample with the given confidence.
fn required_iterations(inlier_ratio: f64, sample_size: usize, confidence: f64) -> usize {
    let all_inlier = inlier_ratio.powi(sample_size as i32);
    if all_inlier >= 1.0 {
        return 1;
    }
    if all_inlier <= 0.0 {
        return usize::MAX;
    }
    let k = (1.0 - confidence).ln() / (1.0 - all_inlier).ln();
    if k.is_finite() {
        k.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}

/// Hypothesize-and-verify PnP.
///
/// Each iteration solves the linear PnP on a random sample of
/// `max(min_correspondences, 6)` matches and counts matches reprojecting
/// within the pixel threshold; points behind the camera are never inliers.
/// Hypotheses are ranked by inlier count, then by lower mean inlier error, and
/// each new best one is refined on its inliers before ranking continues.
/// Deterministic for a fixed `rng_seed`.
pub fn ransac_pnp(
    correspondences: &[Correspondence],
    camera: &CameraIntrinsics,
    config: &EstimatorConfig,
) -> Result<PoseEstimate, GeometryError> {
    config.validate()?;
    let n = correspondences.len();
    let sample_size = config.min_correspondences.max(LINEAR_MIN_CORRESPONDENCES);
    if n < config.min_correspondences || n < sample_size {
        return Err(GeometryError::TooFewCorrespondences {
            needed: sample_size,
            got: n,
        });
    }
    let threshold = config.ransac_inlier_threshold_px;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut best: Option<Hypothesis> = None;
    let mut budget = config.ransac_max_iterations;
    let mut iterations = 0;
    let mut sample = Vec::with_capacity(sample_size);
    while iterations < budget {
        iterations += 1;
        sample.clear();
        sample.extend(
            rand::seq::index::sample(&mut rng, n, sample_size)
                .iter()
                .map(|i| correspondences[i]),
        );
        let Ok(pose) = solve_pnp_linear(&sample, camera) else {
            continue;
        };
        let hyp = score(pose, correspondences, camera, threshold);
        let better = match &best {
            None => !hyp.inliers.is_empty(),
            Some(b) => {
                hyp.inliers.len() > b.inliers.len()
                    || (hyp.inliers.len() == b.inliers.len() && hyp.mean_error < b.mean_error)
            }
        };
        if better {
            let hyp = local_optimize(hyp, correspondences, camera, threshold, config.refine_max_iterations);
            let ratio = hyp.inliers.len() as f64 / n as f64;
            budget = budget.min(required_iterations(ratio, sample_size, config.ransac_confidence));
            best = Some(hyp);
        }
    }

    let Some(best) = best.filter(|b| b.inliers.len() >= config.min_correspondences) else {
        log::debug!(
            "ransac: no hypothesis with {} inliers after {iterations} iterations",
            config.min_correspondences
        );
        return Ok(PoseEstimate {
            pose: Pose::identity(),
            inlier_ids: BTreeSet::new(),
            num_iterations_used: iterations,
            converged: false,
        });
    };

    let final_hyp = best;
    Ok(PoseEstimate {
        pose: final_hyp.pose,
        inlier_ids: final_hyp.inliers.iter().map(|&i| correspondences[i].point_id).collect(),
        num_iterations_used: iterations,
        converged: final_hyp.inliers.len() >= config.min_correspondences,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::{geodesic_error, loc_error};
    use super::*;
    use nalgebra::Vector2;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn iteration_bound() {
        assert_eq!(required_iterations(1.0, 6, 0.999), 1);
        assert_eq!(required_iterations(0.0, 6, 0.999), usize::MAX);
        // ln(0.001) / ln(1 - 0.5^6) = 438.6...
        assert_eq!(required_iterations(0.5, 6, 0.999), 439);
    }

    #[test]
    fn too_few_correspondences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, corrs) = random_scene(&mut rng, 5);
        assert!(matches!(
            ransac_pnp(&corrs, &camera(), &EstimatorConfig::default()),
            Err(GeometryError::TooFewCorrespondences { got: 5, .. })
        ));
    }

    #[test]
    fn clean_data_recovers_all_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (truth, corrs) = random_scene(&mut rng, 50);
        let est = ransac_pnp(&corrs, &camera(), &EstimatorConfig::default()).unwrap();
        assert!(est.converged);
        assert_eq!(est.inlier_ids.len(), 50);
        assert!(geodesic_error(truth.rotation(), est.pose.rotation()) < 1e-8);
        assert!(loc_error(truth.translation(), est.pose.translation()) < 1e-8);
        assert_eq!(est.num_iterations_used, 1);
    }

    #[test]
    fn pure_outliers_do_not_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (_, mut corrs) = random_scene(&mut rng, 10);
        for c in &mut corrs {
            c.pixel = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        }
        let est = ransac_pnp(&corrs, &camera(), &EstimatorConfig::default()).unwrap();
        assert!(!est.converged);
    }

    /// 50 matches, 20 of them uniform-random outliers, 1 px noise on the rest.
    fn contaminated_scene(seed: u64) -> (Pose, Vec<Correspondence>, BTreeSet<PointId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (truth, mut corrs) = random_scene(&mut rng, 50);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut inliers = BTreeSet::new();
        for (i, c) in corrs.iter_mut().enumerate() {
            if i % 5 < 2 {
                c.pixel = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            } else {
                c.pixel += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                inliers.insert(c.point_id);
            }
        }
        (truth, corrs, inliers)
    }

    /// Rotation errors of a 100 000-iteration run (no early exit) on the three
    /// contaminated scenes below, seeds 100..103, estimator seed 7. The default
    /// run must do no worse than twice these values.
    const EXHAUSTIVE_GEODESIC_ERROR: [f64; 3] = [1.6709802620094938e-3, 7.844007328784836e-4, 7.443583925357263e-4];

    #[test]
    fn contaminated_data() {
        for (k, seed) in (100..103).enumerate() {
            let (truth, corrs, true_inliers) = contaminated_scene(seed);
            let cfg = EstimatorConfig {
                rng_seed: 7,
                ..Default::default()
            };
            let est = ransac_pnp(&corrs, &camera(), &cfg).unwrap();
            assert!(est.converged);
            let recovered = est.inlier_ids.intersection(&true_inliers).count();
            assert!(
                recovered as f64 >= 0.9 * true_inliers.len() as f64,
                "seed {seed}: recovered {recovered}"
            );
            let err = geodesic_error(truth.rotation(), est.pose.rotation());
            assert!(
                err <= 2.0 * EXHAUSTIVE_GEODESIC_ERROR[k],
                "seed {seed}: {err} vs {}",
                EXHAUSTIVE_GEODESIC_ERROR[k]
            );
        }
    }

    /// Regenerates `EXHAUSTIVE_GEODESIC_ERROR`; run with `--ignored --nocapture`.
    #[test]
    #[ignore]
    fn exhaustive_reference_run() {
        for seed in 100..103 {
            let (truth, corrs, _) = contaminated_scene(seed);
            let cfg = EstimatorConfig {
                rng_seed: 7,
                ransac_max_iterations: 100_000,
                ..Default::default()
            };
            let est = exhaustive(&corrs, &cfg);
            println!("seed {seed}: {:e}", geodesic_error(truth.rotation(), est.rotation()));
        }
    }

    /// RANSAC without adaptive termination: every one of the iterations is drawn.
    fn exhaustive(corrs: &[Correspondence], cfg: &EstimatorConfig) -> Pose {
        let cam = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let mut best: Option<Hypothesis> = None;
        for _ in 0..cfg.ransac_max_iterations {
            let sample: Vec<_> = rand::seq::index::sample(&mut rng, corrs.len(), 6)
                .iter()
                .map(|i| corrs[i])
                .collect();
            let Ok(pose) = solve_pnp_linear(&sample, &cam) else {
                continue;
            };
            let hyp = score(pose, corrs, &cam, cfg.ransac_inlier_threshold_px);
            if best.as_ref().is_none_or(|b| {
                hyp.inliers.len() > b.inliers.len()
                    || (hyp.inliers.len() == b.inliers.len() && hyp.mean_error < b.mean_error)
            }) {
                best = Some(hyp);
            }
        }
        let best = best.unwrap();
        let inliers: Vec<_> = best.inliers.iter().map(|&i| corrs[i]).collect();
        refine_pose(&best.pose, &inliers, &cam, cfg.refine_max_iterations)
    }

    #[test]
    fn deterministic_for_seed() {
        let (_, corrs, _) = contaminated_scene(300);
        let cfg = EstimatorConfig {
            rng_seed: 99,
            ..Default::default()
        };
        let a = ransac_pnp(&corrs, &camera(), &cfg).unwrap();
        let b = ransac_pnp(&corrs, &camera(), &cfg).unwrap();
        assert_eq!(a, b);
    }
}
