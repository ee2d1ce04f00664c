//! Producers of 2D-3D matches between a query view and a model.
//!
//! Two providers stand in for a learned matcher: an oracle that projects model
//! points with the query's true pose, and a mutual-nearest-neighbour descriptor
//! matcher with a ratio test. Both are deterministic given their seed.

use std::time::{Duration, Instant};

use nalgebra::Vector2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, Correspondence};
use crate::model::{CameraIntrinsics, RefImage, SfmModel};
use crate::pose::Pose;
use crate::sub_seed;

pub const ORACLE: &str = "oracle";
pub const DESCRIPTOR_NN: &str = "descriptor-nn";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrespondenceError {
    #[error("model points carry no descriptors")]
    MissingDescriptors,
    #[error("query has {keypoints} keypoints but {descriptors} descriptors")]
    QueryMismatch { keypoints: usize, descriptors: usize },
    #[error("query has no descriptors")]
    QueryWithoutDescriptors,
    #[error("descriptor length {query} differs from model descriptor length {model}")]
    DescriptorLength { query: usize, model: usize },
    #[error("invalid noise config: {0}")]
    InvalidNoise(String),
    #[error("invalid provider config: {0}")]
    InvalidProvider(String),
}

/// Corruption applied to matches. For the oracle it acts on emitted matches; for
/// the descriptor matcher it acts on the query keypoints before matching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub pixel_noise_sigma: f64,
    pub outlier_ratio: f64,
    pub drop_ratio: f64,
    /// Gaussian noise added per descriptor component (descriptor matcher only).
    pub descriptor_noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            pixel_noise_sigma: 0.0,
            outlier_ratio: 0.0,
            drop_ratio: 0.0,
            descriptor_noise_sigma: 0.0,
            rng_seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), CorrespondenceError> {
        let bad = |m: &str| Err(CorrespondenceError::InvalidNoise(m.to_string()));
        if !(self.pixel_noise_sigma >= 0.0 && self.pixel_noise_sigma.is_finite()) {
            return bad("pixel_noise_sigma must be finite and >= 0");
        }
        if !(self.descriptor_noise_sigma >= 0.0 && self.descriptor_noise_sigma.is_finite()) {
            return bad("descriptor_noise_sigma must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.outlier_ratio) {
            return bad("outlier_ratio must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.drop_ratio) {
            return bad("drop_ratio must lie in [0, 1)");
        }
        Ok(())
    }

    fn pixel_noise(&self) -> Normal<f64> {
        Normal::new(0.0, self.pixel_noise_sigma).expect("validated sigma")
    }
}

/// What a query image offers to a matcher.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryView {
    pub camera: CameraIntrinsics,
    pub keypoints: Vec<Vector2<f64>>,
    pub descriptors: Option<Vec<Vec<f64>>>,
}

/// A query view with its ground-truth model-to-camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub view: QueryView,
    pub pose_gt: Pose,
}

impl Query {
    /// Treats a reference image as a query, as graph construction does.
    pub fn from_ref_image(image: &RefImage) -> Self {
        Self {
            view: QueryView {
                camera: image.camera,
                keypoints: image.keypoints.clone(),
                descriptors: image.descriptors.clone(),
            },
            pose_gt: image.pose,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub correspondences: Vec<Correspondence>,
    pub provider_name: String,
    pub elapsed: Duration,
    /// Query-descriptor × model-point distance evaluations (0 for the oracle).
    pub candidate_comparisons: u64,
}

/// Matches every model point visible from `query_pose`, then corrupts the result.
///
/// Each point draws its noise from its own generator stream, so restricting the
/// model only removes emissions and never changes the surviving ones.
pub fn oracle_matches(
    model: &SfmModel,
    query_pose: &Pose,
    query_camera: &CameraIntrinsics,
    noise: &NoiseConfig,
) -> Result<MatchSet, CorrespondenceError> {
    noise.validate()?;
    let start = Instant::now();
    let normal = noise.pixel_noise();
    let mut correspondences = Vec::new();
    for point in model.points() {
        let Some(pixel) = project(query_camera, query_pose, &point.position) else {
            continue;
        };
        if !query_camera.contains(&pixel) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(noise.rng_seed);
        rng.set_stream(point.id);
        let mut pixel = pixel + Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
        if rng.random::<f64>() < noise.drop_ratio {
            continue;
        }
        if rng.random::<f64>() < noise.outlier_ratio {
            pixel = random_pixel(&mut rng, query_camera);
        }
        correspondences.push(Correspondence {
            pixel,
            point_id: point.id,
            position: point.position,
        });
    }
    Ok(MatchSet {
        correspondences,
        provider_name: ORACLE.to_string(),
        elapsed: start.elapsed(),
        candidate_comparisons: 0,
    })
}

fn random_pixel(rng: &mut impl Rng, camera: &CameraIntrinsics) -> Vector2<f64> {
    Vector2::new(
        rng.random_range(0.0..=camera.width as f64),
        rng.random_range(0.0..=camera.height as f64),
    )
}

type Descriptors = Vec<Vec<f64>>;

/// Mutual nearest neighbours in Euclidean descriptor space, kept when the
/// nearest/second-nearest distance ratio is below `ratio_threshold`.
pub fn descriptor_matches(
    model: &SfmModel,
    query_keypoints: &[Vector2<f64>],
    query_descriptors: &[Vec<f64>],
    ratio_threshold: f64,
) -> Result<MatchSet, CorrespondenceError> {
    if query_keypoints.len() != query_descriptors.len() {
        return Err(CorrespondenceError::QueryMismatch {
            keypoints: query_keypoints.len(),
            descriptors: query_descriptors.len(),
        });
    }
    if !(ratio_threshold > 0.0 && ratio_threshold <= 1.0) {
        return Err(CorrespondenceError::InvalidProvider(
            "ratio_threshold must lie in (0, 1]".into(),
        ));
    }
    let start = Instant::now();
    let points: Vec<_> = model.points().collect();
    if points.is_empty() {
        return Ok(MatchSet {
            correspondences: Vec::new(),
            provider_name: DESCRIPTOR_NN.to_string(),
            elapsed: start.elapsed(),
            candidate_comparisons: 0,
        });
    }
    let dim = points[0]
        .descriptor
        .as_ref()
        .ok_or(CorrespondenceError::MissingDescriptors)?
        .len();
    let mut model_desc = Vec::with_capacity(points.len() * dim);
    for p in &points {
        let d = p.descriptor.as_ref().ok_or(CorrespondenceError::MissingDescriptors)?;
        if d.len() != dim {
            return Err(CorrespondenceError::DescriptorLength {
                query: d.len(),
                model: dim,
            });
        }
        model_desc.extend_from_slice(d);
    }
    if let Some(q) = query_descriptors.iter().find(|q| q.len() != dim) {
        return Err(CorrespondenceError::DescriptorLength {
            query: q.len(),
            model: dim,
        });
    }

    // Squared distances; nearest and second nearest per query, nearest per point.
    let mut best_for_point = vec![(f64::INFINITY, usize::MAX); points.len()];
    let mut nearest = Vec::with_capacity(query_descriptors.len());
    for (qi, q) in query_descriptors.iter().enumerate() {
        let (mut d1, mut d2, mut arg) = (f64::INFINITY, f64::INFINITY, usize::MAX);
        for (pi, m) in model_desc.chunks_exact(dim).enumerate() {
            let d: f64 = q.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < d1 {
                d2 = d1;
                d1 = d;
                arg = pi;
            } else if d < d2 {
                d2 = d;
            }
            if d < best_for_point[pi].0 {
                best_for_point[pi] = (d, qi);
            }
        }
        nearest.push((arg, d1, d2));
    }
    let mut correspondences = Vec::new();
    for (qi, &(pi, d1, d2)) in nearest.iter().enumerate() {
        if pi == usize::MAX || best_for_point[pi].1 != qi {
            continue;
        }
        // Compare squared distances against the squared ratio.
        if d2.is_finite() && d1 >= ratio_threshold * ratio_threshold * d2 {
            continue;
        }
        correspondences.push(Correspondence {
            pixel: query_keypoints[qi],
            point_id: points[pi].id,
            position: points[pi].position,
        });
    }
    Ok(MatchSet {
        correspondences,
        provider_name: DESCRIPTOR_NN.to_string(),
        elapsed: start.elapsed(),
        candidate_comparisons: (query_descriptors.len() * points.len()) as u64,
    })
}

/// A source of matches for a query against a model.
///
/// `stream` separates the random draws of different queries that share one
/// noise seed; callers pass the query index.
pub trait CorrespondenceProvider: Send + Sync {
    fn name(&self) -> &str;
    fn find_matches(&self, model: &SfmModel, query: &Query, stream: u64) -> Result<MatchSet, CorrespondenceError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleProvider {
    pub noise: NoiseConfig,
}

impl CorrespondenceProvider for OracleProvider {
    fn name(&self) -> &str {
        ORACLE
    }

    fn find_matches(&self, model: &SfmModel, query: &Query, stream: u64) -> Result<MatchSet, CorrespondenceError> {
        let noise = NoiseConfig {
            rng_seed: sub_seed(self.noise.rng_seed, stream),
            ..self.noise
        };
        oracle_matches(model, &query.pose_gt, &query.view.camera, &noise)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptorProvider {
    pub noise: NoiseConfig,
    pub ratio_threshold: f64,
}

impl DescriptorProvider {
    /// Applies the noise config to the query keypoints and descriptors. The
    /// result depends only on the query and seed, never on the model.
    pub fn corrupt_query(
        &self,
        view: &QueryView,
        stream: u64,
    ) -> Result<(Vec<Vector2<f64>>, Descriptors), CorrespondenceError> {
        self.noise.validate()?;
        let descriptors = view
            .descriptors
            .as_ref()
            .ok_or(CorrespondenceError::QueryWithoutDescriptors)?;
        if descriptors.len() != view.keypoints.len() {
            return Err(CorrespondenceError::QueryMismatch {
                keypoints: view.keypoints.len(),
                descriptors: descriptors.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.noise.rng_seed, stream));
        let pixel_noise = self.noise.pixel_noise();
        let desc_noise = Normal::new(0.0, self.noise.descriptor_noise_sigma).expect("validated sigma");
        let mut keypoints = Vec::with_capacity(view.keypoints.len());
        let mut out_desc = Vec::with_capacity(view.keypoints.len());
        for (kp, desc) in view.keypoints.iter().zip(descriptors) {
            // Fixed draw count per keypoint keeps later keypoints' noise stable.
            let offset = Vector2::new(pixel_noise.sample(&mut rng), pixel_noise.sample(&mut rng));
            let dropped = rng.random::<f64>() < self.noise.drop_ratio;
            let outlier = rng.random::<f64>() < self.noise.outlier_ratio;
            let replacement = random_pixel(&mut rng, &view.camera);
            let mut d = desc.clone();
            if self.noise.descriptor_noise_sigma > 0.0 {
                d.iter_mut().for_each(|v| *v += desc_noise.sample(&mut rng));
                let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    d.iter_mut().for_each(|v| *v /= norm);
                }
            }
            if dropped {
                continue;
            }
            keypoints.push(if outlier { replacement } else { kp + offset });
            out_desc.push(d);
        }
        Ok((keypoints, out_desc))
    }
}

impl CorrespondenceProvider for DescriptorProvider {
    fn name(&self) -> &str {
        DESCRIPTOR_NN
    }

    fn find_matches(&self, model: &SfmModel, query: &Query, stream: u64) -> Result<MatchSet, CorrespondenceError> {
        let (keypoints, descriptors) = self.corrupt_query(&query.view, stream)?;
        descriptor_matches(model, &keypoints, &descriptors, self.ratio_threshold)
    }
}

/// Provider selection as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    pub name: String,
    pub noise: NoiseConfig,
    pub ratio_threshold: f64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            name: ORACLE.to_string(),
            noise: NoiseConfig::default(),
            ratio_threshold: 0.8,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), CorrespondenceError> {
        self.noise.validate()?;
        if !(self.ratio_threshold > 0.0 && self.ratio_threshold <= 1.0) {
            return Err(CorrespondenceError::InvalidProvider(
                "ratio_threshold must lie in (0, 1]".into(),
            ));
        }
        match self.name.as_str() {
            ORACLE | DESCRIPTOR_NN => Ok(()),
            other => Err(CorrespondenceError::InvalidProvider(format!(
                "unknown provider {other:?} (expected {ORACLE:?} or {DESCRIPTOR_NN:?})"
            ))),
        }
    }

    pub fn build(&self) -> Result<Box<dyn CorrespondenceProvider>, CorrespondenceError> {
        self.validate()?;
        Ok(match self.name.as_str() {
            ORACLE => Box::new(OracleProvider { noise: self.noise }),
            _ => Box::new(DescriptorProvider {
                noise: self.noise,
                ratio_threshold: self.ratio_threshold,
            }),
        })
    }
}
