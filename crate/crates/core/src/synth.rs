//! Ground-truth synthetic scenes: a point cloud, posed reference cameras with
//! exact keypoints and descriptors, and held-out query views.
//!
//! Visibility is frustum-only. A point is observed by a camera when it projects
//! inside the image in front of the camera and survives an independent coin flip
//! with probability `visibility_fraction`. Points no reference camera observes are
//! redrawn, so every model point has a non-empty track.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Unit, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correspondence::{Query, QueryView};
use crate::geometry::project;
use crate::model::{save_native, CameraIntrinsics, ModelError, Point3D, RefImage, SfmModel, TrackEntry};
use crate::pose::Pose;

/// Fewest observations a reference camera may have.
pub const MIN_POINTS_PER_CAMERA: usize = 6;
/// Polar half-angle of the `sphere_cap` layout.
pub const SPHERE_CAP_HALF_ANGLE_DEG: f64 = 60.0;
/// Redraw budget per requested point before giving up.
const MAX_DRAWS_PER_POINT: usize = 1000;

pub const MODEL_FILE: &str = "model.json";
pub const QUERIES_FILE: &str = "queries.json";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("reference camera {camera_index} observes {count} points, need at least {MIN_POINTS_PER_CAMERA}")]
    SparseCamera { camera_index: usize, count: usize },
    #[error("could not place {wanted} observable points within {draws} draws; cameras see too little of the object")]
    Unobservable { wanted: usize, draws: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointDistribution {
    /// Uniform on the faces of the cube `[-extent, extent]³`.
    CubeSurface,
    /// Uniform on the sphere of radius `extent`.
    SphereSurface,
    /// Isotropic Gaussian with σ = extent/3, truncated to the cube.
    GaussianBlob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraLayout {
    /// Evenly spaced on the equator.
    Ring,
    /// Fibonacci spiral over the cap within 60° of +z.
    SphereCap,
    /// Fibonacci spiral over the upper hemisphere.
    Hemisphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_points: usize,
    pub point_distribution: PointDistribution,
    /// Half-width of the object, in scene units.
    pub object_extent: f64,
    pub num_ref_cameras: usize,
    pub camera_layout: CameraLayout,
    pub camera_radius: f64,
    pub num_query_cameras: usize,
    pub descriptor_dim: usize,
    pub visibility_fraction: f64,
    pub rng_seed: u64,
    pub focal_length_px: f64,
    pub image_width: u32,
    pub image_height: u32,
    /// Largest angular offset of a query from its layout position.
    pub query_jitter_deg: f64,
    /// Largest relative change of a query's distance to the center.
    pub query_radius_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_points: 500,
            point_distribution: PointDistribution::CubeSurface,
            object_extent: 1.0,
            num_ref_cameras: 36,
            camera_layout: CameraLayout::Ring,
            camera_radius: 6.0,
            num_query_cameras: 20,
            descriptor_dim: 32,
            visibility_fraction: 1.0,
            rng_seed: 0,
            focal_length_px: 500.0,
            image_width: 640,
            image_height: 480,
            query_jitter_deg: 5.0,
            query_radius_jitter: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |field, message: &str| {
            Err(SynthError::InvalidConfig {
                field,
                message: message.to_string(),
            })
        };
        if self.num_points < 8 {
            return bad("num_points", "must be >= 8");
        }
        if self.num_ref_cameras < 2 {
            return bad("num_ref_cameras", "must be >= 2");
        }
        if !(self.object_extent > 0.0 && self.object_extent.is_finite()) {
            return bad("object_extent", "must be finite and > 0");
        }
        if !(self.camera_radius > self.object_extent && self.camera_radius.is_finite()) {
            return bad("camera_radius", "must be finite and > object_extent");
        }
        if self.descriptor_dim == 0 {
            return bad("descriptor_dim", "must be >= 1");
        }
        if !(self.visibility_fraction > 0.0 && self.visibility_fraction <= 1.0) {
            return bad("visibility_fraction", "must lie in (0, 1]");
        }
        if !(self.focal_length_px > 0.0 && self.focal_length_px.is_finite()) {
            return bad("focal_length_px", "must be finite and > 0");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image_width", "image size must be positive");
        }
        if !(0.0..=90.0).contains(&self.query_jitter_deg) {
            return bad("query_jitter_deg", "must lie in [0, 90]");
        }
        if !(0.0..1.0).contains(&self.query_radius_jitter) {
            return bad("query_radius_jitter", "must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn camera(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.focal_length_px,
            fy: self.focal_length_px,
            cx: self.image_width as f64 / 2.0,
            cy: self.image_height as f64 / 2.0,
            width: self.image_width,
            height: self.image_height,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub model: SfmModel,
    pub queries: Vec<Query>,
}

/// Unit directions of the reference cameras as seen from the object center.
pub fn layout_directions(layout: CameraLayout, n: usize) -> Vec<Vector3<f64>> {
    match layout {
        CameraLayout::Ring => (0..n)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / n as f64;
                Vector3::new(a.cos(), a.sin(), 0.0)
            })
            .collect(),
        CameraLayout::SphereCap => fibonacci_cap(n, SPHERE_CAP_HALF_ANGLE_DEG.to_radians()),
        CameraLayout::Hemisphere => fibonacci_cap(n, PI / 2.0),
    }
}

fn fibonacci_cap(n: usize, half_angle: f64) -> Vec<Vector3<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    let span = 1.0 - half_angle.cos();
    (0..n)
        .map(|k| {
            let z = 1.0 - span * (k as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let a = golden * k as f64;
            Vector3::new(r * a.cos(), r * a.sin(), z)
        })
        .collect()
}

/// A direction drawn uniformly over the layout's continuous support.
fn random_layout_direction(layout: CameraLayout, rng: &mut impl Rng) -> Vector3<f64> {
    match layout {
        CameraLayout::Ring => {
            let a = rng.random_range(0.0..2.0 * PI);
            Vector3::new(a.cos(), a.sin(), 0.0)
        }
        CameraLayout::SphereCap => random_cap_direction(SPHERE_CAP_HALF_ANGLE_DEG.to_radians(), rng),
        CameraLayout::Hemisphere => random_cap_direction(PI / 2.0, rng),
    }
}

fn random_cap_direction(half_angle: f64, rng: &mut impl Rng) -> Vector3<f64> {
    let z = 1.0 - rng.random::<f64>() * (1.0 - half_angle.cos());
    let r = (1.0 - z * z).max(0.0).sqrt();
    let a = rng.random_range(0.0..2.0 * PI);
    Vector3::new(r * a.cos(), r * a.sin(), z)
}

fn camera_pose(eye: &Vector3<f64>) -> Pose {
    Pose::look_at(eye, &Vector3::zeros(), &Vector3::z()).expect("camera outside the object center")
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn sample_point(dist: PointDistribution, extent: f64, rng: &mut impl Rng) -> Vector3<f64> {
    match dist {
        PointDistribution::CubeSurface => {
            let face = rng.random_range(0..6);
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut p = Vector3::new(
                rng.random_range(-extent..=extent),
                rng.random_range(-extent..=extent),
                rng.random_range(-extent..=extent),
            );
            p[axis] = sign * extent;
            p
        }
        PointDistribution::SphereSurface => {
            let v: Vec<f64> = unit_vector(rng, 3);
            Vector3::new(v[0], v[1], v[2]) * extent
        }
        PointDistribution::GaussianBlob => loop {
            let p = Vector3::new(
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ) * (extent / 3.0);
            if p.amax() <= extent {
                return p;
            }
        },
    }
}

/// Frustum test followed by the visibility coin flip. The coin is always
/// drawn so the random stream does not depend on the geometry.
fn observe(
    camera: &CameraIntrinsics,
    pose: &Pose,
    point: &Vector3<f64>,
    visibility: f64,
    rng: &mut impl Rng,
) -> Option<Vector2<f64>> {
    let kept = rng.random::<f64>() < visibility;
    let pixel = project(camera, pose, point).filter(|px| camera.contains(px))?;
    kept.then_some(pixel)
}

/// Builds a scene. Deterministic given `config.rng_seed`; the model and the
/// queries use separate generator streams, so the query count never changes
/// the model.
pub fn generate_scene(config: &SynthConfig) -> Result<Scene, SynthError> {
    config.validate()?;
    let camera = config.camera();
    let poses: Vec<Pose> = layout_directions(config.camera_layout, config.num_ref_cameras)
        .iter()
        .map(|d| camera_pose(&(d * config.camera_radius)))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    rng.set_stream(0);
    let mut keypoints: Vec<Vec<Vector2<f64>>> = vec![Vec::new(); poses.len()];
    let mut descriptors: Vec<Vec<Vec<f64>>> = vec![Vec::new(); poses.len()];
    let mut points = Vec::with_capacity(config.num_points);
    let budget = config.num_points * MAX_DRAWS_PER_POINT;
    let mut draws = 0;
    while points.len() < config.num_points {
        if draws == budget {
            return Err(SynthError::Unobservable {
                wanted: config.num_points,
                draws,
            });
        }
        draws += 1;
        let position = sample_point(config.point_distribution, config.object_extent, &mut rng);
        let seen: Vec<(usize, Vector2<f64>)> = poses
            .iter()
            .enumerate()
            .filter_map(|(k, pose)| {
                observe(&camera, pose, &position, config.visibility_fraction, &mut rng).map(|px| (k, px))
            })
            .collect();
        if seen.is_empty() {
            continue;
        }
        let descriptor = unit_vector(&mut rng, config.descriptor_dim);
        let track = seen
            .into_iter()
            .map(|(k, px)| {
                let entry = TrackEntry {
                    image_id: k as u32 + 1,
                    keypoint_index: keypoints[k].len() as u32,
                };
                keypoints[k].push(px);
                descriptors[k].push(descriptor.clone());
                entry
            })
            .collect();
        points.push(Point3D {
            id: points.len() as u64,
            position,
            track,
            descriptor: Some(descriptor),
        });
    }
    if let Some((camera_index, kps)) = keypoints
        .iter()
        .enumerate()
        .find(|(_, k)| k.len() < MIN_POINTS_PER_CAMERA)
    {
        return Err(SynthError::SparseCamera {
            camera_index,
            count: kps.len(),
        });
    }
    let images = poses
        .iter()
        .zip(keypoints)
        .zip(descriptors)
        .enumerate()
        .map(|(k, ((pose, kps), descs))| RefImage {
            id: k as u32 + 1,
            name: format!("ref_{:04}.png", k + 1),
            camera_id: 1,
            camera,
            pose: *pose,
            keypoints: kps,
            descriptors: Some(descs),
        });
    let model = SfmModel::with_enclosing_bbox(points, images)?;

    let mut qrng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    qrng.set_stream(1);
    let queries = (0..config.num_query_cameras)
        .map(|_| generate_query(config, &model, &mut qrng))
        .collect();
    Ok(Scene { model, queries })
}

fn generate_query(config: &SynthConfig, model: &SfmModel, rng: &mut impl Rng) -> Query {
    let base = random_layout_direction(config.camera_layout, rng);
    // Tilt by a uniform angle up to the jitter about a random axis orthogonal to `base`.
    let helper = if base.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let ortho = base.cross(&helper).normalize();
    let spin = Rotation3::from_axis_angle(&Unit::new_normalize(base), rng.random_range(0.0..2.0 * PI));
    let tilt = rng.random::<f64>() * config.query_jitter_deg.to_radians();
    let dir = Rotation3::from_axis_angle(&Unit::new_normalize(spin * ortho), tilt) * base;
    let radius = config.camera_radius * (1.0 + config.query_radius_jitter * rng.random_range(-1.0..=1.0));
    let pose = camera_pose(&(dir * radius));
    let camera = config.camera();
    let mut keypoints = Vec::new();
    let mut descriptors = Vec::new();
    for p in model.points() {
        if let Some(px) = observe(&camera, &pose, &p.position, config.visibility_fraction, rng) {
            keypoints.push(px);
            descriptors.push(p.descriptor.clone().expect("synthetic points carry descriptors"));
        }
    }
    Query {
        view: QueryView {
            camera,
            keypoints,
            descriptors: Some(descriptors),
        },
        pose_gt: pose,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRecord {
    view: ViewRecord,
    pose_gt: PoseRecord,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewRecord {
    camera: CameraIntrinsics,
    keypoints: Vec<[f64; 2]>,
    descriptors: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRecord {
    /// `[w, x, y, z]`
    quaternion: [f64; 4],
    translation: [f64; 3],
}

pub fn queries_to_json(queries: &[Query]) -> String {
    let records: Vec<QueryRecord> = queries
        .iter()
        .map(|q| QueryRecord {
            view: ViewRecord {
                camera: q.view.camera,
                keypoints: q.view.keypoints.iter().map(|k| [k.x, k.y]).collect(),
                descriptors: q.view.descriptors.clone(),
            },
            pose_gt: PoseRecord {
                quaternion: q.pose_gt.quaternion(),
                translation: (*q.pose_gt.translation()).into(),
            },
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&records).expect("plain data serializes");
    text.push('\n');
    text
}

pub fn save_queries(queries: &[Query], path: impl AsRef<Path>) -> Result<(), SynthError> {
    let path = path.as_ref();
    fs::write(path, queries_to_json(queries)).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>, SynthError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |message: String| SynthError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let records: Vec<QueryRecord> = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.view
                .camera
                .validate()
                .map_err(|e| parse_err(format!("query {i}: {e}")))?;
            let pose = Pose::from_quaternion(r.pose_gt.quaternion, Vector3::from(r.pose_gt.translation))
                .map_err(|e| parse_err(format!("query {i}: {e}")))?;
            if let Some(d) = &r.view.descriptors {
                if d.len() != r.view.keypoints.len() {
                    return Err(parse_err(format!(
                        "query {i}: descriptor count differs from keypoint count"
                    )));
                }
            }
            Ok(Query {
                view: QueryView {
                    camera: r.view.camera,
                    keypoints: r.view.keypoints.iter().map(|k| Vector2::new(k[0], k[1])).collect(),
                    descriptors: r.view.descriptors,
                },
                pose_gt: pose,
            })
        })
        .collect()
}

/// Writes `model.json` and `queries.json` into `directory`, creating it if needed.
pub fn scene_to_native_files(scene: &Scene, directory: impl AsRef<Path>) -> Result<(), SynthError> {
    let dir = directory.as_ref();
    fs::create_dir_all(dir).map_err(|source| SynthError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    save_native(&scene.model, dir.join(MODEL_FILE))?;
    save_queries(&scene.queries, dir.join(QUERIES_FILE))
}
