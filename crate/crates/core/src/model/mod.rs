//! Sparse reconstruction data model: posed reference images, 3D points with
//! observation tracks, and the operations that carve sub-models out of it.
//!
//! An [`SfmModel`] is validated once at construction and immutable afterwards;
//! restriction and filtering always build new models and never renumber ids.

mod native;
mod text;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pose::{Pose, PoseError};

pub use native::{load_native, save_native, to_native_json, NATIVE_FORMAT_VERSION};
pub use text::{load_reconstruction_text, save_reconstruction_text};

pub type ImageId = u32;
pub type PointId = u64;
pub type CameraId = u32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unsupported camera model {0:?} (supported: PINHOLE, SIMPLE_PINHOLE)")]
    UnsupportedCameraModel(String),
    #[error("point {point_id} has a track entry referencing unknown image {image_id}")]
    DanglingImage { point_id: PointId, image_id: ImageId },
    #[error("point {point_id}: keypoint index {keypoint_index} out of range for image {image_id} ({num_keypoints} keypoints)")]
    KeypointOutOfRange {
        point_id: PointId,
        image_id: ImageId,
        keypoint_index: u32,
        num_keypoints: usize,
    },
    #[error("unsupported native format version {found} (supported: {supported})")]
    VersionMismatch { found: u64, supported: u32 },
    #[error("unknown point id {0}")]
    UnknownPoint(PointId),
    #[error("unknown image id {0}")]
    UnknownImage(ImageId),
    #[error("dominating set is empty")]
    EmptyImageSet,
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("invalid pose for image {image_id}: {source}")]
    Pose {
        image_id: ImageId,
        #[source]
        source: PoseError,
    },
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, ModelError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(ModelError::Invalid(format!(
                "focal lengths must be positive and finite: {self:?}"
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(ModelError::Invalid(format!("image size must be positive: {self:?}")));
        }
        if !(0.0..=self.width as f64).contains(&self.cx) || !(0.0..=self.height as f64).contains(&self.cy) {
            return Err(ModelError::Invalid(format!("principal point outside image: {self:?}")));
        }
        Ok(())
    }

    /// Whether a pixel lies in `[0, width] × [0, height]`.
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        (0.0..=self.width as f64).contains(&pixel.x) && (0.0..=self.height as f64).contains(&pixel.y)
    }
}

/// Axis-aligned box in the model frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbox3 {
    min: Vector3<f64>,
    max: Vector3<f64>,
}

impl Bbox3 {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self, ModelError> {
        let ok = (0..3).all(|i| min[i].is_finite() && max[i].is_finite() && min[i] < max[i]);
        if !ok {
            return Err(ModelError::Invalid(format!(
                "bounding box needs min < max componentwise, got min {:?} max {:?}",
                min.as_slice(),
                max.as_slice()
            )));
        }
        Ok(Self { min, max })
    }

    /// Componentwise min/max enclosure; fails on empty or flat point sets.
    pub fn enclosing<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Result<Self, ModelError> {
        let mut iter = points.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| ModelError::Invalid("cannot compute a bounding box without points".into()))?;
        let (min, max) = iter.fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        Self::new(min, max)
    }

    pub fn min(&self) -> &Vector3<f64> {
        &self.min
    }

    pub fn max(&self) -> &Vector3<f64> {
        &self.max
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    /// Longest diagonal of the box.
    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let (lo, hi) = (self.min, self.max);
        std::array::from_fn(|i| {
            Vector3::new(
                if i & 1 == 0 { lo.x } else { hi.x },
                if i & 2 == 0 { lo.y } else { hi.y },
                if i & 4 == 0 { lo.z } else { hi.z },
            )
        })
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }
}

/// One observation of a 3D point: keypoint `keypoint_index` of image `image_id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrackEntry {
    pub image_id: ImageId,
    pub keypoint_index: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point3D {
    pub id: PointId,
    pub position: Vector3<f64>,
    pub track: Vec<TrackEntry>,
    pub descriptor: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefImage {
    pub id: ImageId,
    pub name: String,
    pub camera_id: CameraId,
    pub camera: CameraIntrinsics,
    /// Model-to-camera pose from the reconstruction.
    pub pose: Pose,
    pub keypoints: Vec<Vector2<f64>>,
    pub descriptors: Option<Vec<Vec<f64>>>,
}

/// How a derived model obtains its bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BboxPolicy {
    /// Keep the parent's box so diagonal-relative thresholds stay comparable.
    #[default]
    Keep,
    /// Recompute the enclosure of the surviving points.
    Recompute,
}

/// A validated sparse reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct SfmModel {
    points: BTreeMap<PointId, Point3D>,
    images: BTreeMap<ImageId, RefImage>,
    bbox: Bbox3,
}

impl SfmModel {
    pub fn new(
        points: impl IntoIterator<Item = Point3D>,
        images: impl IntoIterator<Item = RefImage>,
        bbox: Bbox3,
    ) -> Result<Self, ModelError> {
        let mut image_map = BTreeMap::new();
        for image in images {
            let id = image.id;
            if image_map.insert(id, image).is_some() {
                return Err(ModelError::Invalid(format!("duplicate image id {id}")));
            }
        }
        let mut point_map = BTreeMap::new();
        for point in points {
            let id = point.id;
            if point_map.insert(id, point).is_some() {
                return Err(ModelError::Invalid(format!("duplicate point id {id}")));
            }
        }
        let model = Self {
            points: point_map,
            images: image_map,
            bbox,
        };
        model.validate()?;
        Ok(model)
    }

    /// Builds a model whose box encloses its points.
    pub fn with_enclosing_bbox(
        points: Vec<Point3D>,
        images: impl IntoIterator<Item = RefImage>,
    ) -> Result<Self, ModelError> {
        let bbox = Bbox3::enclosing(points.iter().map(|p| &p.position))?;
        Self::new(points, images, bbox)
    }

    fn validate(&self) -> Result<(), ModelError> {
        let mut cameras: BTreeMap<CameraId, CameraIntrinsics> = BTreeMap::new();
        let mut image_descriptor_dim = None;
        for image in self.images.values() {
            image.camera.validate()?;
            if let Some(existing) = cameras.insert(image.camera_id, image.camera) {
                if existing != image.camera {
                    return Err(ModelError::Invalid(format!(
                        "images share camera id {} with different intrinsics",
                        image.camera_id
                    )));
                }
            }
            Pose::new(*image.pose.rotation(), *image.pose.translation()).map_err(|source| ModelError::Pose {
                image_id: image.id,
                source,
            })?;
            if let Some((i, kp)) = image
                .keypoints
                .iter()
                .enumerate()
                .find(|(_, kp)| !image.camera.contains(kp))
            {
                return Err(ModelError::Invalid(format!(
                    "image {}: keypoint {i} at ({}, {}) outside the {}x{} image",
                    image.id, kp.x, kp.y, image.camera.width, image.camera.height
                )));
            }
            if let Some(descriptors) = &image.descriptors {
                if descriptors.len() != image.keypoints.len() {
                    return Err(ModelError::Invalid(format!(
                        "image {}: {} descriptors for {} keypoints",
                        image.id,
                        descriptors.len(),
                        image.keypoints.len()
                    )));
                }
                for d in descriptors {
                    check_dim(&mut image_descriptor_dim, d.len(), || format!("image {}", image.id))?;
                }
            }
        }

        let mut point_descriptor_dim = None;
        for point in self.points.values() {
            if !point.position.iter().all(|v| v.is_finite()) {
                return Err(ModelError::Invalid(format!(
                    "point {} has a non-finite position",
                    point.id
                )));
            }
            if point.track.is_empty() {
                return Err(ModelError::Invalid(format!("point {} has an empty track", point.id)));
            }
            let mut seen = BTreeSet::new();
            for entry in &point.track {
                let image = self.images.get(&entry.image_id).ok_or(ModelError::DanglingImage {
                    point_id: point.id,
                    image_id: entry.image_id,
                })?;
                if entry.keypoint_index as usize >= image.keypoints.len() {
                    return Err(ModelError::KeypointOutOfRange {
                        point_id: point.id,
                        image_id: entry.image_id,
                        keypoint_index: entry.keypoint_index,
                        num_keypoints: image.keypoints.len(),
                    });
                }
                if !seen.insert(entry.image_id) {
                    return Err(ModelError::Invalid(format!(
                        "point {} observed twice by image {}",
                        point.id, entry.image_id
                    )));
                }
            }
            if !self.bbox.contains(&point.position) {
                return Err(ModelError::Invalid(format!(
                    "point {} lies outside the bounding box",
                    point.id
                )));
            }
            if let Some(d) = &point.descriptor {
                check_dim(&mut point_descriptor_dim, d.len(), || format!("point {}", point.id))?;
            }
        }
        Ok(())
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &Point3D> + Clone {
        self.points.values()
    }

    pub fn images(&self) -> impl ExactSizeIterator<Item = &RefImage> + Clone {
        self.images.values()
    }

    pub fn point(&self, id: PointId) -> Option<&Point3D> {
        self.points.get(&id)
    }

    pub fn image(&self, id: ImageId) -> Option<&RefImage> {
        self.images.get(&id)
    }

    pub fn image_ids(&self) -> Vec<ImageId> {
        self.images.keys().copied().collect()
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn bbox(&self) -> &Bbox3 {
        &self.bbox
    }

    /// True when every point carries a descriptor.
    pub fn has_point_descriptors(&self) -> bool {
        self.points.values().all(|p| p.descriptor.is_some())
    }

    /// Reference images observing the point.
    pub fn parents(&self, point_id: PointId) -> Result<BTreeSet<ImageId>, ModelError> {
        let point = self.points.get(&point_id).ok_or(ModelError::UnknownPoint(point_id))?;
        Ok(point.track.iter().map(|e| e.image_id).collect())
    }

    /// Sub-model holding one image and exactly the points it observes.
    pub fn restrict_to_image(&self, image_id: ImageId) -> Result<SfmModel, ModelError> {
        if !self.images.contains_key(&image_id) {
            return Err(ModelError::UnknownImage(image_id));
        }
        let keep = BTreeSet::from([image_id]);
        let sub = self.subset(&keep, BboxPolicy::Keep)?;
        if sub.points.is_empty() {
            log::warn!("image {image_id} observes no points; restricted model is empty");
        }
        Ok(sub)
    }

    /// Keeps the images in `members` and every point observed by at least one of them.
    pub fn filter_by_dominating_set(
        &self,
        members: &BTreeSet<ImageId>,
        bbox_policy: BboxPolicy,
    ) -> Result<SfmModel, ModelError> {
        if members.is_empty() {
            return Err(ModelError::EmptyImageSet);
        }
        if let Some(&unknown) = members.iter().find(|id| !self.images.contains_key(id)) {
            return Err(ModelError::UnknownImage(unknown));
        }
        self.subset(members, bbox_policy)
    }

    fn subset(&self, keep: &BTreeSet<ImageId>, bbox_policy: BboxPolicy) -> Result<SfmModel, ModelError> {
        let images: BTreeMap<_, _> = self
            .images
            .iter()
            .filter(|(id, _)| keep.contains(id))
            .map(|(id, img)| (*id, img.clone()))
            .collect();
        let points: BTreeMap<_, _> = self
            .points
            .values()
            .filter_map(|p| {
                let track: Vec<_> = p.track.iter().filter(|e| keep.contains(&e.image_id)).copied().collect();
                (!track.is_empty()).then(|| (p.id, Point3D { track, ..p.clone() }))
            })
            .collect();
        let bbox = match bbox_policy {
            BboxPolicy::Keep => self.bbox,
            BboxPolicy::Recompute => Bbox3::enclosing(points.values().map(|p| &p.position))?,
        };
        Ok(SfmModel { points, images, bbox })
    }

    /// Returns a copy with a different bounding box, re-checking point containment.
    pub fn with_bbox(&self, bbox: Bbox3) -> Result<SfmModel, ModelError> {
        SfmModel::new(self.points.values().cloned(), self.images.values().cloned(), bbox)
    }

    /// SHA-256 of the canonical native serialization, hex encoded.
    pub fn digest(&self) -> String {
        let json = to_native_json(self);
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn check_dim(expected: &mut Option<usize>, got: usize, what: impl FnOnce() -> String) -> Result<(), ModelError> {
    match *expected {
        None if got == 0 => Err(ModelError::Invalid(format!("{}: empty descriptor", what()))),
        None => {
            *expected = Some(got);
            Ok(())
        }
        Some(dim) if dim != got => Err(ModelError::Invalid(format!(
            "{}: descriptor length {got}, expected {dim}",
            what()
        ))),
        Some(_) => Ok(()),
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    pub fn image(id: ImageId, num_keypoints: usize) -> RefImage {
        RefImage {
            id,
            name: format!("img{id}.png"),
            camera_id: 1,
            camera: camera(),
            pose: Pose::identity(),
            keypoints: (0..num_keypoints)
                .map(|i| Vector2::new(10.0 + i as f64, 20.0))
                .collect(),
            descriptors: None,
        }
    }

    pub fn point(id: PointId, position: [f64; 3], track: &[(ImageId, u32)]) -> Point3D {
        Point3D {
            id,
            position: Vector3::from(position),
            track: track
                .iter()
                .map(|&(image_id, keypoint_index)| TrackEntry {
                    image_id,
                    keypoint_index,
                })
                .collect(),
            descriptor: None,
        }
    }

    /// Images 1 (A), 2 (B), 3 (C); p1 seen by {A, B}, p2 by {B}, p3 by {C}.
    pub fn abc_model() -> SfmModel {
        SfmModel::with_enclosing_bbox(
            vec![
                point(1, [0.0, 0.0, 0.0], &[(1, 0), (2, 0)]),
                point(2, [1.0, 1.0, 1.0], &[(2, 1)]),
                point(3, [2.0, 0.5, 3.0], &[(3, 0)]),
            ],
            vec![image(1, 2), image(2, 2), image(3, 1)],
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    fn ids<T: Copy + Ord>(it: impl IntoIterator<Item = T>) -> Vec<T> {
        it.into_iter().collect()
    }

    #[test]
    fn camera_invariants() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 2, 2).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.0, 1.0, 2, 2).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 1.0, 1.0, 0, 2).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 2.0, 0.0, 2, 2).is_ok());
    }

    #[test]
    fn bbox_geometry() {
        let b = Bbox3::new(Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(b.diagonal(), 3f64.sqrt());
        let corners = b.corners();
        assert!(corners
            .iter()
            .enumerate()
            .all(|(i, a)| corners[..i].iter().all(|b| a != b)));
        assert!(corners.iter().all(|c| b.contains(c)));
        assert!(Bbox3::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn parents_follow_tracks() {
        let m = abc_model();
        assert_eq!(ids(m.parents(1).unwrap()), vec![1, 2]);
        assert_eq!(ids(m.parents(2).unwrap()), vec![2]);
        assert!(matches!(m.parents(99), Err(ModelError::UnknownPoint(99))));
    }

    #[test]
    fn restrict_to_image_keeps_observed_points() {
        let m = abc_model();
        let sub = m.restrict_to_image(2).unwrap();
        assert_eq!(ids(sub.points().map(|p| p.id)), vec![1, 2]);
        assert_eq!(sub.image_ids(), vec![2]);
        assert_eq!(
            sub.point(1).unwrap().track,
            vec![TrackEntry {
                image_id: 2,
                keypoint_index: 0
            }]
        );
        assert_eq!(sub.bbox(), m.bbox());
        assert!(matches!(m.restrict_to_image(7), Err(ModelError::UnknownImage(7))));
    }

    #[test]
    fn restrict_to_blind_image_is_empty() {
        let m = SfmModel::with_enclosing_bbox(
            vec![point(1, [0.0; 3], &[(1, 0)]), point(2, [1.0; 3], &[(1, 1)])],
            vec![image(1, 2), image(2, 0)],
        )
        .unwrap();
        let sub = m.restrict_to_image(2).unwrap();
        assert_eq!(sub.num_points(), 0);
        assert_eq!(sub.num_images(), 1);
    }

    #[test]
    fn filter_matches_defining_equation() {
        let m = abc_model();
        let f = m
            .filter_by_dominating_set(&BTreeSet::from([2]), BboxPolicy::Keep)
            .unwrap();
        assert_eq!(ids(f.points().map(|p| p.id)), vec![1, 2]);
        assert_eq!(f.image_ids(), vec![2]);
        assert_eq!(f.bbox(), m.bbox());
    }

    #[test]
    fn filter_with_all_images_is_identity() {
        let m = abc_model();
        let all: BTreeSet<_> = m.image_ids().into_iter().collect();
        assert_eq!(m.filter_by_dominating_set(&all, BboxPolicy::Keep).unwrap(), m);
        assert_eq!(m.filter_by_dominating_set(&all, BboxPolicy::Recompute).unwrap(), m);
    }

    #[test]
    fn filter_rejects_bad_sets() {
        let m = abc_model();
        assert!(matches!(
            m.filter_by_dominating_set(&BTreeSet::new(), BboxPolicy::Keep),
            Err(ModelError::EmptyImageSet)
        ));
        assert!(matches!(
            m.filter_by_dominating_set(&BTreeSet::from([1, 9]), BboxPolicy::Keep),
            Err(ModelError::UnknownImage(9))
        ));
    }

    #[test]
    fn filter_recompute_shrinks_bbox() {
        let m = abc_model();
        let f = m
            .filter_by_dominating_set(&BTreeSet::from([2]), BboxPolicy::Recompute)
            .unwrap();
        assert_eq!(f.bbox().max(), &Vector3::new(1.0, 1.0, 1.0));
    }

    #[test]
    fn validation_rejects_dangling_and_out_of_range() {
        let dangling = SfmModel::with_enclosing_bbox(
            vec![point(1, [0.0; 3], &[(99, 0)]), point(2, [1.0; 3], &[(1, 0)])],
            vec![image(1, 1)],
        );
        assert!(matches!(
            dangling,
            Err(ModelError::DanglingImage {
                point_id: 1,
                image_id: 99
            })
        ));
        let out_of_range = SfmModel::with_enclosing_bbox(
            vec![point(1, [0.0; 3], &[(1, 3)]), point(2, [1.0; 3], &[(1, 0)])],
            vec![image(1, 1)],
        );
        assert!(matches!(
            out_of_range,
            Err(ModelError::KeypointOutOfRange { keypoint_index: 3, .. })
        ));
    }

    #[test]
    fn validation_rejects_duplicate_track_image_and_outside_bbox() {
        let dup = SfmModel::with_enclosing_bbox(
            vec![point(1, [0.0; 3], &[(1, 0), (1, 1)]), point(2, [1.0; 3], &[(1, 0)])],
            vec![image(1, 2)],
        );
        assert!(dup.is_err());
        let bbox = Bbox3::new(Vector3::zeros(), Vector3::new(0.5, 0.5, 0.5)).unwrap();
        assert!(SfmModel::new(vec![point(1, [1.0; 3], &[(1, 0)])], vec![image(1, 1)], bbox).is_err());
    }

    #[test]
    fn validation_rejects_mismatched_descriptors() {
        let mut img = image(1, 2);
        img.descriptors = Some(vec![vec![1.0]]);
        let bbox = Bbox3::new(Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0)).unwrap();
        assert!(SfmModel::new(vec![], vec![img], bbox).is_err());
    }

    /// Random model: `n_images` images, each point observed by a random subset.
    fn random_model(n_images: u32, tracks: Vec<Vec<bool>>) -> SfmModel {
        let mut kp_count = vec![0u32; n_images as usize];
        let mut points = Vec::new();
        for (pid, mask) in tracks.iter().enumerate() {
            let track: Vec<(ImageId, u32)> = mask
                .iter()
                .enumerate()
                .filter(|(_, &seen)| seen)
                .map(|(img, _)| {
                    kp_count[img] += 1;
                    (img as u32 + 1, kp_count[img] - 1)
                })
                .collect();
            if !track.is_empty() {
                points.push(point(
                    pid as u64 + 1,
                    [pid as f64, (pid % 3) as f64, (pid % 5) as f64],
                    &track,
                ));
            }
        }
        let images = (0..n_images).map(|i| image(i + 1, kp_count[i as usize] as usize));
        let bbox = Bbox3::new(Vector3::repeat(-1.0), Vector3::repeat(100.0)).unwrap();
        SfmModel::new(points, images, bbox).unwrap()
    }

    fn model_strategy() -> impl Strategy<Value = SfmModel> {
        (2u32..6).prop_flat_map(|n| {
            prop::collection::vec(prop::collection::vec(any::<bool>(), n as usize), 1..30)
                .prop_map(move |tracks| random_model(n, tracks))
        })
    }

    proptest! {
        #[test]
        fn filter_is_exact_and_idempotent(
            model in model_strategy(),
            picks in prop::collection::vec(any::<bool>(), 6),
        ) {
            let mut d: BTreeSet<ImageId> = model
                .image_ids()
                .into_iter()
                .zip(picks)
                .filter_map(|(id, keep)| keep.then_some(id))
                .collect();
            if d.is_empty() {
                d.insert(model.image_ids()[0]);
            }
            let once = model.filter_by_dominating_set(&d, BboxPolicy::Keep).unwrap();
            for p in model.points() {
                let hit = model.parents(p.id).unwrap().intersection(&d).next().is_some();
                prop_assert_eq!(once.point(p.id).is_some(), hit);
            }
            for p in once.points() {
                prop_assert!(p.track.iter().all(|e| d.contains(&e.image_id)));
            }
            let twice = once.filter_by_dominating_set(&d, BboxPolicy::Keep).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn restrict_matches_track_scan(model in model_strategy(), pick in 0usize..6) {
            let ids = model.image_ids();
            let image_id = ids[pick % ids.len()];
            let sub = model.restrict_to_image(image_id).unwrap();
            let expected: Vec<PointId> = model
                .points()
                .filter(|p| p.track.iter().any(|e| e.image_id == image_id))
                .map(|p| p.id)
                .collect();
            prop_assert_eq!(sub.points().map(|p| p.id).collect::<Vec<_>>(), expected);
        }
    }
}
