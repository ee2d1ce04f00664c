//! Single-document JSON format (`model.json`). The schema is documented in
//! `docs/native_format.md`. Floats are written in shortest round-trip form,
//! so save/load is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{Bbox3, CameraId, CameraIntrinsics, ImageId, ModelError, Point3D, PointId, RefImage, SfmModel, TrackEntry};
use crate::pose::Pose;

pub const NATIVE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NativeDocument {
    version: u32,
    bbox: NativeBbox,
    cameras: Vec<NativeCamera>,
    images: Vec<NativeImage>,
    points: Vec<NativePoint>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NativeBbox {
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NativeCamera {
    id: CameraId,
    model: String,
    width: u32,
    height: u32,
    /// `fx fy cx cy`
    params: [f64; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NativeImage {
    id: ImageId,
    name: String,
    camera_id: CameraId,
    /// Row-major model-to-camera rotation.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    keypoints: Vec<[f64; 2]>,
    descriptors: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NativePoint {
    id: PointId,
    position: [f64; 3],
    /// `[image_id, keypoint_index]` pairs.
    track: Vec<(ImageId, u32)>,
    descriptor: Option<Vec<f64>>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u64,
}

fn document(model: &SfmModel) -> NativeDocument {
    let mut cameras = BTreeMap::new();
    for image in model.images() {
        let c = image.camera;
        cameras.entry(image.camera_id).or_insert(NativeCamera {
            id: image.camera_id,
            model: "PINHOLE".into(),
            width: c.width,
            height: c.height,
            params: [c.fx, c.fy, c.cx, c.cy],
        });
    }
    let images = model
        .images()
        .map(|img| {
            let r = img.pose.rotation();
            NativeImage {
                id: img.id,
                name: img.name.clone(),
                camera_id: img.camera_id,
                rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
                translation: (*img.pose.translation()).into(),
                keypoints: img.keypoints.iter().map(|k| [k.x, k.y]).collect(),
                descriptors: img.descriptors.clone(),
            }
        })
        .collect();
    let points = model
        .points()
        .map(|p| NativePoint {
            id: p.id,
            position: p.position.into(),
            track: p.track.iter().map(|e| (e.image_id, e.keypoint_index)).collect(),
            descriptor: p.descriptor.clone(),
        })
        .collect();
    NativeDocument {
        version: NATIVE_FORMAT_VERSION,
        bbox: NativeBbox {
            min: (*model.bbox().min()).into(),
            max: (*model.bbox().max()).into(),
        },
        cameras: cameras.into_values().collect(),
        images,
        points,
    }
}

/// Canonical JSON text of a model; also the input of [`SfmModel::digest`].
pub fn to_native_json(model: &SfmModel) -> String {
    serde_json::to_string_pretty(&document(model)).expect("model serializes")
}

pub fn save_native(model: &SfmModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    fs::write(path, to_native_json(model)).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_native(path: impl AsRef<Path>) -> Result<SfmModel, ModelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| match source.kind() {
        std::io::ErrorKind::NotFound => ModelError::MissingFile(path.to_path_buf()),
        _ => ModelError::Io {
            path: path.to_path_buf(),
            source,
        },
    })?;
    parse_native(&text, path)
}

fn json_error(path: &Path, e: serde_json::Error) -> ModelError {
    ModelError::Parse {
        file: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    }
}

pub(crate) fn parse_native(text: &str, path: &Path) -> Result<SfmModel, ModelError> {
    let probe: VersionProbe = serde_json::from_str(text).map_err(|e| json_error(path, e))?;
    if probe.version != u64::from(NATIVE_FORMAT_VERSION) {
        return Err(ModelError::VersionMismatch {
            found: probe.version,
            supported: NATIVE_FORMAT_VERSION,
        });
    }
    let doc: NativeDocument = serde_json::from_str(text).map_err(|e| json_error(path, e))?;

    let mut cameras = BTreeMap::new();
    for c in doc.cameras {
        if c.model != "PINHOLE" {
            return Err(ModelError::UnsupportedCameraModel(c.model));
        }
        let [fx, fy, cx, cy] = c.params;
        let intrinsics = CameraIntrinsics::new(fx, fy, cx, cy, c.width, c.height)?;
        if cameras.insert(c.id, intrinsics).is_some() {
            return Err(ModelError::Invalid(format!("duplicate camera id {}", c.id)));
        }
    }
    let images = doc
        .images
        .into_iter()
        .map(|img| {
            let camera = *cameras.get(&img.camera_id).ok_or_else(|| {
                ModelError::Invalid(format!("image {} references unknown camera {}", img.id, img.camera_id))
            })?;
            let rotation = Matrix3::from_fn(|i, j| img.rotation[i][j]);
            let pose = Pose::new(rotation, Vector3::from(img.translation)).map_err(|source| ModelError::Pose {
                image_id: img.id,
                source,
            })?;
            Ok(RefImage {
                id: img.id,
                name: img.name,
                camera_id: img.camera_id,
                camera,
                pose,
                keypoints: img.keypoints.iter().map(|k| Vector2::new(k[0], k[1])).collect(),
                descriptors: img.descriptors,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let points = doc.points.into_iter().map(|p| Point3D {
        id: p.id,
        position: Vector3::from(p.position),
        track: p
            .track
            .into_iter()
            .map(|(image_id, keypoint_index)| TrackEntry {
                image_id,
                keypoint_index,
            })
            .collect(),
        descriptor: p.descriptor,
    });
    let bbox = Bbox3::new(Vector3::from(doc.bbox.min), Vector3::from(doc.bbox.max))?;
    SfmModel::new(points, images, bbox)
}
