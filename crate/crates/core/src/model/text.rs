//! Plain-text reconstruction export (`cameras.txt`, `images.txt`, `points3D.txt`).
//!
//! Camera models: `PINHOLE fx fy cx cy` and `SIMPLE_PINHOLE f cx cy`. Images take two
//! lines each; the second is a flat list of `X Y POINT3D_ID` triples where `-1` marks
//! an untracked keypoint. Point colors and reprojection errors are read and dropped.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};

use super::{Bbox3, CameraId, CameraIntrinsics, ImageId, ModelError, Point3D, PointId, RefImage, SfmModel, TrackEntry};
use crate::pose::Pose;

const CAMERAS: &str = "cameras.txt";
const IMAGES: &str = "images.txt";
const POINTS: &str = "points3D.txt";

struct LineCtx<'a> {
    file: &'a Path,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, message: impl Into<String>) -> ModelError {
        ModelError::Parse {
            file: self.file.to_path_buf(),
            line: self.line,
            message: message.into(),
        }
    }

    fn parse<T: FromStr>(&self, token: Option<&str>, what: &str) -> Result<T, ModelError> {
        let token = token.ok_or_else(|| self.err(format!("missing {what}")))?;
        token.parse().map_err(|_| self.err(format!("invalid {what} {token:?}")))
    }
}

fn read(dir: &Path, name: &str) -> Result<(PathBuf, String), ModelError> {
    let path = dir.join(name);
    match fs::read_to_string(&path) {
        Ok(text) => Ok((path, text)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ModelError::MissingFile(path)),
        Err(source) => Err(ModelError::Io { path, source }),
    }
}

/// Lines with 1-based numbers, comments removed. Blank lines are kept because an
/// image with no keypoints has an empty second line.
fn content_lines(text: &str) -> Vec<(usize, &str)> {
    let mut lines: Vec<_> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.starts_with('#'))
        .collect();
    while lines.last().is_some_and(|(_, l)| l.is_empty()) {
        lines.pop();
    }
    lines
}

/// Loads a reconstruction from a directory of text files. The bounding box is the
/// point-cloud enclosure unless `bbox_override` is given.
pub fn load_reconstruction_text(dir: impl AsRef<Path>, bbox_override: Option<Bbox3>) -> Result<SfmModel, ModelError> {
    let dir = dir.as_ref();
    let cameras = parse_cameras(dir)?;
    let (images, keypoint_refs) = parse_images(dir, &cameras)?;
    let points = parse_points(dir)?;

    // Both directions of the keypoint <-> track link must agree.
    let mut observed: HashMap<(ImageId, u32), PointId> = HashMap::new();
    for p in &points {
        for e in &p.track {
            observed.insert((e.image_id, e.keypoint_index), p.id);
            if !images.iter().any(|img| img.id == e.image_id) {
                return Err(ModelError::DanglingImage {
                    point_id: p.id,
                    image_id: e.image_id,
                });
            }
        }
    }
    for ((image_id, kp), point_id) in &keypoint_refs {
        if observed.get(&(*image_id, *kp)) != Some(point_id) {
            return Err(ModelError::Invalid(format!(
                "image {image_id} keypoint {kp} claims point {point_id}, which does not list that observation"
            )));
        }
    }
    for ((image_id, kp), point_id) in &observed {
        if let Some(claimed) = keypoint_refs.get(&(*image_id, *kp)) {
            if claimed != point_id {
                return Err(ModelError::Invalid(format!(
                    "point {point_id} observes keypoint {kp} of image {image_id}, which belongs to point {claimed}"
                )));
            }
        }
    }

    let bbox = match bbox_override {
        Some(b) => b,
        None => Bbox3::enclosing(points.iter().map(|p| &p.position))?,
    };
    SfmModel::new(points, images, bbox)
}

fn parse_cameras(dir: &Path) -> Result<BTreeMap<CameraId, CameraIntrinsics>, ModelError> {
    let (path, text) = read(dir, CAMERAS)?;
    let mut cameras = BTreeMap::new();
    for (line, content) in content_lines(&text) {
        if content.is_empty() {
            continue;
        }
        let ctx = LineCtx { file: &path, line };
        let mut tok = content.split_whitespace();
        let id: CameraId = ctx.parse(tok.next(), "camera id")?;
        let model = tok.next().ok_or_else(|| ctx.err("missing camera model"))?;
        let width: u32 = ctx.parse(tok.next(), "width")?;
        let height: u32 = ctx.parse(tok.next(), "height")?;
        let params = tok
            .map(|t| ctx.parse::<f64>(Some(t), "camera parameter"))
            .collect::<Result<Vec<_>, _>>()?;
        let (fx, fy, cx, cy) = match (model, params.as_slice()) {
            ("PINHOLE", &[fx, fy, cx, cy]) => (fx, fy, cx, cy),
            ("SIMPLE_PINHOLE", &[f, cx, cy]) => (f, f, cx, cy),
            ("PINHOLE" | "SIMPLE_PINHOLE", p) => {
                return Err(ctx.err(format!(
                    "{model} expects {} parameters, got {}",
                    if model == "PINHOLE" { 4 } else { 3 },
                    p.len()
                )))
            }
            (other, _) => return Err(ModelError::UnsupportedCameraModel(other.to_string())),
        };
        let intrinsics = CameraIntrinsics::new(fx, fy, cx, cy, width, height).map_err(|e| ctx.err(e.to_string()))?;
        if cameras.insert(id, intrinsics).is_some() {
            return Err(ctx.err(format!("duplicate camera id {id}")));
        }
    }
    Ok(cameras)
}

type KeypointRefs = BTreeMap<(ImageId, u32), PointId>;

fn parse_images(
    dir: &Path,
    cameras: &BTreeMap<CameraId, CameraIntrinsics>,
) -> Result<(Vec<RefImage>, KeypointRefs), ModelError> {
    let (path, text) = read(dir, IMAGES)?;
    let lines = content_lines(&text);
    let mut images = Vec::new();
    let mut refs = BTreeMap::new();
    let mut iter = lines.iter().skip_while(|(_, l)| l.is_empty());
    while let Some(&(line, header)) = iter.next() {
        let ctx = LineCtx { file: &path, line };
        if header.is_empty() {
            return Err(ctx.err("expected an image header line"));
        }
        let mut tok = header.split_whitespace();
        let id: ImageId = ctx.parse(tok.next(), "image id")?;
        let mut q = [0.0; 4];
        for (slot, name) in q.iter_mut().zip(["QW", "QX", "QY", "QZ"]) {
            *slot = ctx.parse(tok.next(), name)?;
        }
        let mut t = [0.0; 3];
        for (slot, name) in t.iter_mut().zip(["TX", "TY", "TZ"]) {
            *slot = ctx.parse(tok.next(), name)?;
        }
        let camera_id: CameraId = ctx.parse(tok.next(), "camera id")?;
        let name = tok.collect::<Vec<_>>().join(" ");
        let camera = *cameras
            .get(&camera_id)
            .ok_or_else(|| ctx.err(format!("unknown camera id {camera_id}")))?;
        let pose = Pose::from_quaternion(q, Vector3::from(t)).map_err(|e| ctx.err(e.to_string()))?;

        // A trailing image with no keypoints loses its blank line to the trim above.
        let &(kp_line, observations) = iter.next().unwrap_or(&(line + 1, ""));
        let kctx = LineCtx {
            file: &path,
            line: kp_line,
        };
        let values: Vec<&str> = observations.split_whitespace().collect();
        if !values.len().is_multiple_of(3) {
            return Err(kctx.err(format!(
                "keypoint list has {} values, not a multiple of 3",
                values.len()
            )));
        }
        let mut keypoints = Vec::with_capacity(values.len() / 3);
        for (i, triple) in values.chunks_exact(3).enumerate() {
            let x: f64 = kctx.parse(Some(triple[0]), "keypoint x")?;
            let y: f64 = kctx.parse(Some(triple[1]), "keypoint y")?;
            let pid: i64 = kctx.parse(Some(triple[2]), "POINT3D_ID")?;
            keypoints.push(Vector2::new(x, y));
            match pid {
                -1 => {}
                p if p >= 0 => {
                    refs.insert((id, i as u32), p as PointId);
                }
                p => return Err(kctx.err(format!("invalid POINT3D_ID {p}"))),
            }
        }
        images.push(RefImage {
            id,
            name,
            camera_id,
            camera,
            pose,
            keypoints,
            descriptors: None,
        });
    }
    Ok((images, refs))
}

fn parse_points(dir: &Path) -> Result<Vec<Point3D>, ModelError> {
    let (path, text) = read(dir, POINTS)?;
    let mut points = Vec::new();
    for (line, content) in content_lines(&text) {
        if content.is_empty() {
            continue;
        }
        let ctx = LineCtx { file: &path, line };
        let tok: Vec<&str> = content.split_whitespace().collect();
        if tok.len() < 8 || !(tok.len() - 8).is_multiple_of(2) {
            return Err(ctx.err("expected POINT3D_ID X Y Z R G B ERROR followed by (IMAGE_ID POINT2D_IDX) pairs"));
        }
        let id: PointId = ctx.parse(Some(tok[0]), "point id")?;
        let position = Vector3::new(
            ctx.parse(Some(tok[1]), "X")?,
            ctx.parse(Some(tok[2]), "Y")?,
            ctx.parse(Some(tok[3]), "Z")?,
        );
        for (t, name) in tok[4..7].iter().zip(["R", "G", "B"]) {
            ctx.parse::<u8>(Some(t), name)?;
        }
        ctx.parse::<f64>(Some(tok[7]), "ERROR")?;
        let track = tok[8..]
            .chunks_exact(2)
            .map(|pair| {
                Ok(TrackEntry {
                    image_id: ctx.parse(Some(pair[0]), "IMAGE_ID")?,
                    keypoint_index: ctx.parse(Some(pair[1]), "POINT2D_IDX")?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        points.push(Point3D {
            id,
            position,
            track,
            descriptor: None,
        });
    }
    Ok(points)
}

/// Writes the three text files. Descriptors are not representable and are dropped.
pub fn save_reconstruction_text(model: &SfmModel, dir: impl AsRef<Path>) -> Result<(), ModelError> {
    let dir = dir.as_ref();
    let io = |path: PathBuf| move |source| ModelError::Io { path, source };
    fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;

    let mut cameras = BTreeMap::new();
    for img in model.images() {
        cameras.entry(img.camera_id).or_insert(img.camera);
    }
    let mut out = String::from("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n");
    for (id, c) in &cameras {
        let _ = writeln!(
            out,
            "{id} PINHOLE {} {} {} {} {} {}",
            c.width, c.height, c.fx, c.fy, c.cx, c.cy
        );
    }
    fs::write(dir.join(CAMERAS), out).map_err(io(dir.join(CAMERAS)))?;

    let mut kp_owner: HashMap<(ImageId, u32), PointId> = HashMap::new();
    for p in model.points() {
        for e in &p.track {
            kp_owner.insert((e.image_id, e.keypoint_index), p.id);
        }
    }
    let mut out = String::from("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n# POINTS2D[] as (X Y POINT3D_ID)\n");
    for img in model.images() {
        let [w, x, y, z] = img.pose.quaternion();
        let t = img.pose.translation();
        let _ = writeln!(
            out,
            "{} {w} {x} {y} {z} {} {} {} {} {}",
            img.id, t.x, t.y, t.z, img.camera_id, img.name
        );
        let row: Vec<String> = img
            .keypoints
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let pid = kp_owner.get(&(img.id, i as u32)).map_or(-1, |&p| p as i64);
                format!("{} {} {pid}", k.x, k.y)
            })
            .collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    fs::write(dir.join(IMAGES), out).map_err(io(dir.join(IMAGES)))?;

    let mut out = String::from("# POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID POINT2D_IDX)\n");
    for p in model.points() {
        let _ = write!(
            out,
            "{} {} {} {} 0 0 0 0",
            p.id, p.position.x, p.position.y, p.position.z
        );
        for e in &p.track {
            let _ = write!(out, " {} {}", e.image_id, e.keypoint_index);
        }
        out.push('\n');
    }
    fs::write(dir.join(POINTS), out).map_err(io(dir.join(POINTS)))?;
    Ok(())
}
