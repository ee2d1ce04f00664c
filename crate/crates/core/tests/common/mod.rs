#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfm_domset::correspondence::Query;
use sfm_domset::geometry::project;
use sfm_domset::synth::Scene;
use sfm_domset::{CameraIntrinsics, Point3D, Pose, RefImage, SfmModel, TrackEntry};
use sha2::{Digest, Sha256};

/// The six-node example graph with two minimum dominating sets, {1, 4} and {3, 4}.
pub const SIX_NODE_EDGES: [(u32, u32); 6] = [(1, 2), (1, 3), (2, 4), (3, 4), (4, 5), (4, 6)];

pub const POINTS_PER_GROUP: usize = 10;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("six_node")
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sfm-domset")
}

pub fn run_cli<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(bin()).args(args).output().expect("binary runs")
}

/// Runs the CLI and panics with its stderr unless it exits 0.
pub fn run_ok<I, S>(args: I)
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let out = run_cli(args);
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn sha256_file(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

/// Six cameras on a ring, all looking at a small cloud. Every edge `{a, b}` of the
/// example graph gets a cluster of points observed by exactly `a` and `b`, and every
/// image gets a private cluster. Descriptor matching can then only link images that
/// share a cluster, so the localizability graph reproduces the example graph.
/// Queries are the reference views themselves.
pub fn six_node_scene() -> Scene {
    let camera = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
    let poses: Vec<Pose> = (0..6)
        .map(|k| {
            let a = k as f64 * PI / 3.0;
            Pose::look_at(
                &Vector3::new(4.0 * a.cos(), 4.0 * a.sin(), 0.5),
                &Vector3::zeros(),
                &Vector3::z(),
            )
            .unwrap()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let groups: Vec<Vec<u32>> = SIX_NODE_EDGES
        .iter()
        .map(|&(a, b)| vec![a, b])
        .chain((1..=6).map(|i| vec![i]))
        .collect();

    let mut keypoints: Vec<Vec<Vector2<f64>>> = vec![Vec::new(); 6];
    let mut descriptors: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 6];
    let mut points = Vec::new();
    for owners in &groups {
        for _ in 0..POINTS_PER_GROUP {
            let position = Vector3::from_fn(|_, _| rng.random_range(-0.8..0.8));
            let descriptor: Vec<f64> = {
                let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            };
            let track = owners
                .iter()
                .map(|&id| {
                    let k = id as usize - 1;
                    let px = project(&camera, &poses[k], &position).expect("cloud is in view");
                    keypoints[k].push(px);
                    descriptors[k].push(descriptor.clone());
                    TrackEntry {
                        image_id: id,
                        keypoint_index: keypoints[k].len() as u32 - 1,
                    }
                })
                .collect();
            points.push(Point3D {
                id: points.len() as u64,
                position,
                track,
                descriptor: Some(descriptor),
            });
        }
    }
    let images: Vec<RefImage> = (0..6)
        .map(|k| RefImage {
            id: k as u32 + 1,
            name: format!("view_{}.png", k + 1),
            camera_id: 1,
            camera,
            pose: poses[k],
            keypoints: keypoints[k].clone(),
            descriptors: Some(descriptors[k].clone()),
        })
        .collect();
    let model = SfmModel::with_enclosing_bbox(points, images).unwrap();
    let queries = model.images().map(Query::from_ref_image).collect();
    Scene { model, queries }
}
