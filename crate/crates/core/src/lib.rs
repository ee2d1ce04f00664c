//! Compression of structure-from-motion models for object pose estimation.
//!
//! Reference images are linked in a directed localizability graph (an edge `u → v`
//! means the points seen by `u` are enough to localize `v`), a small dominating set
//! of that graph is extracted, and the model is filtered down to the points observed
//! by the dominating images. The crate also carries the PnP/RANSAC estimator used to
//! build the graph, synthetic ground-truth scenes, and pose-accuracy evaluation.

pub mod cli;
pub mod correspondence;
pub mod domgraph;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod pose;
pub mod synth;

pub use model::{Bbox3, BboxPolicy, CameraIntrinsics, ImageId, Point3D, PointId, RefImage, SfmModel, TrackEntry};
pub use pose::Pose;

/// Derives the seed of an indexed sub-stream (iteration, query, sample) from a
/// base seed. The generator's own seeding expands it, so neighbouring indices
/// still give unrelated streams.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    seed ^ index
}
