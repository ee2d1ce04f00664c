//! Localizability graphs over reference images and their dominating sets.
//!
//! Edge `u → v` means the points observed by `u` suffice to localize `v`. A set
//! `D` dominates the graph when every node is in `D` or is an out-neighbour of a
//! member, so keeping only `D`'s points should still localize every image.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correspondence::{CorrespondenceProvider, ProviderConfig, Query};
use crate::geometry::{bbox_add_error, ransac_pnp, translation_error_ratio, EstimatorConfig};
use crate::model::{ImageId, SfmModel};
use crate::sub_seed;

/// Node cap for the exhaustive minimum search.
pub const EXACT_MAX_NODES: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomGraphError {
    #[error("graph has no node {0}")]
    UnknownNode(ImageId),
    #[error("self-edge on node {0}")]
    SelfEdge(ImageId),
    #[error("duplicate node {0}")]
    DuplicateNode(ImageId),
    #[error("exact search supports at most {EXACT_MAX_NODES} nodes, graph has {0}")]
    TooManyNodes(usize),
    #[error("sample size {k} out of range 1..={n}")]
    SampleSize { k: usize, n: usize },
    #[error("model has no images")]
    EmptyModel,
    #[error("threshold must be finite and >= 0, got {0}")]
    InvalidThreshold(f64),
    #[error("iterations must be >= 1")]
    NoIterations,
}

/// Which pose error decides whether an edge exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMetric {
    /// Mean displacement of the 8 bbox corners over the bbox diagonal.
    #[default]
    BboxCorners,
    /// Translation error over the bbox diagonal.
    Translation,
}

impl fmt::Display for EdgeMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BboxCorners => "bbox_corners",
            Self::Translation => "translation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub from: ImageId,
    pub to: ImageId,
    pub error_ratio: f64,
}

/// Directed graph over image ids; edges carry the error ratio that admitted them.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizabilityGraph {
    nodes: Vec<ImageId>,
    out: BTreeMap<ImageId, BTreeMap<ImageId, f64>>,
}

impl LocalizabilityGraph {
    pub fn new(nodes: impl IntoIterator<Item = ImageId>) -> Result<Self, DomGraphError> {
        let mut out = BTreeMap::new();
        for n in nodes {
            if out.insert(n, BTreeMap::new()).is_some() {
                return Err(DomGraphError::DuplicateNode(n));
            }
        }
        Ok(Self {
            nodes: out.keys().copied().collect(),
            out,
        })
    }

    /// An undirected graph encoded as symmetric directed edges with ratio 0.
    pub fn from_undirected(
        nodes: impl IntoIterator<Item = ImageId>,
        pairs: &[(ImageId, ImageId)],
    ) -> Result<Self, DomGraphError> {
        let mut g = Self::new(nodes)?;
        for &(a, b) in pairs {
            g.add_edge(a, b, 0.0)?;
            g.add_edge(b, a, 0.0)?;
        }
        Ok(g)
    }

    pub fn add_edge(&mut self, from: ImageId, to: ImageId, error_ratio: f64) -> Result<(), DomGraphError> {
        if from == to {
            return Err(DomGraphError::SelfEdge(from));
        }
        if !self.out.contains_key(&to) {
            return Err(DomGraphError::UnknownNode(to));
        }
        self.out
            .get_mut(&from)
            .ok_or(DomGraphError::UnknownNode(from))?
            .insert(to, error_ratio);
        Ok(())
    }

    /// Node ids in ascending order.
    pub fn nodes(&self) -> &[ImageId] {
        &self.nodes
    }

    pub fn contains(&self, node: ImageId) -> bool {
        self.out.contains_key(&node)
    }

    pub fn out_neighbors(&self, node: ImageId) -> Result<impl Iterator<Item = ImageId> + '_, DomGraphError> {
        Ok(self
            .out
            .get(&node)
            .ok_or(DomGraphError::UnknownNode(node))?
            .keys()
            .copied())
    }

    pub fn edge(&self, from: ImageId, to: ImageId) -> Option<f64> {
        self.out.get(&from)?.get(&to).copied()
    }

    /// Edges sorted by `(from, to)`.
    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.out.iter().flat_map(|(&from, tos)| {
            tos.iter()
                .map(move |(&to, &error_ratio)| Edge { from, to, error_ratio })
        })
    }

    pub fn num_edges(&self) -> usize {
        self.out.values().map(BTreeMap::len).sum()
    }

    /// Closed out-neighbourhoods as bitsets over node positions (n ≤ 64 only).
    fn coverage_masks(&self) -> Vec<u64> {
        debug_assert!(self.nodes.len() <= 64);
        let pos: BTreeMap<ImageId, usize> = self.nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| self.out[n].keys().fold(1u64 << i, |m, t| m | 1u64 << pos[t]))
            .collect()
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let pos: BTreeMap<ImageId, usize> = self.nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        self.nodes
            .iter()
            .map(|n| self.out[n].keys().map(|t| pos[t]).collect())
            .collect()
    }
}

/// Whether every node is in `candidate` or an out-neighbour of a member.
pub fn is_dominating(graph: &LocalizabilityGraph, candidate: &BTreeSet<ImageId>) -> Result<bool, DomGraphError> {
    let mut covered: BTreeSet<ImageId> = BTreeSet::new();
    for &c in candidate {
        covered.insert(c);
        covered.extend(graph.out_neighbors(c)?);
    }
    Ok(graph.nodes().iter().all(|n| covered.contains(n)))
}

/// One randomized greedy pass: pick a uniform remaining node, keep it, and
/// discard it together with its out-neighbours until nothing remains.
pub fn greedy_dominating_set(graph: &LocalizabilityGraph, rng: &mut impl Rng) -> BTreeSet<ImageId> {
    greedy_indices(&graph.adjacency(), rng)
        .into_iter()
        .map(|i| graph.nodes[i])
        .collect()
}

fn greedy_indices(adjacency: &[Vec<usize>], rng: &mut impl Rng) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..adjacency.len()).collect();
    let mut alive = vec![true; adjacency.len()];
    let mut chosen = Vec::new();
    while !remaining.is_empty() {
        let u = remaining[rng.random_range(0..remaining.len())];
        chosen.push(u);
        alive[u] = false;
        for &v in &adjacency[u] {
            alive[v] = false;
        }
        remaining.retain(|&v| alive[v]);
    }
    chosen
}

/// Result of the best-of-K greedy search.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DominatingSet {
    pub members: BTreeSet<ImageId>,
    pub iterations_run: usize,
    pub seed: u64,
    pub best_iteration: usize,
}

/// Runs `iterations` greedy passes, pass `i` seeded with `sub_seed(seed, i)`, and
/// keeps the smallest result (earliest pass on ties). Passes run in parallel;
/// the winner does not depend on scheduling.
pub fn best_dominating_set(
    graph: &LocalizabilityGraph,
    iterations: usize,
    seed: u64,
) -> Result<DominatingSet, DomGraphError> {
    if iterations == 0 {
        return Err(DomGraphError::NoIterations);
    }
    let adjacency = graph.adjacency();
    let (best_iteration, indices) = (0..iterations)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, i as u64));
            (i, greedy_indices(&adjacency, &mut rng))
        })
        .min_by_key(|(i, set)| (set.len(), *i))
        .expect("at least one iteration");
    Ok(DominatingSet {
        members: indices.into_iter().map(|i| graph.nodes[i]).collect(),
        iterations_run: iterations,
        seed,
        best_iteration,
    })
}

/// Smallest dominating set by exhaustive search in order of size; among sets of
/// that size the lexicographically smallest sorted id list wins.
pub fn exact_min_dominating_set(graph: &LocalizabilityGraph) -> Result<BTreeSet<ImageId>, DomGraphError> {
    let n = graph.nodes().len();
    if n > EXACT_MAX_NODES {
        return Err(DomGraphError::TooManyNodes(n));
    }
    let masks = graph.coverage_masks();
    let full = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    for k in 0..=n {
        // Combinations come out in lexicographic order of node position, and
        // positions follow ascending ids.
        if let Some(combo) = (0..n)
            .combinations(k)
            .find(|c| c.iter().fold(0, |m, &i| m | masks[i]) == full)
        {
            return Ok(combo.into_iter().map(|i| graph.nodes[i]).collect());
        }
    }
    unreachable!("the full node set always dominates")
}

/// `k` distinct nodes drawn uniformly without replacement.
pub fn random_reference_sample(
    graph: &LocalizabilityGraph,
    k: usize,
    rng: &mut impl Rng,
) -> Result<BTreeSet<ImageId>, DomGraphError> {
    let n = graph.nodes().len();
    if k == 0 || k > n {
        return Err(DomGraphError::SampleSize { k, n });
    }
    Ok(rand::seq::index::sample(rng, n, k)
        .into_iter()
        .map(|i| graph.nodes[i])
        .collect())
}

/// `count` same-size random baselines. Sample `j` draws from stream `j + 1` of
/// the generator seeded with `seed`, so adding samples never changes earlier ones.
pub fn random_baseline_samples(
    graph: &LocalizabilityGraph,
    k: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<BTreeSet<ImageId>>, DomGraphError> {
    (0..count)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64 + 1);
            random_reference_sample(graph, k, &mut rng)
        })
        .collect()
}

/// Outcome of one ordered-pair localization attempt during graph construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairOutcome {
    /// Localized with this error ratio (may still exceed the threshold).
    Localized(f64),
    NotConverged,
    MatchingFailed,
}

/// Graph plus the per-pair outcomes it was thresholded from.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBuild {
    pub graph: LocalizabilityGraph,
    pub outcomes: BTreeMap<(ImageId, ImageId), PairOutcome>,
}

impl GraphBuild {
    pub fn attempts(&self) -> usize {
        self.outcomes.len()
    }
}

/// Tries to localize every image `j` from the points of every other image `i`
/// and adds `i → j` when the error ratio is strictly below `threshold`.
///
/// The query for `j` uses `j` as its noise stream, so `j` looks the same to every
/// reference image. Pairs run in parallel.
pub fn build_graph(
    model: &SfmModel,
    provider: &dyn CorrespondenceProvider,
    estimator: &EstimatorConfig,
    threshold: f64,
    metric: EdgeMetric,
) -> Result<GraphBuild, DomGraphError> {
    if !(threshold >= 0.0 && threshold.is_finite()) {
        return Err(DomGraphError::InvalidThreshold(threshold));
    }
    let ids = model.image_ids();
    if ids.is_empty() {
        return Err(DomGraphError::EmptyModel);
    }
    let restricted: Vec<SfmModel> = ids
        .par_iter()
        .map(|&i| model.restrict_to_image(i).expect("listed image"))
        .collect();
    let queries: Vec<Query> = ids
        .iter()
        .map(|&j| Query::from_ref_image(model.image(j).expect("listed image")))
        .collect();
    let pairs: Vec<(usize, usize)> = (0..ids.len())
        .flat_map(|i| (0..ids.len()).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();

    let outcomes: Vec<PairOutcome> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let query = &queries[j];
            let matches = match provider.find_matches(&restricted[i], query, ids[j] as u64) {
                Ok(m) => m,
                Err(e) => {
                    log::debug!("pair {} -> {}: matching failed: {e}", ids[i], ids[j]);
                    return PairOutcome::MatchingFailed;
                }
            };
            match ransac_pnp(&matches.correspondences, &query.view.camera, estimator) {
                Ok(est) if est.converged => {
                    let bbox = model.bbox();
                    PairOutcome::Localized(match metric {
                        EdgeMetric::BboxCorners => bbox_add_error(&query.pose_gt, &est.pose, bbox),
                        EdgeMetric::Translation => translation_error_ratio(&query.pose_gt, &est.pose, bbox),
                    })
                }
                Ok(_) => {
                    log::debug!("pair {} -> {}: not converged", ids[i], ids[j]);
                    PairOutcome::NotConverged
                }
                Err(e) => {
                    log::debug!("pair {} -> {}: {e}", ids[i], ids[j]);
                    PairOutcome::NotConverged
                }
            }
        })
        .collect();

    let mut graph = LocalizabilityGraph::new(ids.iter().copied())?;
    let mut outcome_map = BTreeMap::new();
    for (&(i, j), outcome) in pairs.iter().zip(outcomes) {
        if let PairOutcome::Localized(ratio) = outcome {
            if ratio < threshold {
                graph.add_edge(ids[i], ids[j], ratio)?;
            }
        }
        outcome_map.insert((ids[i], ids[j]), outcome);
    }
    Ok(GraphBuild {
        graph,
        outcomes: outcome_map,
    })
}

/// Settings a cached graph was built under. Two builds with equal keys over the
/// same model produce the same graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphKey {
    pub model_digest: String,
    pub threshold: f64,
    pub metric: EdgeMetric,
    pub provider: ProviderConfig,
    pub estimator: EstimatorConfig,
    pub seed: u64,
}

/// On-disk form of a built graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub model_digest: String,
    pub threshold: f64,
    pub metric: EdgeMetric,
    pub provider: ProviderConfig,
    pub estimator: EstimatorConfig,
    pub seed: u64,
    pub attempts: usize,
    pub nodes: Vec<ImageId>,
    pub edges: Vec<Edge>,
}

impl GraphFile {
    pub fn new(key: GraphKey, build: &GraphBuild) -> Self {
        Self {
            model_digest: key.model_digest,
            threshold: key.threshold,
            metric: key.metric,
            provider: key.provider,
            estimator: key.estimator,
            seed: key.seed,
            attempts: build.attempts(),
            nodes: build.graph.nodes().to_vec(),
            edges: build.graph.edges().collect(),
        }
    }

    pub fn key(&self) -> GraphKey {
        GraphKey {
            model_digest: self.model_digest.clone(),
            threshold: self.threshold,
            metric: self.metric,
            provider: self.provider.clone(),
            estimator: self.estimator,
            seed: self.seed,
        }
    }

    pub fn graph(&self) -> Result<LocalizabilityGraph, DomGraphError> {
        let mut graph = LocalizabilityGraph::new(self.nodes.iter().copied())?;
        for e in &self.edges {
            graph.add_edge(e.from, e.to, e.error_ratio)?;
        }
        Ok(graph)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }
}

/// On-disk form of a dominating set plus the random baselines drawn at its size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomsetFile {
    pub model_digest: String,
    pub members: BTreeSet<ImageId>,
    pub iterations_run: usize,
    pub seed: u64,
    pub best_iteration: usize,
    #[serde(default)]
    pub random_samples: Vec<BTreeSet<ImageId>>,
}

impl DomsetFile {
    pub fn new(model_digest: String, set: DominatingSet, random_samples: Vec<BTreeSet<ImageId>>) -> Self {
        Self {
            model_digest,
            members: set.members,
            iterations_run: set.iterations_run,
            seed: set.seed,
            best_iteration: set.best_iteration,
            random_samples,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("domset serializes")
    }
}
