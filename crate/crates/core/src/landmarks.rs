//! Landmark selection for Nyström attention.
//!
//! Two strategies are provided. Segment-means averages contiguous blocks of
//! query/key rows and stays differentiable. Spatial-temporal cluster sampling
//! (STCS) groups sensors by road distance once up front, then for every time
//! step and cluster draws the landmark from a per-dimension Gaussian fitted to
//! that cluster's rows; its landmarks enter the graph as constants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::TensorOps;
use crate::tensor::Tensor;

pub const DEFAULT_STCS_SAMPLES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LandmarkStrategy {
    SegmentMeans,
    Stcs,
}

impl std::fmt::Display for LandmarkStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LandmarkStrategy::SegmentMeans => "segment-means",
            LandmarkStrategy::Stcs => "stcs",
        })
    }
}

/// Symmetric matrix of pairwise sensor distances.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeGeometry {
    n_nodes: usize,
    distances: Vec<f64>,
}

impl NodeGeometry {
    pub fn new(n_nodes: usize, distances: Vec<f64>) -> Result<Self> {
        if distances.len() != n_nodes * n_nodes {
            return Err(Error::Data(format!(
                "distance matrix for {n_nodes} nodes needs {} entries, got {}",
                n_nodes * n_nodes,
                distances.len()
            )));
        }
        for i in 0..n_nodes {
            if distances[i * n_nodes + i] != 0.0 {
                return Err(Error::Data(format!("distance matrix diagonal entry {i} is not zero")));
            }
            for j in 0..n_nodes {
                let d = distances[i * n_nodes + j];
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::Data(format!("distance ({i}, {j}) = {d} is not a finite non-negative value")));
                }
                if d != distances[j * n_nodes + i] {
                    return Err(Error::Data(format!("distance matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n_nodes, distances })
    }

    /// Euclidean distances between planar coordinates.
    pub fn from_coordinates(coords: &[(f64, f64)]) -> Self {
        let n = coords.len();
        let mut distances = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let d = (coords[i].0 - coords[j].0).hypot(coords[i].1 - coords[j].1);
                distances[i * n + j] = d;
                distances[j * n + i] = d;
            }
        }
        Self { n_nodes: n, distances }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distances[i * self.n_nodes + j]
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }
}

/// Assignment of every sensor to one of `s` non-empty clusters.
///
/// Cluster ids are `0..s`, numbered in order of each cluster's smallest node
/// index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMap {
    assignment: Vec<usize>,
    clusters: usize,
}

impl ClusterMap {
    pub fn new(assignment: Vec<usize>) -> Result<Self> {
        let clusters = assignment.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; clusters];
        for &c in &assignment {
            seen[c] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data("cluster map has an empty cluster".into()));
        }
        Ok(Self { assignment, clusters })
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters
    }

    pub fn n_nodes(&self) -> usize {
        self.assignment.len()
    }

    /// Node indices of every cluster, each list ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.clusters];
        for (node, &c) in self.assignment.iter().enumerate() {
            out[c].push(node);
        }
        out
    }
}

/// Bottom-up average-linkage clustering on a precomputed distance matrix,
/// merging until `s` clusters remain. Ties go to the lexicographically
/// smallest pair of cluster representatives (smallest member node).
pub fn agglomerative_cluster(geom: &NodeGeometry, s: usize) -> Result<ClusterMap> {
    let n = geom.n_nodes();
    if s == 0 || s > n {
        return Err(Error::Config(format!("cluster count {s} must lie in 1..={n}")));
    }
    // Active clusters keyed by representative; linkage[i][j] valid for active i, j.
    let mut linkage: Vec<f64> = geom.distances().to_vec();
    let mut size = vec![1usize; n];
    let mut parent: Vec<usize> = (0..n).collect();
    let mut active: Vec<bool> = vec![true; n];
    let mut remaining = n;
    while remaining > s {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if !active[j] {
                    continue;
                }
                let d = linkage[i * n + j];
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let (_, keep, gone) = best.expect("at least two active clusters");
        let (sk, sg) = (size[keep] as f64, size[gone] as f64);
        for k in 0..n {
            if !active[k] || k == keep || k == gone {
                continue;
            }
            let d = (sk * linkage[keep * n + k] + sg * linkage[gone * n + k]) / (sk + sg);
            linkage[keep * n + k] = d;
            linkage[k * n + keep] = d;
        }
        size[keep] += size[gone];
        active[gone] = false;
        parent[gone] = keep;
        remaining -= 1;
    }
    let root = |mut i: usize| {
        while parent[i] != i {
            i = parent[i];
        }
        i
    };
    let mut label_of_root = vec![usize::MAX; n];
    let mut next = 0;
    let mut assignment = Vec::with_capacity(n);
    for node in 0..n {
        let r = root(node);
        if label_of_root[r] == usize::MAX {
            label_of_root[r] = next;
            next += 1;
        }
        assignment.push(label_of_root[r]);
    }
    ClusterMap::new(assignment)
}

/// Landmark rows for queries and keys.
#[derive(Clone, Debug)]
pub struct LandmarkSet<O> {
    pub queries: O,
    pub keys: O,
    pub strategy: LandmarkStrategy,
}

impl<O: TensorOps> LandmarkSet<O> {
    pub fn count(&self) -> usize {
        self.queries.shape()[0]
    }
}

/// One STCS landmark per (time step, cluster), in time-major order.
///
/// `rows` holds `steps` groups of `clusters.n_nodes()` rows each (all nodes of
/// step 0, then step 1, …). Each landmark averages `samples` draws from
/// `N(μ, σ²)` per dimension, with μ and the population σ taken over the
/// cluster's rows at that step.
pub fn stcs_landmarks(
    rows: &Tensor,
    clusters: &ClusterMap,
    steps: usize,
    samples: usize,
    rng: &mut impl rand::Rng,
) -> Result<Tensor> {
    if samples == 0 {
        return Err(Error::Config("STCS needs at least one sample per landmark".into()));
    }
    let nodes = clusters.n_nodes();
    let (n, d) = rows.row_view();
    if rows.rank() != 2 || n != nodes * steps {
        return Err(Error::invalid(
            "stcs_landmarks",
            format!(
                "expected {steps} steps × {nodes} nodes = {} rows, got shape {:?}",
                nodes * steps,
                rows.shape()
            ),
        ));
    }
    let members = clusters.members();
    let mut out = Vec::with_capacity(steps * members.len() * d);
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for t in 0..steps {
        for group in &members {
            let anchor = rows.row(t * nodes + group[0]);
            // Shifted accumulation keeps identical rows exact.
            mean.iter_mut().for_each(|v| *v = 0.0);
            for &node in group {
                for ((m, v), a) in mean.iter_mut().zip(rows.row(t * nodes + node)).zip(anchor) {
                    *m += v - a;
                }
            }
            let k = group.len() as f64;
            for (m, a) in mean.iter_mut().zip(anchor) {
                *m = a + *m / k;
            }
            std.iter_mut().for_each(|v| *v = 0.0);
            for &node in group {
                for ((s, v), m) in std.iter_mut().zip(rows.row(t * nodes + node)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            for s in std.iter_mut() {
                *s = (*s / k).sqrt();
            }
            for j in 0..d {
                let mut draws = 0.0;
                for _ in 0..samples {
                    let z: f64 = StandardNormal.sample(rng);
                    draws += z;
                }
                // mean of `samples` draws from N(μ, σ²)
                out.push(mean[j] + std[j] * (draws / samples as f64));
            }
        }
    }
    Tensor::new(&[steps * members.len(), d], out)
}

/// Everything landmark selection needs besides the query/key rows themselves.
#[derive(Clone, Copy, Debug)]
pub struct LandmarkContext<'a> {
    pub strategy: LandmarkStrategy,
    pub count: usize,
    pub clusters: Option<&'a ClusterMap>,
    pub steps: usize,
    pub samples: usize,
    pub seed: u64,
}

impl<'a> LandmarkContext<'a> {
    pub fn segment_means(count: usize) -> Self {
        Self {
            strategy: LandmarkStrategy::SegmentMeans,
            count,
            clusters: None,
            steps: 1,
            samples: DEFAULT_STCS_SAMPLES,
            seed: 0,
        }
    }

    pub fn stcs(clusters: &'a ClusterMap, steps: usize, samples: usize, seed: u64) -> Self {
        Self {
            strategy: LandmarkStrategy::Stcs,
            count: clusters.n_clusters() * steps,
            clusters: Some(clusters),
            steps,
            samples,
            seed,
        }
    }

    /// Same settings with an independent seed for one (layer, head) slot.
    pub fn derive(&self, salt: u64) -> Self {
        let mut out = *self;
        out.seed = splitmix(self.seed ^ splitmix(salt));
        out
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Selects query and key landmarks with the same strategy.
pub fn make_landmark_set<O: TensorOps>(q: &O, k: &O, ctx: &LandmarkContext<'_>) -> Result<LandmarkSet<O>> {
    let n = q.shape()[0];
    if ctx.count == 0 || ctx.count > n {
        return Err(Error::invalid(
            "landmarks",
            format!("landmark count {} must lie in 1..={n}", ctx.count),
        ));
    }
    let (queries, keys) = match ctx.strategy {
        LandmarkStrategy::SegmentMeans => (q.segment_means(ctx.count)?, k.segment_means(ctx.count)?),
        LandmarkStrategy::Stcs => {
            let clusters = ctx
                .clusters
                .ok_or_else(|| Error::Config("STCS landmarks need a cluster map".into()))?;
            if clusters.n_clusters() * ctx.steps != ctx.count {
                return Err(Error::Config(format!(
                    "STCS yields {} clusters × {} steps landmarks, configured {}",
                    clusters.n_clusters(),
                    ctx.steps,
                    ctx.count
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            let ql = stcs_landmarks(&q.value(), clusters, ctx.steps, ctx.samples, &mut rng)?;
            let kl = stcs_landmarks(&k.value(), clusters, ctx.steps, ctx.samples, &mut rng)?;
            (q.constant(ql), k.constant(kl))
        }
    };
    Ok(LandmarkSet {
        queries,
        keys,
        strategy: ctx.strategy,
    })
}
