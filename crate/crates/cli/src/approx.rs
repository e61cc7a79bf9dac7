//! Nyström-versus-exact attention error on spatial-temporal token sets.
//!
//! Tokens mimic the model's input layout: `steps` time slices of `nodes`
//! sensors each (time-major). A sensor's features vary smoothly with its
//! position on a plane, so nearby sensors carry similar tokens and the
//! spatial clusters STCS relies on exist.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use stformer_core::attention::{exact_attention, nystrom_attention};
use stformer_core::landmarks::{
    agglomerative_cluster, make_landmark_set, LandmarkContext, LandmarkStrategy, NodeGeometry, DEFAULT_STCS_SAMPLES,
};
use stformer_core::linalg::{PinvConfig, CONVERGED_PINV_ITERATIONS};
use stformer_core::Tensor;

use crate::error::{CliError, Result};

pub const MAX_TOKENS: usize = 4096;
pub const DEFAULT_TRIALS: usize = 10;
pub const DEFAULT_HEAD_DIM: usize = 16;
/// Projection weights are `N(0, gain²/width)`. Sharper score matrices make
/// the landmark kernel nearly singular, and its converged pseudoinverse then
/// amplifies rather than removes error.
pub const PROJECTION_GAIN: f64 = 0.5;
/// Denominators of `n` giving the landmark counts in the report.
pub const FRACTIONS: [usize; 5] = [16, 8, 4, 2, 1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxRecord {
    pub strategy: LandmarkStrategy,
    pub n: usize,
    pub m: usize,
    pub trials: usize,
    pub pinv_iterations: usize,
    /// Mean over trials of the mean absolute output error.
    pub mean_abs_error: f64,
    /// Largest absolute output error over all trials.
    pub max_abs_error: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ApproxOptions {
    pub n: usize,
    pub seed: u64,
    pub trials: usize,
    pub pinv_iterations: usize,
    pub head_dim: usize,
}

impl ApproxOptions {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            trials: DEFAULT_TRIALS,
            pinv_iterations: CONVERGED_PINV_ITERATIONS,
            head_dim: DEFAULT_HEAD_DIM,
        }
    }
}

/// Splits `n` into `(nodes, steps)` so that every reported landmark count
/// is a whole number of clusters per step. Steps are capped at 12.
pub fn token_layout(n: usize) -> Result<(usize, usize)> {
    if n == 0 || !n.is_multiple_of(16) {
        return Err(CliError::Usage(format!("--n must be a positive multiple of 16, got {n}")));
    }
    if n > MAX_TOKENS {
        return Err(CliError::Usage(format!(
            "--n {n} exceeds {MAX_TOKENS}; the exact score matrix would be too large"
        )));
    }
    let base = n / 16;
    let steps = (1..=12).rev().find(|t| base.is_multiple_of(*t)).unwrap_or(1);
    Ok((n / steps, steps))
}

/// Node positions scattered over a 100×100 plane.
pub struct TokenScene {
    pub nodes: usize,
    pub steps: usize,
    pub geometry: NodeGeometry,
    coords: Vec<(f64, f64)>,
}

impl TokenScene {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        let (nodes, steps) = token_layout(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<(f64, f64)> = (0..nodes)
            .map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)))
            .collect();
        Ok(Self {
            nodes,
            steps,
            geometry: NodeGeometry::from_coordinates(&coords),
            coords,
        })
    }

    /// One draw of `n×d` query, key and value matrices.
    pub fn sample_qkv(&self, d: usize, rng: &mut impl Rng) -> (Tensor, Tensor, Tensor) {
        let width = 2 * d;
        let freq = Normal::new(0.0, 1.0 / 25.0).unwrap();
        let waves: Vec<(f64, f64, f64)> = (0..width)
            .map(|_| (freq.sample(rng), freq.sample(rng), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        let clock: Vec<f64> = (0..width).map(|_| rng.random_range(0.5..2.0)).collect();
        let n = self.nodes * self.steps;
        let x = Tensor::from_fn(&[n, width], |i| {
            let (row, j) = (i / width, i % width);
            let (t, k) = (row / self.nodes, row % self.nodes);
            let (px, py) = self.coords[k];
            let (a, b, phase) = waves[j];
            let space = (a * px + b * py + phase).sin();
            let time = 0.5 * (clock[j] * t as f64 + phase).cos();
            space + time
        });
        let x = x.add(&Tensor::from_fn(&[n, width], |_| 0.05 * rng.sample::<f64, _>(StandardNormal))).unwrap();
        let scale = PROJECTION_GAIN / (width as f64).sqrt();
        let mut project = || {
            let w = Tensor::from_fn(&[width, d], |_| scale * rng.sample::<f64, _>(StandardNormal));
            x.matmul(&w).unwrap()
        };
        (project(), project(), project())
    }
}

/// One record per (strategy, m) for m = n/16, n/8, n/4, n/2, n.
pub fn approx_report(opts: &ApproxOptions) -> Result<Vec<ApproxRecord>> {
    if opts.trials == 0 || opts.head_dim == 0 {
        return Err(CliError::Usage("trials and head dimension must be positive".into()));
    }
    let pinv = PinvConfig::new(opts.pinv_iterations)?;
    let scene = TokenScene::new(opts.n, opts.seed)?;
    let counts: Vec<usize> = FRACTIONS.iter().map(|f| opts.n / f).collect();
    let cluster_maps = counts
        .iter()
        .map(|m| agglomerative_cluster(&scene.geometry, m / scene.steps))
        .collect::<stformer_core::Result<Vec<_>>>()?;

    let strategies = [LandmarkStrategy::SegmentMeans, LandmarkStrategy::Stcs];
    let mut sums = vec![[(0.0f64, 0.0f64); 2]; counts.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x00A9_9E0F);
    for trial in 0..opts.trials {
        let (q, k, v) = scene.sample_qkv(opts.head_dim, &mut rng);
        let exact = exact_attention(&q, &k, &v)?;
        for (ci, &m) in counts.iter().enumerate() {
            for (si, strategy) in strategies.iter().enumerate() {
                let ctx = match strategy {
                    LandmarkStrategy::SegmentMeans => LandmarkContext::segment_means(m),
                    LandmarkStrategy::Stcs => LandmarkContext::stcs(
                        &cluster_maps[ci],
                        scene.steps,
                        DEFAULT_STCS_SAMPLES,
                        opts.seed ^ ((trial as u64) << 8) ^ ci as u64,
                    ),
                };
                let set = make_landmark_set(&q, &k, &ctx)?;
                let approx = nystrom_attention(&q, &k, &v, &set, &pinv)?;
                let diff = approx.sub(&exact)?.abs();
                let slot = &mut sums[ci][si];
                slot.0 += diff.mean();
                slot.1 = slot.1.max(diff.max_abs());
            }
        }
    }

    let mut out = Vec::new();
    for (si, &strategy) in strategies.iter().enumerate() {
        for (ci, &m) in counts.iter().enumerate() {
            let (sum, max) = sums[ci][si];
            out.push(ApproxRecord {
                strategy,
                n: opts.n,
                m,
                trials: opts.trials,
                pinv_iterations: opts.pinv_iterations,
                mean_abs_error: sum / opts.trials as f64,
                max_abs_error: max,
            });
        }
    }
    Ok(out)
}

pub fn find(records: &[ApproxRecord], strategy: LandmarkStrategy, m: usize) -> Option<&ApproxRecord> {
    records.iter().find(|r| r.strategy == strategy && r.m == m)
}
