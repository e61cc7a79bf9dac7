//! Forward-time scaling of the attention sublayer with sequence length.
//!
//! Sizes double from 768 tokens (12 steps of 64 sensors). Nyström runs with
//! a fixed number of STCS landmarks at every size, so its time should grow
//! about linearly; exact attention should grow about quadratically.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stformer_core::attention::{multi_head, AttentionConfig, AttentionVariant, ProjectionWeights};
use stformer_core::landmarks::{agglomerative_cluster, ClusterMap, LandmarkContext, NodeGeometry, DEFAULT_STCS_SAMPLES};
use stformer_core::linalg::PinvConfig;
use stformer_core::model::{forward, init_params, ForwardContext, ModelConfig};
use stformer_core::Tensor;

use crate::alloc;
use crate::error::{CliError, Result};

pub const BASE_TOKENS: usize = 768;
pub const STEPS: usize = 12;
pub const DEFAULT_LANDMARKS: usize = 72;
pub const MIN_TRIALS: usize = 9;
pub const MAX_TRIALS: usize = 101;
pub const WARMUP_TRIALS: usize = 2;
pub const DEFAULT_EXACT_MAX_N: usize = 3072;
pub const DEFAULT_MEMORY_BUDGET: u64 = 4 << 30;
/// A median shorter than this many timer ticks triggers more trials.
const RESOLUTION_FACTOR: u32 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub variant: AttentionVariant,
    pub n: usize,
    pub m: usize,
    pub trials: usize,
    pub median_seconds: f64,
    /// Peak bytes allocated above the pre-call level during one forward.
    pub peak_bytes: u64,
    /// Median forward time of the whole model, when requested.
    pub full_model_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeRecord {
    pub variant: AttentionVariant,
    pub slope: f64,
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub max_n: usize,
    pub landmarks: usize,
    pub trials: usize,
    pub exact_max_n: usize,
    pub memory_budget: u64,
    pub full_model: bool,
    pub seed: u64,
}

impl BenchOptions {
    pub fn new(max_n: usize) -> Self {
        Self {
            max_n,
            landmarks: DEFAULT_LANDMARKS,
            trials: MIN_TRIALS,
            exact_max_n: DEFAULT_EXACT_MAX_N,
            memory_budget: DEFAULT_MEMORY_BUDGET,
            full_model: false,
            seed: 0,
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::successors(Some(BASE_TOKENS), |n| Some(n * 2))
            .take_while(|&n| n <= self.max_n)
            .collect()
    }

    /// Exact attention runs only below the size cap and when one head's
    /// `n×n` score matrix fits the memory budget.
    pub fn runs_exact(&self, n: usize) -> bool {
        let bytes = (n as u64) * (n as u64) * std::mem::size_of::<f64>() as u64;
        n <= self.exact_max_n && bytes <= self.memory_budget
    }

    fn validate(&self) -> Result<()> {
        if self.max_n < BASE_TOKENS {
            return Err(CliError::Usage(format!("--max-n must be at least {BASE_TOKENS}")));
        }
        if self.landmarks == 0 || !self.landmarks.is_multiple_of(STEPS) {
            return Err(CliError::Usage(format!(
                "--landmarks must be a positive multiple of {STEPS} (one per cluster per step)"
            )));
        }
        if self.trials < MIN_TRIALS || self.trials > MAX_TRIALS {
            return Err(CliError::Usage(format!("--trials must lie in {MIN_TRIALS}..={MAX_TRIALS}")));
        }
        Ok(())
    }
}

/// The smallest nonzero step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Median wall time of `f` after discarding warmup runs. Trials grow
/// (up to [`MAX_TRIALS`]) while the median is too close to the timer
/// resolution to trust.
pub fn time_median(trials: usize, resolution: Duration, mut f: impl FnMut()) -> (f64, usize) {
    let mut trials = trials;
    loop {
        for _ in 0..WARMUP_TRIALS {
            f();
        }
        let times: Vec<f64> = (0..trials)
            .map(|_| {
                let t = Instant::now();
                f();
                t.elapsed().as_secs_f64()
            })
            .collect();
        let m = median(&times);
        if m >= (resolution * RESOLUTION_FACTOR).as_secs_f64() || trials >= MAX_TRIALS {
            return (m, trials);
        }
        trials = (trials * 2 + 1).min(MAX_TRIALS);
    }
}

/// Least-squares slope of `ln time` against `ln n`.
pub fn log_log_slope(points: &[(usize, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Some(sxy / sxx)
}

fn attention_config(variant: AttentionVariant, model: &ModelConfig) -> AttentionConfig {
    AttentionConfig {
        model_dim: model.model_dim(),
        heads: model.heads,
        variant,
        pinv: PinvConfig::new(model.pinv_iterations).expect("default iterations are valid"),
    }
}

fn random_weights(d: usize, rng: &mut ChaCha8Rng) -> ProjectionWeights<Tensor> {
    let s = 1.0 / (d as f64).sqrt();
    let mut w = || Tensor::from_fn(&[d, d], |_| rng.random_range(-s..s));
    ProjectionWeights {
        w_q: w(),
        b_q: Tensor::zeros(&[d]),
        w_k: w(),
        b_k: Tensor::zeros(&[d]),
        w_v: w(),
        b_v: Tensor::zeros(&[d]),
        w_out: w(),
        b_out: Tensor::zeros(&[d]),
    }
}

struct SizeCase {
    n: usize,
    nodes: usize,
    clusters: ClusterMap,
    tokens: Tensor,
}

fn size_case(n: usize, opts: &BenchOptions, d: usize, rng: &mut ChaCha8Rng) -> Result<SizeCase> {
    let nodes = n / STEPS;
    let coords: Vec<(f64, f64)> = (0..nodes)
        .map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)))
        .collect();
    let clusters = agglomerative_cluster(&NodeGeometry::from_coordinates(&coords), opts.landmarks / STEPS)?;
    let tokens = Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0));
    Ok(SizeCase {
        n,
        nodes,
        clusters,
        tokens,
    })
}

fn bench_one(case: &SizeCase, variant: AttentionVariant, opts: &BenchOptions, model: &ModelConfig, weights: &ProjectionWeights<Tensor>, resolution: Duration) -> Result<BenchRecord> {
    let cfg = attention_config(variant, model);
    let ctx = LandmarkContext::stcs(&case.clusters, STEPS, DEFAULT_STCS_SAMPLES, opts.seed);
    let landmarks = (variant == AttentionVariant::Nystrom).then_some(&ctx);
    let run = || multi_head(&case.tokens, &cfg, weights, landmarks).map(|_| ());

    let before = alloc::reset_peak();
    run()?;
    let peak_bytes = alloc::peak_bytes().saturating_sub(before) as u64;

    let (median_seconds, trials) = time_median(opts.trials, resolution, || run().expect("checked above"));

    let full_model_seconds = if opts.full_model {
        let model = ModelConfig {
            nodes: case.nodes,
            variant,
            landmarks: opts.landmarks,
            clusters: opts.landmarks / STEPS,
            ..model.clone()
        };
        let params = init_params(&model, opts.seed)?;
        let bound = params.bind();
        let input = Tensor::from_fn(&[STEPS, case.nodes, 3], |i| match i % 3 {
            0 => ((i / 3) as f64).sin(),
            1 => 1.0,
            _ => 1.0 + (i / 3 / case.nodes) as f64,
        });
        let fctx = ForwardContext {
            clusters: Some(&case.clusters),
            seed: opts.seed,
            training: false,
        };
        let call = || forward(&input, &bound, &model, &fctx).map(|_| ());
        call()?;
        Some(time_median(opts.trials, resolution, || call().expect("checked above")).0)
    } else {
        None
    };

    Ok(BenchRecord {
        variant,
        n: case.n,
        m: if variant == AttentionVariant::Nystrom { opts.landmarks } else { case.n },
        trials,
        median_seconds,
        peak_bytes,
        full_model_seconds,
    })
}

/// Records for every size, Nyström first then exact, plus one slope per
/// variant that ran at two or more sizes.
pub fn bench_scaling(opts: &BenchOptions) -> Result<(Vec<BenchRecord>, Vec<SlopeRecord>)> {
    opts.validate()?;
    let model = ModelConfig::metr_la(AttentionVariant::Nystrom);
    let d = model.model_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let weights = random_weights(d, &mut rng);
    let resolution = timer_resolution();

    let mut records = Vec::new();
    for n in opts.sizes() {
        let case = size_case(n, opts, d, &mut rng)?;
        records.push(bench_one(&case, AttentionVariant::Nystrom, opts, &model, &weights, resolution)?);
        if opts.runs_exact(n) {
            records.push(bench_one(&case, AttentionVariant::Exact, opts, &model, &weights, resolution)?);
        }
    }
    records.sort_by_key(|r| (r.variant == AttentionVariant::Exact, r.n));

    let mut slopes = Vec::new();
    for variant in [AttentionVariant::Nystrom, AttentionVariant::Exact] {
        let points: Vec<(usize, f64)> = records
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| (r.n, r.median_seconds))
            .collect();
        if let Some(slope) = log_log_slope(&points) {
            slopes.push(SlopeRecord { variant, slope });
        }
    }
    Ok((records, slopes))
}
