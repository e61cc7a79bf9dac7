//! Masked-MAE training with Adam, horizon metrics and gradient checking.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{make_windows, DatasetBundle, ForecastBatch, Normalizer, SplitRatios, TrafficFlow};
use crate::error::{Error, Result};
use crate::landmarks::{agglomerative_cluster, ClusterMap, LandmarkStrategy};
use crate::attention::AttentionVariant;
use crate::model::{forward, init_params, ForwardContext, ModelConfig, ModelParams};
use crate::ops::TensorOps;
use crate::tensor::Tensor;

/// Forecast steps (1-based) at which metrics are reported.
pub const HORIZONS: [usize; 3] = [3, 6, 12];

/// Targets smaller than this in magnitude are left out of MAPE.
pub const MAPE_THRESHOLD: f64 = 1e-6;

/// `Σ w ⊙ |pred − target|`.
fn weighted_abs_error<O: TensorOps>(pred: &O, target: &Tensor, weights: Tensor) -> Result<O> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("masked_mae", &pred.shape(), target.shape()));
    }
    pred.sub(&pred.constant(target.clone()))?
        .abs()
        .mul(&pred.constant(weights))
        .map(|x| x.sum())
}

/// Mean of `|pred − target|` over positions where `mask` is true.
pub fn masked_mae<O: TensorOps>(pred: &O, target: &Tensor, mask: &[bool]) -> Result<O> {
    if mask.len() != target.len() {
        return Err(Error::invalid(
            "masked_mae",
            format!("mask has {} entries for {} targets", mask.len(), target.len()),
        ));
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::invalid("masked_mae", "every position is masked"));
    }
    let w = 1.0 / count as f64;
    let weights = Tensor::new(target.shape(), mask.iter().map(|&m| if m { w } else { 0.0 }).collect())?;
    weighted_abs_error(pred, target, weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay: `p ← p − lr·wd·p`, then the
/// bias-corrected Adam step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ModelParams) -> Self {
        let zeros = || params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::invalid("adam_step", format!("no gradient for {name}")))?;
            if g.shape() != p.shape() || self.first.get(name).map(Tensor::shape) != Some(p.shape()) {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self.first.get_mut(name).unwrap().data_mut();
            let v = self.second.get_mut(name).unwrap().data_mut();
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                *x -= c.lr * c.weight_decay * *x;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                *x -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Not read from configuration files; callers set it.
    #[serde(skip)]
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    /// Caps the validation windows scored after each epoch (evenly spaced).
    pub max_val_windows: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            max_steps: None,
            seed: 0,
            optimizer: AdamConfig::default(),
            train_ratio: 0.7,
            val_ratio: 0.1,
            test_ratio: 0.2,
            max_val_windows: None,
        }
    }
}

impl TrainOptions {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train_ratio,
            val: self.val_ratio,
            test: self.test_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.optimizer.validate()?;
        self.ratios().validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation loss seen (the initial ones when
    /// no epoch ran).
    pub params: ModelParams,
    /// Parameters after the last optimizer step.
    pub last_params: ModelParams,
    pub normalizer: Normalizer,
    pub trace: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    /// Masked MAE on a fixed set of training windows before the first step.
    pub initial_probe_loss: f64,
    /// The same probe after the last step.
    pub final_probe_loss: f64,
}

/// Evenly spaced subset of at most `cap` items, in order.
fn spread(starts: &[usize], cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < starts.len() && c > 0 => (0..c).map(|i| starts[i * starts.len() / c]).collect(),
        _ => starts.to_vec(),
    }
}

/// Cluster map needed by the STCS variant, `None` otherwise.
pub fn clusters_for(cfg: &ModelConfig, bundle: &DatasetBundle) -> Result<Option<ClusterMap>> {
    if cfg.variant == AttentionVariant::Nystrom && cfg.landmark_strategy == LandmarkStrategy::Stcs {
        Ok(Some(agglomerative_cluster(&bundle.geometry, cfg.clusters)?))
    } else {
        Ok(None)
    }
}

/// Sum of per-window losses and parameter gradients for one batch. Each
/// window gets its own tape; results are reduced in window order.
fn batch_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &ForecastBatch,
    norm: &Normalizer,
    ctx: &ForwardContext<'_>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let valid = batch.mask.iter().filter(|m| **m).count() as f64;
    let mut total = 0.0;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for i in 0..batch.len() {
        let (target, mask) = batch.target(i);
        let target = norm.normalize_tensor(&target);
        let weights = Tensor::new(
            target.shape(),
            mask.iter().map(|&m| if m { 1.0 / valid } else { 0.0 }).collect(),
        )?;
        let tape = Tape::new();
        let bound = params.bind_tape(&tape);
        let sample_ctx = ForwardContext {
            seed: ctx.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ..*ctx
        };
        let pred = forward(&batch.input(i), &bound, cfg, &sample_ctx)?;
        let loss = weighted_abs_error(&pred, &target, weights)?;
        total += loss.value().item();
        let g = tape.backward(loss)?;
        for (name, var) in bound.iter() {
            let gi = g.get(var).expect("trainable leaf has a gradient");
            match grads.get_mut(name) {
                Some(acc) => *acc = acc.add(gi)?,
                None => {
                    grads.insert(name.clone(), gi.clone());
                }
            }
        }
    }
    Ok((total, grads))
}

/// Masked MAE on normalised values over `starts`, evaluated without a tape.
pub fn windows_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    flow: &TrafficFlow,
    norm: &Normalizer,
    starts: &[usize],
    clusters: Option<&ClusterMap>,
    seed: u64,
) -> Result<f64> {
    let bound = params.bind();
    let ctx = ForwardContext {
        clusters,
        seed,
        training: false,
    };
    let (mut sum, mut count) = (0.0, 0usize);
    for &s in starts {
        let batch = match ForecastBatch::build(flow, norm, &[s], cfg.input_steps, cfg.output_steps) {
            Ok(b) => b,
            Err(Error::Data(_)) => continue,
            Err(e) => return Err(e),
        };
        let (target, mask) = batch.target(0);
        let target = norm.normalize_tensor(&target);
        let pred = forward(&batch.input(0), &bound, cfg, &ctx)?;
        for ((p, t), m) in pred.data().iter().zip(target.data()).zip(mask) {
            if *m {
                sum += (p - t).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Data("no valid targets to score".into()));
    }
    Ok(sum / count as f64)
}

/// Trains from a fresh initialisation seeded by `opts.seed`.
pub fn train(cfg: &ModelConfig, bundle: &DatasetBundle, opts: &TrainOptions) -> Result<TrainOutcome> {
    let params = init_params(cfg, opts.seed)?;
    train_from(cfg, bundle, opts, params)
}

pub fn train_from(
    cfg: &ModelConfig,
    bundle: &DatasetBundle,
    opts: &TrainOptions,
    mut params: ModelParams,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    opts.validate()?;
    params.validate(cfg)?;
    if bundle.flow.nodes() != cfg.nodes {
        return Err(Error::Config(format!(
            "model expects {} nodes, bundle has {}",
            cfg.nodes,
            bundle.flow.nodes()
        )));
    }
    let flow = &bundle.flow;
    let splits = make_windows(flow, cfg.input_steps, cfg.output_steps, opts.ratios())?;
    let norm = Normalizer::fit(flow, splits.train.range.clone())?;
    let clusters = clusters_for(cfg, bundle)?;
    let clusters = clusters.as_ref();
    let probe = spread(&splits.train.starts, Some(32));
    let val = spread(&splits.val.starts, opts.max_val_windows);
    let eval_seed = opts.seed ^ 0xE7A1;

    let initial_probe_loss = windows_loss(&params, cfg, flow, &norm, &probe, clusters, eval_seed)?;
    let mut adam = Adam::new(opts.optimizer, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5EED_0FBA_7C00);
    let mut trace = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut order = splits.train.starts.clone();

    'epochs: for epoch in 1..=opts.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut batches) = (0.0, 0usize);
        let mut stop = false;
        for (b, chunk) in order.chunks(opts.batch_size).enumerate() {
            if opts.max_steps.is_some_and(|m| step_losses.len() >= m) {
                stop = true;
                break;
            }
            let batch = match ForecastBatch::build(flow, &norm, chunk, cfg.input_steps, cfg.output_steps) {
                Ok(batch) => batch,
                Err(Error::Data(_)) => continue,
                Err(e) => return Err(e),
            };
            let ctx = ForwardContext {
                clusters,
                seed: rng.random(),
                training: true,
            };
            let (loss, grads) = match batch_gradients(&params, cfg, &batch, &norm, &ctx) {
                Ok(r) => r,
                Err(Error::NonFinite { .. } | Error::Divergence { .. }) => (f64::NAN, BTreeMap::new()),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch: b + 1,
                    loss,
                });
            }
            adam.step(&mut params, &grads)?;
            step_losses.push(loss);
            epoch_loss += loss;
            batches += 1;
        }
        if batches > 0 {
            let val_loss = windows_loss(&params, cfg, flow, &norm, &val, clusters, eval_seed)?;
            trace.push(EpochRecord {
                epoch,
                train_loss: epoch_loss / batches as f64,
                val_loss,
                seconds: started.elapsed().as_secs_f64(),
            });
            if best.as_ref().is_none_or(|(v, _)| val_loss < *v) {
                best = Some((val_loss, params.clone()));
            }
        }
        if stop || opts.max_steps.is_some_and(|m| step_losses.len() >= m) {
            break 'epochs;
        }
    }

    let final_probe_loss = windows_loss(&params, cfg, flow, &norm, &probe, clusters, eval_seed)?;
    Ok(TrainOutcome {
        params: best.map(|(_, p)| p).unwrap_or_else(|| params.clone()),
        last_params: params,
        normalizer: norm,
        trace,
        step_losses,
        initial_probe_loss,
        final_probe_loss,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    pub count: usize,
    pub mape_count: usize,
}

impl HorizonMetrics {
    /// Metrics over the unmasked pairs. MAPE skips near-zero targets and is
    /// 0 when none remain.
    pub fn compute(horizon: usize, pred: &[f64], target: &[f64], mask: &[bool]) -> Result<Self> {
        if pred.len() != target.len() || mask.len() != target.len() {
            return Err(Error::invalid("metrics", "prediction, target and mask lengths differ"));
        }
        let (mut abs, mut sq, mut pct) = (0.0, 0.0, 0.0);
        let (mut count, mut mape_count) = (0usize, 0usize);
        for ((p, t), m) in pred.iter().zip(target).zip(mask) {
            if !m {
                continue;
            }
            let e = p - t;
            abs += e.abs();
            sq += e * e;
            count += 1;
            if t.abs() >= MAPE_THRESHOLD {
                pct += (e / t).abs();
                mape_count += 1;
            }
        }
        if count == 0 {
            return Err(Error::invalid("metrics", format!("no valid targets at horizon {horizon}")));
        }
        Ok(Self {
            horizon,
            mae: abs / count as f64,
            rmse: (sq / count as f64).sqrt(),
            mape: if mape_count == 0 { 0.0 } else { 100.0 * pct / mape_count as f64 },
            count,
            mape_count,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub horizons: Vec<HorizonMetrics>,
}

impl MetricReport {
    /// Builds a report from `[T',N,1]` forecasts and targets in original
    /// units. Horizons beyond `T'` are skipped.
    pub fn from_forecasts(preds: &[Tensor], targets: &[Tensor], masks: &[Vec<bool>]) -> Result<Self> {
        if preds.is_empty() {
            return Err(Error::invalid("evaluate", "empty test stream"));
        }
        if preds.len() != targets.len() || preds.len() != masks.len() {
            return Err(Error::invalid("evaluate", "forecast, target and mask counts differ"));
        }
        let steps = preds[0].shape()[0];
        let per_step = preds[0].len() / steps;
        let mut horizons = Vec::new();
        for h in HORIZONS.into_iter().filter(|&h| h <= steps) {
            let range = (h - 1) * per_step..h * per_step;
            let (mut p, mut t, mut m) = (Vec::new(), Vec::new(), Vec::new());
            for i in 0..preds.len() {
                if preds[i].shape() != targets[i].shape() || preds[i].shape() != preds[0].shape() {
                    return Err(Error::shape("evaluate", preds[i].shape(), targets[i].shape()));
                }
                p.extend_from_slice(&preds[i].data()[range.clone()]);
                t.extend_from_slice(&targets[i].data()[range.clone()]);
                m.extend_from_slice(&masks[i][range.clone()]);
            }
            horizons.push(HorizonMetrics::compute(h, &p, &t, &m)?);
        }
        Ok(Self { horizons })
    }

    pub fn get(&self, horizon: usize) -> Option<&HorizonMetrics> {
        self.horizons.iter().find(|h| h.horizon == horizon)
    }

    /// `horizon_<k>.<metric>: <value>` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for h in &self.horizons {
            let k = h.horizon;
            writeln!(s, "horizon_{k}.mae: {}", h.mae).unwrap();
            writeln!(s, "horizon_{k}.rmse: {}", h.rmse).unwrap();
            writeln!(s, "horizon_{k}.mape: {}", h.mape).unwrap();
            writeln!(s, "horizon_{k}.count: {}", h.count).unwrap();
            writeln!(s, "horizon_{k}.mape_count: {}", h.mape_count).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut by_h: BTreeMap<usize, [Option<f64>; 5]> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Parse {
                path: "metrics".into(),
                line: i + 1,
                msg: msg.into(),
            };
            let (key, value) = line.split_once(':').ok_or_else(|| bad("expected `key: value`"))?;
            let (h, metric) = key
                .trim()
                .strip_prefix("horizon_")
                .and_then(|k| k.split_once('.'))
                .ok_or_else(|| bad("expected `horizon_<k>.<metric>`"))?;
            let h: usize = h.parse().map_err(|_| bad("bad horizon"))?;
            let v: f64 = value.trim().parse().map_err(|_| bad("bad value"))?;
            let slot = match metric {
                "mae" => 0,
                "rmse" => 1,
                "mape" => 2,
                "count" => 3,
                "mape_count" => 4,
                _ => return Err(bad("unknown metric")),
            };
            by_h.entry(h).or_default()[slot] = Some(v);
        }
        let horizons = by_h
            .into_iter()
            .map(|(h, f)| match f {
                [Some(mae), Some(rmse), Some(mape), Some(count), Some(mape_count)] => Ok(HorizonMetrics {
                    horizon: h,
                    mae,
                    rmse,
                    mape,
                    count: count as usize,
                    mape_count: mape_count as usize,
                }),
                _ => Err(Error::Data(format!("incomplete metrics for horizon {h}"))),
            })
            .collect::<Result<_>>()?;
        Ok(Self { horizons })
    }
}

/// Denormalised forecast for one `[T,N,3]` window.
pub fn predict(
    params: &ModelParams,
    cfg: &ModelConfig,
    norm: &Normalizer,
    input: &Tensor,
    ctx: &ForwardContext<'_>,
) -> Result<Tensor> {
    let out = forward(input, &params.bind(), cfg, ctx)?;
    Ok(norm.denormalize_tensor(&out))
}

/// Scores `starts` in original units.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    bundle: &DatasetBundle,
    norm: &Normalizer,
    starts: &[usize],
    seed: u64,
) -> Result<MetricReport> {
    if starts.is_empty() {
        return Err(Error::invalid("evaluate", "empty test stream"));
    }
    let clusters = clusters_for(cfg, bundle)?;
    let ctx = ForwardContext {
        clusters: clusters.as_ref(),
        seed,
        training: false,
    };
    let (mut preds, mut targets, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    for &s in starts {
        let batch = match ForecastBatch::build(&bundle.flow, norm, &[s], cfg.input_steps, cfg.output_steps) {
            Ok(b) => b,
            Err(Error::Data(_)) => continue,
            Err(e) => return Err(e),
        };
        let (target, mask) = batch.target(0);
        preds.push(predict(params, cfg, norm, &batch.input(0), &ctx)?);
        targets.push(target);
        masks.push(mask.to_vec());
    }
    MetricReport::from_forecasts(&preds, &targets, &masks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-6;
/// Gradients smaller than this are compared in absolute terms; central
/// differences at `h = 1e-6` carry roundoff near 1e-9.
const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compares every parameter gradient of `L = Σ r ⊙ forward(x)` (fixed random
/// `r` and `x`) with central differences.
pub fn gradient_check(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let params = init_params(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6C4E);
    let n = cfg.nodes;
    let input = Tensor::from_fn(&[cfg.input_steps, n, 3], |i| match i % 3 {
        0 => rng.random_range(-2.0..2.0),
        1 => rng.random_range(1..=cfg.embedding.days_per_week) as f64,
        _ => rng.random_range(1..=cfg.embedding.steps_per_day) as f64,
    });
    let weights = Tensor::from_fn(&[cfg.output_steps, n, 1], |_| rng.random_range(-1.0..1.0));
    let ctx = ForwardContext::default();

    let loss_of = |p: &ModelParams| -> Result<f64> {
        let out = forward(&input, &p.bind(), cfg, &ctx)?;
        Ok(out.mul(&weights)?.sum())
    };

    let tape = Tape::new();
    let bound = params.bind_tape(&tape);
    let out = forward(&input, &bound, cfg, &ctx)?;
    let loss = out.mul(&out.constant(weights.clone()))?.sum();
    let grads = tape.backward(loss)?;
    let analytic: BTreeMap<String, Tensor> = bound
        .iter()
        .map(|(k, v)| (k.clone(), grads.get(v).expect("leaf gradient").clone()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_parameter: String::new(),
        checked: 0,
    };
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        for i in 0..t.len() {
            let orig = t.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + GRAD_CHECK_STEP;
            let up = loss_of(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - GRAD_CHECK_STEP;
            let down = loss_of(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic[name].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_parameter = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(x: f64) -> ModelParams {
        ModelParams::from_map(BTreeMap::from([("x".to_string(), Tensor::new(&[1], vec![x]).unwrap())]))
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("x".to_string(), Tensor::new(&[1], vec![g]).unwrap())])
    }

    #[test]
    fn masked_mae_example() {
        let pred = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let target = Tensor::new(&[2], vec![0.0, 3.0]).unwrap();
        let l = masked_mae(&pred, &target, &[false, true]).unwrap();
        assert_eq!(l.item(), 1.0);
        assert_eq!(masked_mae(&pred, &pred, &[true, true]).unwrap().item(), 0.0);
        assert!(masked_mae(&pred, &target, &[false, false]).is_err());
    }

    #[test]
    fn masked_mae_gradient() {
        let tape = Tape::new();
        let pred = tape.param(Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let target = Tensor::new(&[4], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let loss = masked_mae(&pred, &target, &[true, false, true, true]).unwrap();
        let g = tape.backward(loss).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(g.get(&pred).unwrap().data(), &[third, 0.0, -third, third]);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        for g in [0.3, -2.0, 1e-3] {
            let mut p = scalar_params(1.0);
            let mut adam = Adam::new(cfg, &p);
            adam.step(&mut p, &grad(g)).unwrap();
            let moved = 1.0 - p.get("x").unwrap().item();
            assert!((moved - cfg.lr * g.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_no_decay() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = scalar_params(0.7);
        let mut adam = Adam::new(cfg, &p);
        adam.step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.get("x").unwrap().item(), 0.7);
    }

    #[test]
    fn adam_quadratic() {
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = scalar_params(1.0);
        let mut adam = Adam::new(cfg, &p);
        for _ in 0..100 {
            let x = p.get("x").unwrap().item();
            adam.step(&mut p, &grad(x)).unwrap();
        }
        assert!(p.get("x").unwrap().item().abs() < 0.05);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = scalar_params(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let bad = BTreeMap::from([("x".to_string(), Tensor::zeros(&[2]))]);
        assert!(adam.step(&mut p, &bad).is_err());
    }

    #[test]
    fn hand_metrics() {
        let m = HorizonMetrics::compute(3, &[10.0], &[8.0], &[true]).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape), (2.0, 2.0, 25.0));
        let z = HorizonMetrics::compute(3, &[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap();
        assert_eq!((z.mae, z.rmse, z.mape), (0.0, 0.0, 0.0));
    }

    #[test]
    fn mape_skips_zero_targets() {
        let m = HorizonMetrics::compute(3, &[1.0, 3.0], &[0.0, 2.0], &[true, true]).unwrap();
        assert_eq!(m.mape_count, 1);
        assert_eq!(m.mape, 50.0);
        assert_eq!(m.mae, 1.0);
    }

    #[test]
    fn report_text_round_trip() {
        let r = MetricReport {
            horizons: vec![HorizonMetrics {
                horizon: 3,
                mae: 0.1 + 0.2,
                rmse: 1.0 / 3.0,
                mape: 12.5,
                count: 10,
                mape_count: 9,
            }],
        };
        assert_eq!(MetricReport::parse(&r.to_text()).unwrap(), r);
        assert!(MetricReport::parse("horizon_3.mae: x").is_err());
    }
}
