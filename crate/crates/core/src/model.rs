//! The forecasting network.
//!
//! ```text
//! [T×N×3] ─embed→ [(T·N)×d_h] ─L× encoder block→ [(T·N)×d_h]
//!         ─per node, concat T rows→ [N×(T·d_h)] ─linear→ [N×T'] → [T'×N×1]
//! ```
//!
//! The embedding concatenates a linear projection of the measured value, a
//! day-of-week lookup, a time-of-day lookup (each `d_f` wide) and the slice of
//! a learnable `T×N×d_a` adaptive embedding, so `d_h = 3·d_f + d_a`. Tokens
//! are flattened time-major. The exact and Nyström models share every
//! parameter and differ only in the attention kernel.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head, AttentionConfig, AttentionVariant, ProjectionWeights};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::landmarks::{ClusterMap, LandmarkContext, LandmarkStrategy, DEFAULT_STCS_SAMPLES};
use crate::linalg::{PinvConfig, DEFAULT_PINV_ITERATIONS};
use crate::ops::TensorOps;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub feature_dim: usize,
    pub adaptive_dim: usize,
    pub steps_per_day: usize,
    pub days_per_week: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            feature_dim: 24,
            adaptive_dim: 80,
            steps_per_day: 288,
            days_per_week: 7,
        }
    }
}

impl EmbeddingConfig {
    pub fn model_dim(&self) -> usize {
        3 * self.feature_dim + self.adaptive_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub nodes: usize,
    pub input_steps: usize,
    pub output_steps: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub variant: AttentionVariant,
    pub landmark_strategy: LandmarkStrategy,
    pub landmarks: usize,
    pub clusters: usize,
    pub stcs_samples: usize,
    pub pinv_iterations: usize,
    pub embedding: EmbeddingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            nodes: 207,
            input_steps: 12,
            output_steps: 12,
            layers: 3,
            heads: 4,
            ff_width: 256,
            activation: Activation::Relu,
            dropout: 0.0,
            variant: AttentionVariant::Exact,
            landmark_strategy: LandmarkStrategy::Stcs,
            landmarks: 72,
            clusters: 6,
            stcs_samples: DEFAULT_STCS_SAMPLES,
            pinv_iterations: DEFAULT_PINV_ITERATIONS,
            embedding: EmbeddingConfig::default(),
        }
    }
}

impl ModelConfig {
    /// The published METR-LA setup (207 sensors).
    pub fn metr_la(variant: AttentionVariant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn model_dim(&self) -> usize {
        self.embedding.model_dim()
    }

    pub fn tokens(&self) -> usize {
        self.nodes * self.input_steps
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.model_dim(),
            heads: self.heads,
            variant: self.variant,
            pinv: PinvConfig {
                iterations: self.pinv_iterations,
            },
        }
    }

    /// Token count after tail padding, when segment means needs it.
    pub fn padded_tokens(&self) -> usize {
        let n = self.tokens();
        if self.variant == AttentionVariant::Nystrom
            && self.landmark_strategy == LandmarkStrategy::SegmentMeans
            && self.landmarks > 0
        {
            n.div_ceil(self.landmarks) * self.landmarks
        } else {
            n
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.nodes == 0 || self.input_steps == 0 || self.output_steps == 0 {
            return fail("nodes, input_steps and output_steps must be at least 1".into());
        }
        if self.embedding.feature_dim == 0 || self.ff_width == 0 {
            return fail("feature_dim and ff_width must be at least 1".into());
        }
        if self.embedding.steps_per_day == 0 || self.embedding.days_per_week == 0 {
            return fail("steps_per_day and days_per_week must be at least 1".into());
        }
        if !(0.0..=0.5).contains(&self.dropout) {
            return fail(format!("dropout {} outside 0..=0.5", self.dropout));
        }
        self.attention().validate()?;
        if self.variant == AttentionVariant::Nystrom {
            if self.landmarks == 0 {
                return fail("landmarks must be at least 1".into());
            }
            match self.landmark_strategy {
                LandmarkStrategy::SegmentMeans => {
                    if self.landmarks > self.padded_tokens() {
                        return fail(format!(
                            "{} landmarks exceed {} tokens",
                            self.landmarks,
                            self.padded_tokens()
                        ));
                    }
                }
                LandmarkStrategy::Stcs => {
                    if self.clusters == 0 || self.clusters > self.nodes {
                        return fail(format!("clusters {} must lie in 1..={}", self.clusters, self.nodes));
                    }
                    if self.clusters * self.input_steps != self.landmarks {
                        return fail(format!(
                            "STCS produces clusters × input_steps = {} landmarks but landmarks = {}",
                            self.clusters * self.input_steps,
                            self.landmarks
                        ));
                    }
                    if self.stcs_samples == 0 {
                        return fail("stcs_samples must be at least 1".into());
                    }
                }
            }
        }
        Ok(())
    }

    /// Whether parameters trained under `other` can be loaded under `self`.
    /// Only the attention kernel settings may differ.
    pub fn check_compatible(&self, other: &ModelConfig) -> Result<()> {
        let checks = [
            ("nodes", self.nodes, other.nodes),
            ("input_steps", self.input_steps, other.input_steps),
            ("output_steps", self.output_steps, other.output_steps),
            ("layers", self.layers, other.layers),
            ("ff_width", self.ff_width, other.ff_width),
            ("feature_dim", self.embedding.feature_dim, other.embedding.feature_dim),
            ("adaptive_dim", self.embedding.adaptive_dim, other.embedding.adaptive_dim),
            ("steps_per_day", self.embedding.steps_per_day, other.embedding.steps_per_day),
            ("days_per_week", self.embedding.days_per_week, other.embedding.days_per_week),
        ];
        for (name, a, b) in checks {
            if a != b {
                return Err(Error::Checkpoint(format!("{name} mismatch: checkpoint has {b}, expected {a}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Glorot,
    Zeros,
    Ones,
    SmallNormal,
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.model_dim();
    let e = &cfg.embedding;
    let mut specs = vec![
        ("embed.value.weight".to_string(), vec![1, e.feature_dim], Init::Glorot),
        ("embed.value.bias".to_string(), vec![e.feature_dim], Init::Zeros),
        ("embed.day_of_week".to_string(), vec![e.days_per_week, e.feature_dim], Init::Glorot),
        ("embed.time_of_day".to_string(), vec![e.steps_per_day, e.feature_dim], Init::Glorot),
        (
            "embed.adaptive".to_string(),
            vec![cfg.input_steps, cfg.nodes, e.adaptive_dim],
            Init::SmallNormal,
        ),
    ];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        specs.push((p("norm1.gain"), vec![d], Init::Ones));
        specs.push((p("norm1.bias"), vec![d], Init::Zeros));
        for w in ["q", "k", "v", "out"] {
            specs.push((p(&format!("attn.w_{w}")), vec![d, d], Init::Glorot));
            specs.push((p(&format!("attn.b_{w}")), vec![d], Init::Zeros));
        }
        specs.push((p("norm2.gain"), vec![d], Init::Ones));
        specs.push((p("norm2.bias"), vec![d], Init::Zeros));
        specs.push((p("ff.w1"), vec![d, cfg.ff_width], Init::Glorot));
        specs.push((p("ff.b1"), vec![cfg.ff_width], Init::Zeros));
        specs.push((p("ff.w2"), vec![cfg.ff_width, d], Init::Glorot));
        specs.push((p("ff.b2"), vec![d], Init::Zeros));
    }
    specs.push((
        "head.weight".to_string(),
        vec![cfg.input_steps * d, cfg.output_steps],
        Init::Glorot,
    ));
    specs.push(("head.bias".to_string(), vec![cfg.output_steps], Init::Zeros));
    specs
}

/// All learnable tensors of the model, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Checks that exactly the tensors `cfg` needs are present with the right shapes.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        if specs.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for (name, shape, _) in specs {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Plain tensors for tape-free evaluation.
    pub fn bind(&self) -> Bound<Tensor> {
        Bound {
            vars: self.tensors.clone(),
        }
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind_tape<'t>(&self, tape: &'t Tape) -> Bound<Var<'t>> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }
}

/// Parameters materialised in one execution context.
pub struct Bound<O> {
    vars: BTreeMap<String, O>,
}

impl<O: TensorOps> Bound<O> {
    pub fn get(&self, name: &str) -> Result<&O> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &O)> {
        self.vars.iter()
    }

    fn projection(&self, layer: usize) -> Result<ProjectionWeights<O>> {
        let g = |s: &str| self.get(&format!("layers.{layer}.attn.{s}")).cloned();
        Ok(ProjectionWeights {
            w_q: g("w_q")?,
            b_q: g("b_q")?,
            w_k: g("w_k")?,
            b_k: g("b_k")?,
            w_v: g("w_v")?,
            b_v: g("b_v")?,
            w_out: g("w_out")?,
            b_out: g("b_out")?,
        })
    }
}

/// Glorot-uniform matrices, zero biases, unit layer-norm gains and a
/// `0.01·N(0, 1)` adaptive embedding.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape, init) in param_specs(cfg) {
        let t = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::full(&shape, 1.0),
            Init::SmallNormal => Tensor::from_fn(&shape, |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.01 * z
            }),
            Init::Glorot => {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                Tensor::from_fn(&shape, |_| rng.random_range(-limit..limit))
            }
        };
        tensors.insert(name, t);
    }
    Ok(ModelParams { tensors })
}

/// Per-call inputs to the forward pass besides parameters and data.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardContext<'a> {
    pub clusters: Option<&'a ClusterMap>,
    /// Seeds STCS sampling and dropout masks.
    pub seed: u64,
    /// Enables dropout.
    pub training: bool,
}

fn flag_indices(input: &Tensor, feature: usize, upper: usize, name: &str) -> Result<Vec<usize>> {
    let (rows, _) = input.row_view();
    (0..rows)
        .map(|r| {
            let v = input.at(r, feature);
            if v.fract() != 0.0 || v < 1.0 || v > upper as f64 {
                Err(Error::invalid(
                    "embed",
                    format!("{name} flag {v} at token {r} outside 1..={upper}"),
                ))
            } else {
                Ok(v as usize - 1)
            }
        })
        .collect()
}

/// Maps a `[T × N × 3]` window (value, day-of-week, time-of-day) to
/// `(T·N) × d_h` time-major tokens.
pub fn embed<O: TensorOps>(input: &Tensor, params: &Bound<O>, cfg: &ModelConfig) -> Result<O> {
    let expected = [cfg.input_steps, cfg.nodes, 3];
    if input.shape() != expected {
        return Err(Error::shape("embed", input.shape(), &expected));
    }
    let n = cfg.tokens();
    let values: Vec<f64> = (0..n).map(|r| input.at(r, 0)).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "embed" });
    }
    let dow = flag_indices(input, 1, cfg.embedding.days_per_week, "day-of-week")?;
    let tod = flag_indices(input, 2, cfg.embedding.steps_per_day, "time-of-day")?;

    let w_value = params.get("embed.value.weight")?;
    let value = w_value
        .constant(Tensor::new(&[n, 1], values)?)
        .matmul(w_value)?
        .add_row_bias(params.get("embed.value.bias")?)?;
    let day = params.get("embed.day_of_week")?.embedding(&dow)?;
    let time = params.get("embed.time_of_day")?.embedding(&tod)?;
    let adaptive = params
        .get("embed.adaptive")?
        .reshape(&[n, cfg.embedding.adaptive_dim])?;
    O::concat_last(&[value, day, time, adaptive])
}

fn dropout<O: TensorOps>(x: O, rate: f64, rng: &mut ChaCha8Rng) -> Result<O> {
    let keep = 1.0 - rate;
    let mask = Tensor::from_fn(&x.shape(), |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    x.mul(&x.constant(mask))
}

/// Pre-norm residual block: attention then feed-forward, each as
/// `x + sublayer(layer_norm(x))`.
pub fn encoder_block<O: TensorOps>(
    tokens: &O,
    params: &Bound<O>,
    layer: usize,
    cfg: &ModelConfig,
    ctx: &ForwardContext<'_>,
) -> Result<O> {
    let p = |s: &str| params.get(&format!("layers.{layer}.{s}"));
    let weights = params.projection(layer)?;
    let landmarks = match cfg.variant {
        AttentionVariant::Exact => None,
        AttentionVariant::Nystrom => Some(match cfg.landmark_strategy {
            LandmarkStrategy::SegmentMeans => LandmarkContext::segment_means(cfg.landmarks),
            LandmarkStrategy::Stcs => {
                let clusters = ctx
                    .clusters
                    .ok_or_else(|| Error::Config("STCS landmarks need a cluster map".into()))?;
                LandmarkContext::stcs(clusters, cfg.input_steps, cfg.stcs_samples, ctx.seed)
            }
        }),
    }
    .map(|c| c.derive(1 + layer as u64 * 0x1_0000));

    let mut rng = (ctx.training && cfg.dropout > 0.0)
        .then(|| ChaCha8Rng::seed_from_u64(ctx.seed ^ (0xD809 + layer as u64)));

    let normed = tokens.layer_norm(p("norm1.gain")?, p("norm1.bias")?)?;
    let mut attended = multi_head(&normed, &cfg.attention(), &weights, landmarks.as_ref())?;
    if let Some(rng) = rng.as_mut() {
        attended = dropout(attended, cfg.dropout, rng)?;
    }
    let hidden = tokens.add(&attended)?;

    let normed = hidden.layer_norm(p("norm2.gain")?, p("norm2.bias")?)?;
    let inner = normed.matmul(p("ff.w1")?)?.add_row_bias(p("ff.b1")?)?;
    let inner = match cfg.activation {
        Activation::Relu => inner.relu(),
        Activation::Gelu => inner.gelu(),
    };
    let mut ff = inner.matmul(p("ff.w2")?)?.add_row_bias(p("ff.b2")?)?;
    if let Some(rng) = rng.as_mut() {
        ff = dropout(ff, cfg.dropout, rng)?;
    }
    hidden.add(&ff)
}

/// Full forward pass producing a `[T' × N × 1]` forecast.
pub fn forward<O: TensorOps>(
    input: &Tensor,
    params: &Bound<O>,
    cfg: &ModelConfig,
    ctx: &ForwardContext<'_>,
) -> Result<O> {
    let n = cfg.tokens();
    let d = cfg.model_dim();
    let mut x = embed(input, params, cfg)?;
    let padded = cfg.padded_tokens();
    if padded != n {
        x = x.pad_rows(padded)?;
    }
    for layer in 0..cfg.layers {
        x = encoder_block(&x, params, layer, cfg, ctx)?;
    }
    if padded != n {
        x = x.slice_rows(0, n)?;
    }
    let per_node = x
        .reshape(&[cfg.input_steps, cfg.nodes, d])?
        .swap_leading()?
        .reshape(&[cfg.nodes, cfg.input_steps * d])?;
    let out = per_node
        .matmul(params.get("head.weight")?)?
        .add_row_bias(params.get("head.bias")?)?;
    out.transpose()?.reshape(&[cfg.output_steps, cfg.nodes, 1])
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ModelConfig,
    params: Vec<NamedTensor>,
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        params: params
            .iter()
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&file)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a checkpoint and validates its tensors against its own config.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let mut tensors = BTreeMap::new();
    for nt in file.params {
        let t = Tensor::new(&nt.shape, nt.data)?;
        if tensors.insert(nt.name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {}", nt.name)));
        }
    }
    let params = ModelParams { tensors };
    params.validate(&file.config)?;
    Ok((file.config, params))
}

/// Loads a checkpoint for use under `cfg`, which may pick a different
/// attention variant but must agree on every shape.
pub fn load_checkpoint_for(path: &Path, cfg: &ModelConfig) -> Result<ModelParams> {
    let (saved, params) = load_checkpoint(path)?;
    cfg.check_compatible(&saved)?;
    params.validate(cfg)?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(variant: AttentionVariant) -> ModelConfig {
        ModelConfig {
            nodes: 4,
            input_steps: 3,
            output_steps: 3,
            layers: 1,
            heads: 1,
            ff_width: 8,
            variant,
            landmark_strategy: LandmarkStrategy::SegmentMeans,
            landmarks: 12,
            clusters: 2,
            embedding: EmbeddingConfig {
                feature_dim: 2,
                adaptive_dim: 4,
                ..EmbeddingConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn window(cfg: &ModelConfig, dow: f64) -> Tensor {
        Tensor::from_fn(&[cfg.input_steps, cfg.nodes, 3], |i| match i % 3 {
            0 => ((i / 3) as f64 * 0.37).sin(),
            1 => dow,
            _ => 1.0 + ((i / 3 / cfg.nodes) as f64),
        })
    }

    #[test]
    fn metr_la_token_matrix() {
        let cfg = ModelConfig::metr_la(AttentionVariant::Exact);
        let params = init_params(&cfg, 0).unwrap();
        let input = window(&cfg, 3.0);
        let tokens = embed(&input, &params.bind(), &cfg).unwrap();
        assert_eq!(tokens.shape(), &[2484, 152]);
    }

    #[test]
    fn zero_parameters_zero_embedding() {
        let cfg = tiny(AttentionVariant::Exact);
        let mut params = init_params(&cfg, 1).unwrap();
        for (name, t) in params.iter_mut() {
            if name.starts_with("embed.") {
                *t = Tensor::zeros(t.shape());
            }
        }
        let mut input = window(&cfg, 2.0);
        for (i, v) in input.data_mut().iter_mut().enumerate() {
            if i % 3 == 0 {
                *v = 0.0;
            }
        }
        let tokens = embed(&input, &params.bind(), &cfg).unwrap();
        assert!(tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn day_of_week_touches_only_its_slice() {
        let cfg = tiny(AttentionVariant::Exact);
        let params = init_params(&cfg, 2).unwrap();
        let a = embed(&window(&cfg, 1.0), &params.bind(), &cfg).unwrap();
        let b = embed(&window(&cfg, 5.0), &params.bind(), &cfg).unwrap();
        let f = cfg.embedding.feature_dim;
        for r in 0..cfg.tokens() {
            for c in 0..cfg.model_dim() {
                let differs = a.at(r, c) != b.at(r, c);
                assert_eq!(differs, (f..2 * f).contains(&c), "row {r} col {c}");
            }
        }
    }

    #[test]
    fn flag_out_of_range() {
        let cfg = tiny(AttentionVariant::Exact);
        let params = init_params(&cfg, 2).unwrap();
        assert!(embed(&window(&cfg, 8.0), &params.bind(), &cfg).is_err());
        assert!(embed(&window(&cfg, 0.0), &params.bind(), &cfg).is_err());
        let mut input = window(&cfg, 1.0);
        input.data_mut()[2] = 289.0;
        assert!(embed(&input, &params.bind(), &cfg).is_err());
    }

    #[test]
    fn zero_sublayers_are_identity() {
        let cfg = tiny(AttentionVariant::Exact);
        let mut params = init_params(&cfg, 3).unwrap();
        for name in ["attn.w_out", "attn.b_out", "ff.w2", "ff.b2"] {
            let t = params.get_mut(&format!("layers.0.{name}")).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let x = Tensor::from_fn(&[7, cfg.model_dim()], |i| (i as f64).cos());
        let y = encoder_block(&x, &params.bind(), 0, &cfg, &ForwardContext::default()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn forecast_shape_and_determinism() {
        for variant in [AttentionVariant::Exact, AttentionVariant::Nystrom] {
            let cfg = tiny(variant);
            let params = init_params(&cfg, 4).unwrap();
            let input = window(&cfg, 6.0);
            let ctx = ForwardContext::default();
            let a = forward(&input, &params.bind(), &cfg, &ctx).unwrap();
            let b = forward(&input, &params.bind(), &cfg, &ctx).unwrap();
            assert_eq!(a.shape(), &[3, 4, 1]);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = tiny(AttentionVariant::Exact);
        assert_eq!(init_params(&cfg, 11).unwrap(), init_params(&cfg, 11).unwrap());
        assert_ne!(init_params(&cfg, 11).unwrap(), init_params(&cfg, 12).unwrap());
        assert!(init_params(&cfg, 11).unwrap().iter().all(|(_, t)| t.is_finite()));
    }

    #[test]
    fn stcs_config_requires_matching_landmarks() {
        let mut cfg = tiny(AttentionVariant::Nystrom);
        cfg.landmark_strategy = LandmarkStrategy::Stcs;
        cfg.clusters = 2;
        cfg.landmarks = 5;
        assert!(cfg.validate().is_err());
        cfg.landmarks = 6;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn segment_means_pads_tokens() {
        let mut cfg = tiny(AttentionVariant::Nystrom);
        cfg.landmarks = 5;
        assert_eq!(cfg.padded_tokens(), 15);
        let params = init_params(&cfg, 5).unwrap();
        let out = forward(&window(&cfg, 2.0), &params.bind(), &cfg, &ForwardContext::default()).unwrap();
        assert_eq!(out.shape(), &[3, 4, 1]);
    }

    #[test]
    fn dropout_only_when_training() {
        let mut cfg = tiny(AttentionVariant::Exact);
        cfg.dropout = 0.3;
        let params = init_params(&cfg, 6).unwrap();
        let input = window(&cfg, 2.0);
        let eval = forward(&input, &params.bind(), &cfg, &ForwardContext::default()).unwrap();
        cfg.dropout = 0.0;
        let plain = forward(&input, &params.bind(), &cfg, &ForwardContext::default()).unwrap();
        assert_eq!(eval, plain);
        cfg.dropout = 0.3;
        let ctx = ForwardContext {
            training: true,
            seed: 1,
            ..Default::default()
        };
        let train = forward(&input, &params.bind(), &cfg, &ctx).unwrap();
        assert_ne!(train, plain);
    }

    #[test]
    fn invalid_dropout() {
        let mut cfg = tiny(AttentionVariant::Exact);
        cfg.dropout = 0.6;
        assert!(cfg.validate().is_err());
    }
}
