//! Self-attention over flattened spatial-temporal tokens.
//!
//! [`exact_attention`] materialises the full `n×n` score matrix.
//! [`nystrom_attention`] reconstructs its action from `m` landmarks as
//! `F̃ · pinv(Ã) · (B̃ · V)`, so no `n×n` matrix is ever built. Both run per
//! head inside [`multi_head`] and are selected by [`AttentionVariant`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::{make_landmark_set, LandmarkContext, LandmarkSet};
use crate::linalg::{iterative_pinv, PinvConfig};
use crate::ops::TensorOps;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionVariant {
    Exact,
    Nystrom,
}

impl std::fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionVariant::Exact => "exact",
            AttentionVariant::Nystrom => "nystrom",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub variant: AttentionVariant,
    pub pinv: PinvConfig,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        self.pinv.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Query, key, value and output projections of one attention layer, each
/// `d×d` with a length-`d` bias.
#[derive(Clone, Debug)]
pub struct ProjectionWeights<O> {
    pub w_q: O,
    pub b_q: O,
    pub w_k: O,
    pub b_k: O,
    pub w_v: O,
    pub b_v: O,
    pub w_out: O,
    pub b_out: O,
}

impl<O: TensorOps> ProjectionWeights<O> {
    fn validate(&self, d: usize) -> Result<()> {
        for (name, w, b) in [
            ("w_q", &self.w_q, &self.b_q),
            ("w_k", &self.w_k, &self.b_k),
            ("w_v", &self.w_v, &self.b_v),
            ("w_out", &self.w_out, &self.b_out),
        ] {
            if w.shape() != [d, d] || b.shape() != [d] {
                return Err(Error::invalid(
                    "projection",
                    format!(
                        "{name} has shape {:?} with bias {:?}, expected [{d}, {d}] and [{d}]",
                        w.shape(),
                        b.shape()
                    ),
                ));
            }
        }
        Ok(())
    }
}

pub fn project_qkv<O: TensorOps>(x: &O, w: &ProjectionWeights<O>) -> Result<(O, O, O)> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::invalid("project_qkv", format!("expected n×d tokens, got {shape:?}")));
    }
    w.validate(shape[1])?;
    let q = x.matmul(&w.w_q)?.add_row_bias(&w.b_q)?;
    let k = x.matmul(&w.w_k)?.add_row_bias(&w.b_k)?;
    let v = x.matmul(&w.w_v)?.add_row_bias(&w.b_v)?;
    Ok((q, k, v))
}

fn check_qkv<O: TensorOps>(op: &'static str, q: &O, k: &O, v: &O) -> Result<(usize, usize)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || qs != ks {
        return Err(Error::shape(op, &qs, &ks));
    }
    if vs.len() != 2 || vs[0] != qs[0] {
        return Err(Error::shape(op, &qs, &vs));
    }
    Ok((qs[0], qs[1]))
}

/// `softmax(QKᵀ/√d)·V`.
pub fn exact_attention<O: TensorOps>(q: &O, k: &O, v: &O) -> Result<O> {
    let (_, d) = check_qkv("exact_attention", q, k, v)?;
    let scale = 1.0 / (d as f64).sqrt();
    let scores = q.matmul_t(k)?.scale(scale).softmax_rows()?;
    scores.matmul(v)
}

/// Nyström approximation of [`exact_attention`] from the given landmarks.
pub fn nystrom_attention<O: TensorOps>(
    q: &O,
    k: &O,
    v: &O,
    landmarks: &LandmarkSet<O>,
    pinv: &PinvConfig,
) -> Result<O> {
    let (n, d) = check_qkv("nystrom_attention", q, k, v)?;
    let (lq, lk) = (landmarks.queries.shape(), landmarks.keys.shape());
    if lq != lk || lq.len() != 2 || lq[1] != d {
        return Err(Error::shape("nystrom_attention", &lq, &lk));
    }
    if lq[0] > n {
        return Err(Error::invalid(
            "nystrom_attention",
            format!("{} landmarks exceed sequence length {n}", lq[0]),
        ));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let kernel_f = q.matmul_t(&landmarks.keys)?.scale(scale).softmax_rows()?;
    let kernel_b = landmarks.queries.matmul_t(k)?.scale(scale).softmax_rows()?;
    let kernel_a = landmarks
        .queries
        .matmul_t(&landmarks.keys)?
        .scale(scale)
        .softmax_rows()?;
    let a_pinv = iterative_pinv(&kernel_a, pinv)?;
    let bv = kernel_b.matmul(v)?;
    kernel_f.matmul(&a_pinv)?.matmul(&bv)
}

/// Attention for one head: exact, or Nyström with landmarks drawn from this
/// head's own query/key slices.
pub fn head_attention<O: TensorOps>(
    q: &O,
    k: &O,
    v: &O,
    variant: AttentionVariant,
    pinv: &PinvConfig,
    landmarks: Option<&LandmarkContext<'_>>,
) -> Result<O> {
    match variant {
        AttentionVariant::Exact => exact_attention(q, k, v),
        AttentionVariant::Nystrom => {
            let ctx = landmarks.ok_or_else(|| Error::Config("Nyström attention needs landmark settings".into()))?;
            let set = make_landmark_set(q, k, ctx)?;
            nystrom_attention(q, k, v, &set, pinv)
        }
    }
}

/// Multi-head attention: project, attend per head, concatenate, project out.
pub fn multi_head<O: TensorOps>(
    x: &O,
    cfg: &AttentionConfig,
    w: &ProjectionWeights<O>,
    landmarks: Option<&LandmarkContext<'_>>,
) -> Result<O> {
    cfg.validate()?;
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != cfg.model_dim {
        return Err(Error::invalid(
            "multi_head",
            format!("tokens of shape {shape:?} do not match model width {}", cfg.model_dim),
        ));
    }
    let (q, k, v) = project_qkv(x, w)?;
    let dh = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (start, end) = (h * dh, (h + 1) * dh);
        let ctx = landmarks.map(|c| c.derive(h as u64));
        let out = head_attention(
            &q.slice_last(start, end)?,
            &k.slice_last(start, end)?,
            &v.slice_last(start, end)?,
            cfg.variant,
            &cfg.pinv,
            ctx.as_ref(),
        )?;
        heads.push(out);
    }
    let joined = if heads.len() == 1 {
        heads.pop().unwrap()
    } else {
        O::concat_last(&heads)?
    };
    joined.matmul(&w.w_out)?.add_row_bias(&w.b_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn weights_identity(d: usize) -> ProjectionWeights<Tensor> {
        ProjectionWeights {
            w_q: Tensor::identity(d),
            b_q: Tensor::zeros(&[d]),
            w_k: Tensor::identity(d),
            b_k: Tensor::zeros(&[d]),
            w_v: Tensor::identity(d),
            b_v: Tensor::zeros(&[d]),
            w_out: Tensor::identity(d),
            b_out: Tensor::zeros(&[d]),
        }
    }

    fn sample(n: usize, d: usize, salt: f64) -> Tensor {
        Tensor::from_fn(&[n, d], |i| ((i as f64 + salt) * 0.917).sin() * 1.3)
    }

    #[test]
    fn identity_query_weights() {
        let x = sample(5, 4, 0.0);
        let (q, k, v) = project_qkv(&x, &weights_identity(4)).unwrap();
        assert_eq!(q, x);
        assert_eq!(k, x);
        assert_eq!(v, x);
        let (q, _, _) = project_qkv(&Tensor::zeros(&[3, 4]), &weights_identity(4)).unwrap();
        assert_eq!(q, Tensor::zeros(&[3, 4]));
    }

    #[test]
    fn width_mismatch() {
        let x = sample(5, 3, 0.0);
        assert!(project_qkv(&x, &weights_identity(4)).is_err());
    }

    #[test]
    fn single_token_returns_value() {
        let q = sample(1, 3, 0.0);
        let k = sample(1, 3, 1.0);
        let v = sample(1, 3, 2.0);
        let out = exact_attention(&q, &k, &v).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
        let set = LandmarkSet {
            queries: q.clone(),
            keys: k.clone(),
            strategy: crate::landmarks::LandmarkStrategy::SegmentMeans,
        };
        let ny = nystrom_attention(&q, &k, &v, &set, &PinvConfig::default()).unwrap();
        assert!(ny.max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn zero_values_give_zero() {
        let q = sample(6, 2, 0.0);
        let k = sample(6, 2, 3.0);
        let v = Tensor::zeros(&[6, 2]);
        assert_eq!(exact_attention(&q, &k, &v).unwrap(), v);
        let set = make_landmark_set(&q, &k, &LandmarkContext::segment_means(3)).unwrap();
        assert_eq!(nystrom_attention(&q, &k, &v, &set, &PinvConfig::default()).unwrap(), v);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = sample(4, 3, 0.0);
        let k = Tensor::from_fn(&[4, 3], |i| [0.3, -1.0, 2.0][i % 3]);
        let v = sample(4, 3, 5.0);
        let out = exact_attention(&q, &k, &v).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mean: f64 = (0..4).map(|r| v.at(r, j)).sum::<f64>() / 4.0;
                assert!((out.at(i, j) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn too_many_landmarks_rejected() {
        let q = sample(2, 2, 0.0);
        let set = LandmarkSet {
            queries: sample(3, 2, 0.0),
            keys: sample(3, 2, 1.0),
            strategy: crate::landmarks::LandmarkStrategy::SegmentMeans,
        };
        assert!(nystrom_attention(&q, &q, &q, &set, &PinvConfig::default()).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = AttentionConfig {
            model_dim: 6,
            heads: 4,
            variant: AttentionVariant::Exact,
            pinv: PinvConfig::default(),
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn nystrom_requires_landmark_settings() {
        let cfg = AttentionConfig {
            model_dim: 4,
            heads: 1,
            variant: AttentionVariant::Nystrom,
            pinv: PinvConfig::default(),
        };
        let x = sample(4, 4, 0.0);
        assert!(multi_head(&x, &cfg, &weights_identity(4), None).is_err());
    }
}
