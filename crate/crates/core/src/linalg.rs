//! Pseudoinverse machinery.
//!
//! [`iterative_pinv`] is the hot-path routine: a fixed number of steps of the
//! third-order iteration
//!
//! ```text
//! Z_{j+1} = ¼ · Z_j (13I − AZ_j (15I − AZ_j (7I − AZ_j)))
//! ```
//!
//! started from `Z_0 = Aᵀ / (‖A‖₁‖A‖_∞)`. It is a fixed composition of
//! matrix products, so it runs on either execution path and is
//! differentiable end to end. [`svd_pinv_oracle`] is an independent
//! SVD-based reference used only to check it.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::TensorOps;
use crate::tensor::Tensor;

pub const DEFAULT_PINV_ITERATIONS: usize = 6;

/// Enough iterations to reach roundoff on the full `n×n` softmax kernels
/// (`n ≤ 64`) used to check that Nyström with `m = n` is exact.
pub const CONVERGED_PINV_ITERATIONS: usize = 30;

/// Largest matrix the SVD oracle accepts.
pub const ORACLE_MAX_DIM: usize = 64;

const ORACLE_RELATIVE_CUTOFF: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinvConfig {
    pub iterations: usize,
}

impl Default for PinvConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_PINV_ITERATIONS,
        }
    }
}

impl PinvConfig {
    pub fn new(iterations: usize) -> Result<Self> {
        let cfg = Self { iterations };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("pseudoinverse iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Approximates the Moore-Penrose pseudoinverse of a square matrix.
pub fn iterative_pinv<O: TensorOps>(a: &O, cfg: &PinvConfig) -> Result<O> {
    iterate_pinv(a, cfg, |_, _| Ok(()))
}

/// Like [`iterative_pinv`] but also returns every iterate `Z_1..Z_k`.
pub fn iterative_pinv_trace(a: &Tensor, cfg: &PinvConfig) -> Result<Vec<Tensor>> {
    let mut trace = Vec::with_capacity(cfg.iterations);
    iterate_pinv(a, cfg, |_, z: &Tensor| {
        trace.push(z.clone());
        Ok(())
    })?;
    Ok(trace)
}

fn iterate_pinv<O: TensorOps>(
    a: &O,
    cfg: &PinvConfig,
    mut observe: impl FnMut(usize, &O) -> Result<()>,
) -> Result<O> {
    cfg.validate()?;
    let shape = a.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::invalid(
            "iterative_pinv",
            format!("expected a square matrix, got shape {shape:?}"),
        ));
    }
    if !a.all_finite() {
        return Err(Error::NonFinite { op: "iterative_pinv" });
    }
    let mut z = a.pinv_init()?;
    for iteration in 1..=cfg.iterations {
        let az = a.matmul(&z)?;
        let inner = az.sub_from_identity(7.0)?;
        let inner = az.matmul(&inner)?.sub_from_identity(15.0)?;
        let inner = az.matmul(&inner)?.sub_from_identity(13.0)?;
        z = z.matmul(&inner)?.scale(0.25);
        if !z.all_finite() {
            return Err(Error::Divergence { iteration });
        }
        observe(iteration, &z)?;
    }
    Ok(z)
}

fn to_faer(a: &Tensor) -> Result<Mat<f64>> {
    match a.shape() {
        [r, c] => Ok(Mat::from_fn(*r, *c, |i, j| a.at(i, j))),
        s => Err(Error::invalid("linalg", format!("expected a matrix, got shape {s:?}"))),
    }
}

/// Reference pseudoinverse through a singular value decomposition. Singular
/// values below `1e-10·σ_max` are treated as zero. Test-scale only.
pub fn svd_pinv_oracle(a: &Tensor) -> Result<Tensor> {
    let m = to_faer(a)?;
    let (rows, cols) = (m.nrows(), m.ncols());
    if rows > ORACLE_MAX_DIM || cols > ORACLE_MAX_DIM {
        return Err(Error::invalid(
            "svd_pinv_oracle",
            format!("{rows}×{cols} exceeds the {ORACLE_MAX_DIM}×{ORACLE_MAX_DIM} oracle limit"),
        ));
    }
    if a.data().iter().all(|&v| v == 0.0) {
        return Ok(Tensor::zeros(&[cols, rows]));
    }
    let svd = m
        .thin_svd()
        .map_err(|e| Error::invalid("svd_pinv_oracle", format!("SVD failed: {e:?}")))?;
    let (u, v) = (svd.U(), svd.V());
    let s = svd.S().column_vector();
    let sigma_max = (0..s.nrows()).map(|k| s[k]).fold(0.0, f64::max);
    let cutoff = ORACLE_RELATIVE_CUTOFF * sigma_max;
    let mut pinv = vec![0.0; cols * rows];
    for k in 0..s.nrows() {
        if s[k] > cutoff {
            for i in 0..cols {
                let scaled = v[(i, k)] / s[k];
                for j in 0..rows {
                    pinv[i * rows + j] += scaled * u[(j, k)];
                }
            }
        }
    }
    Tensor::new(&[cols, rows], pinv)
}

/// `‖a·z·a − a‖_F / max(‖a‖_F, 1e-30)`
pub fn pinv_residual(a: &Tensor, z: &Tensor) -> Result<f64> {
    let aza = a.matmul(z)?.matmul(a)?;
    Ok(aza.sub(a)?.frobenius() / a.frobenius().max(1e-30))
}

/// Largest singular value.
pub fn spectral_norm(a: &Tensor) -> Result<f64> {
    let values = to_faer(a)?
        .singular_values()
        .map_err(|e| Error::invalid("spectral_norm", format!("SVD failed: {e:?}")))?;
    Ok(values.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(values: &[f64]) -> Tensor {
        let n = values.len();
        Tensor::from_fn(&[n, n], |k| if k / n == k % n { values[k / n] } else { 0.0 })
    }

    #[test]
    fn identity_is_its_own_inverse() {
        let z = iterative_pinv(&Tensor::identity(4), &PinvConfig::default()).unwrap();
        assert!(z.max_abs_diff(&Tensor::identity(4)) < 1e-12);
    }

    #[test]
    fn diagonal_inverse() {
        let z = iterative_pinv(&diag(&[2.0, 4.0]), &PinvConfig::default()).unwrap();
        assert!(z.max_abs_diff(&diag(&[0.5, 0.25])) < 1e-10);
    }

    #[test]
    fn rejects_non_square() {
        let e = iterative_pinv(&Tensor::zeros(&[2, 3]), &PinvConfig::default()).unwrap_err();
        assert!(matches!(e, Error::Invalid { .. }));
    }

    #[test]
    fn rejects_zero_iterations() {
        assert!(PinvConfig::new(0).is_err());
    }

    #[test]
    fn divergence_reports_iteration() {
        // ‖a‖₁‖a‖_∞ is subnormal, so the initial scale overflows.
        let a = Tensor::from_rows(&[vec![1e-160, 0.0], vec![0.0, 1e-160]]).unwrap();
        let e = iterative_pinv(&a, &PinvConfig::new(20).unwrap());
        match e {
            Err(Error::Divergence { iteration }) => assert!(iteration >= 1),
            Err(other) => panic!("unexpected error {other}"),
            Ok(z) => panic!("expected divergence, got {z:?}"),
        }
    }

    #[test]
    fn rejects_non_finite_input() {
        let a = Tensor::from_rows(&[vec![f64::NAN, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            iterative_pinv(&a, &PinvConfig::default()),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn oracle_zero_matrix() {
        let z = svd_pinv_oracle(&Tensor::zeros(&[3, 3])).unwrap();
        assert_eq!(z, Tensor::zeros(&[3, 3]));
    }

    #[test]
    fn oracle_rank_one_projector() {
        let u = [0.6, 0.8, 0.0];
        let p = Tensor::from_fn(&[3, 3], |k| u[k / 3] * u[k % 3]);
        let z = svd_pinv_oracle(&p).unwrap();
        assert!(z.max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn oracle_rejects_oversize() {
        assert!(svd_pinv_oracle(&Tensor::zeros(&[65, 65])).is_err());
    }

    #[test]
    fn residual_examples() {
        assert_eq!(pinv_residual(&Tensor::identity(3), &Tensor::identity(3)).unwrap(), 0.0);
        let r = pinv_residual(&diag(&[2.0, 4.0]), &diag(&[0.5, 0.25])).unwrap();
        assert!(r < 1e-12);
        assert!(pinv_residual(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[3, 3])).is_err());
    }
}
