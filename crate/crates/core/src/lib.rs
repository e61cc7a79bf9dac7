//! Spatial-temporal token Transformer for traffic forecasting.
//!
//! Every sensor at every time step becomes one token; a stack of Transformer
//! encoder blocks attends over all `N·T` tokens at once. Attention is either
//! exact (quadratic in `N·T`) or a Nyström approximation built from `m`
//! landmarks (linear in `N·T`). Landmarks come from segment means or from
//! spatial-temporal cluster sampling over a road-distance clustering.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`ops`], [`autodiff`]: dense `f64` tensors, the closed
//!   operation set and a reverse-mode gradient tape;
//! - [`linalg`]: iterative pseudoinverse plus an SVD reference;
//! - [`landmarks`], [`attention`]: landmark selection and attention kernels;
//! - [`model`]: embeddings, encoder blocks, regression head, checkpoints;
//! - [`data`]: dataset bundles, synthetic data, windowing, normalisation;
//! - [`train`]: masked-MAE training with Adam, metrics, gradient checking.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod instrument;
pub mod landmarks;
pub mod linalg;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use ops::TensorOps;
pub use tensor::Tensor;
