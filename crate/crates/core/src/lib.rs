//! Deep convolutional transform learning.
//!
//! A stack of `L` layers, each a bank of `K` convolution kernels of length
//! `K`, is learned without labels by alternating proximal minimization of
//!
//! ```text
//! sum_l [ 1/2 sum_m |Z_{m,l-1} T_l - Z_{m,l}|_F^2 + mu |T_l|_F^2
//!         - lambda log det T_l + beta |Z_l|_1 + indicator(Z_l >= 0) ]
//! ```
//!
//! where the first layer convolves the raw signals and deeper layers
//! convolve the previous layer's coefficients channel by channel.
//!
//! Modules:
//! * [`conv`]: convolution, Toeplitz operators, forward products.
//! * [`prox`]: proximity operators and the projected Newton solver.
//! * [`model`]: objective, training loop, encoder.
//! * [`eval`]: KNN / nearest-centroid classification, k-means, ARI, timing.
//! * [`data`]: dataset files, splits, synthetic data.
//! * [`persist`]: binary model files.

pub mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod persist;
pub mod prox;

pub use conv::{ChannelBlock, CoefficientStack, KernelBank, Sample};
pub use error::{Error, Result};
pub use model::{encode, train, ModelConfig, TrainedModel};
