//! Streaming quantile regression by stochastic subgradient descent, with
//! random-scaling inference computed online in a single pass.
//!
//! The estimator is the Polyak-Ruppert average of the iterates
//! `beta_i = beta_{i-1} - gamma_i x_i (1{y_i <= x_i'beta_{i-1}} - tau)`,
//! `gamma_i = gamma0 i^{-a}`. Inference studentizes by the random-scaling matrix
//! `V_n = n^{-2} sum_s s^2 (avg_s - avg_n)(avg_s - avg_n)'`, which is accumulated
//! in O(d^2) memory (O(d) for the diagonal), and uses non-standard critical values.

pub mod error;
pub mod inference;
pub mod ingest;
pub mod init;
pub mod mc;
pub mod numeric;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod scaling;
pub mod sgd;

pub use error::{Error, ErrorCategory, Result};
pub use inference::critical::{CriticalValues, CvCache, CvSource, StatForm};
pub use inference::{confidence_interval, t_statistic, wald_statistic, Interval, TestResult};
pub use ingest::{shuffled_indices, Dataset, DatasetSchema, IndexedCsv};
pub use init::{Gamma0Spec, InitSpec};
pub use scaling::{RandomScalingMatrix, ScalingAccumulator, ScalingMode};
pub use sgd::{LearningRate, Observation, PathState, QuantileLevel, SgdConfig, SgdPath};
