//! Interpretable neural-network regression (INNER).
//!
//! A logistic regression for a binary outcome whose intercept and pain slope
//! are each produced by a dense feed-forward network of patient covariates:
//!
//! ```text
//! logit P(Y = 1 | X, Z) = F(Z; alpha) + F(Z; beta) * X
//! ```
//!
//! `exp F(Z; alpha)` is the baseline tendency (BOT, odds at zero pain) and
//! `exp F(Z; beta)` the pain-induced tendency (POT, odds ratio per unit pain).
//!
//! Modules:
//!
//! - [`nn`]: dense networks with exact reverse-mode gradients.
//! - [`model`]: the two-network composition, loss and tendency scores.
//! - [`optim`]: minibatch training, adaptive optimizers, learning-rate search.
//! - [`simgen`]: synthetic cohorts with calibrated signal-to-noise ratio.
//! - [`metrics`]: C-statistic and thresholded classification metrics.
//! - [`subgroup`]: local-FDR subgroups, risk curves and R² decomposition.
//! - [`dataio`]: CSV ingestion, imputation, encoding and balanced ensembles.

pub mod dataio;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod rng;
pub mod simgen;
pub mod subgroup;

pub use error::{Error, Result};
pub use metrics::{AggregateReport, MetricReport};
pub use model::{Cohort, InnerModel, Subject, TendencyScore};
pub use nn::{Activation, DenseLayer, DenseNetwork, InitScheme, Mode, NetworkSpec};
pub use optim::{OptimizerKind, TrainConfig, TrainLog};
pub use simgen::{Scenario, SimConfig, SimDataset};
pub use subgroup::{LfdrModel, RiskCurve, SubgroupAssignment};
