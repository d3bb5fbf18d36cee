//! One simulation replication: generate, split, train INNER and the logistic
//! baseline, score the held-out split.

use serde::{Deserialize, Serialize};

use inner_core::dataio::split;
use inner_core::metrics::c_statistic;
use inner_core::nn::{InitScheme, NetworkSpec};
use inner_core::optim::{self, TrainConfig};
use inner_core::rng::derive_seed;
use inner_core::simgen::{self, SimConfig};
use inner_core::{Cohort, InnerModel, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSpec {
    pub sim: SimConfig,
    /// Hidden widths of both networks; the output layer is added.
    pub hidden: Vec<usize>,
    /// Dropout rate on every hidden layer of both networks.
    #[serde(default)]
    pub dropout: f64,
    pub init: InitScheme,
    /// Shared by INNER and the baseline; `seed` is replaced per run.
    pub train: TrainConfig,
    pub train_fraction: f64,
    /// Share of the training portion held out for the loss log.
    pub validation_fraction: f64,
    pub fit_inner: bool,
    pub fit_logistic: bool,
}

impl ReplicationSpec {
    /// 80/20 split, `[p, 64, 32, 1]` ReLU networks, SGD at 0.01 with batch
    /// 64 for 200 epochs and no early stopping.
    pub fn simulation_default(sim: SimConfig) -> Self {
        Self {
            sim,
            hidden: vec![64, 32],
            dropout: 0.0,
            init: InitScheme::default(),
            train: TrainConfig {
                gap_delta: f64::INFINITY,
                ..TrainConfig::default()
            },
            train_fraction: 0.8,
            validation_fraction: 0.2,
            fit_inner: true,
            fit_logistic: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub inner_auc: Option<f64>,
    pub logistic_auc: Option<f64>,
    pub achieved_snr: f64,
}

fn fit_and_score(model: &InnerModel, fit: &Cohort, val: &Cohort, test: &Cohort, cfg: &TrainConfig) -> Result<f64> {
    let (trained, _) = optim::train(model, fit, val, cfg)?;
    let probs = trained.predict_cohort(test)?;
    c_statistic(&probs, test.require_labels()?)
}

pub fn run_replication(spec: &ReplicationSpec) -> Result<ReplicationOutcome> {
    let seed = spec.sim.seed;
    let data = simgen::generate(&spec.sim)?;
    let cohort = &data.cohort;
    let (train_idx, test_idx) = split(cohort.len(), spec.train_fraction, derive_seed(seed, "test-split"))?;
    let (fit_pos, val_pos) = split(train_idx.len(), 1.0 - spec.validation_fraction, derive_seed(seed, "validation-split"))?;
    let fit = cohort.select(&fit_pos.iter().map(|&k| train_idx[k]).collect::<Vec<_>>());
    let val = cohort.select(&val_pos.iter().map(|&k| train_idx[k]).collect::<Vec<_>>());
    let test = cohort.select(&test_idx);

    let inner_auc = if spec.fit_inner {
        let mut rates = vec![spec.dropout; spec.hidden.len()];
        rates.push(0.0);
        let arch = NetworkSpec::relu_regressor(cohort.dim(), &spec.hidden).with_dropout(rates)?;
        let model = InnerModel::init(&arch, spec.init, derive_seed(seed, "init"))?;
        let cfg = TrainConfig {
            seed: derive_seed(seed, "train:inner"),
            ..spec.train.clone()
        };
        Some(fit_and_score(&model, &fit, &val, &test, &cfg)?)
    } else {
        None
    };
    let logistic_auc = if spec.fit_logistic {
        let cfg = TrainConfig {
            seed: derive_seed(seed, "train:logistic"),
            ..spec.train.clone()
        };
        Some(fit_and_score(&InnerModel::logistic_baseline(cohort.dim())?, &fit, &val, &test, &cfg)?)
    } else {
        None
    };
    Ok(ReplicationOutcome {
        inner_auc,
        logistic_auc,
        achieved_snr: data.truth.achieved_snr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use inner_core::Scenario;

    #[test]
    fn small_replication_runs_and_repeats() {
        let mut sim = SimConfig::new(Scenario::CorrectModel, 600, 3, 3.2, 4);
        sim.calib_sample_size = 5_000;
        let mut spec = ReplicationSpec::simulation_default(sim);
        spec.hidden = vec![8];
        spec.train.max_epochs = 5;
        let a = run_replication(&spec).unwrap();
        assert_eq!(a, run_replication(&spec).unwrap());
        assert!(a.inner_auc.unwrap() > 0.0 && a.logistic_auc.unwrap() > 0.0);
        spec.fit_inner = false;
        assert_eq!(run_replication(&spec).unwrap().inner_auc, None);
    }
}
