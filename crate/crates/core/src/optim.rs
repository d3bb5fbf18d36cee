//! Minibatch training with a train/validation gap stopping rule, the adaptive
//! optimizers and learning-rate grid search.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{Cohort, InnerModel};
use crate::nn::Mode;
use crate::plot::{LineChart, Series};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adagrad,
    Adadelta,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adagrad" => Ok(Self::Adagrad),
            "adadelta" => Ok(Self::Adadelta),
            "adam" => Ok(Self::Adam),
            other => Err(Error::config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Constants of the adaptive update rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerParams {
    pub adagrad_eps: f64,
    pub adadelta_decay: f64,
    pub adadelta_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self {
            adagrad_eps: 1e-8,
            adadelta_decay: 0.95,
            adadelta_eps: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// How a minibatch's summed gradient is turned into an update direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    Sum,
    /// Divide by the minibatch size.
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Training stops once `validation_loss - train_loss` exceeds this.
    pub gap_delta: f64,
    pub optimizer: OptimizerKind,
    pub optimizer_params: OptimizerParams,
    pub reduction: LossReduction,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Batch size 64, gap 1e-2, 200 epochs, SGD at 0.01.
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 64,
            max_epochs: 200,
            gap_delta: 1e-2,
            optimizer: OptimizerKind::Sgd,
            optimizer_params: OptimizerParams::default(),
            reduction: LossReduction::Mean,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be positive"));
        }
        if self.gap_delta.is_nan() || self.gap_delta <= 0.0 {
            return Err(Error::config("gap delta must be positive"));
        }
        Ok(())
    }
}

/// Twenty equally spaced learning rates from 0.005 to 0.1.
pub fn default_lr_grid() -> Vec<f64> {
    let (lo, hi, n) = (0.005, 0.1, 20);
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

// ---- update rules ----

fn check_lengths(params: usize, grads: usize, state: &[usize]) -> Result<()> {
    if params != grads || state.iter().any(|&s| s != params) {
        return Err(Error::contract(format!(
            "parameter ({params}), gradient ({grads}) and state ({state:?}) lengths differ"
        )));
    }
    Ok(())
}

/// `theta <- theta - lr * g`.
pub fn step_sgd(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    check_lengths(params.len(), grads.len(), &[])?;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

/// Accumulates squared gradients and scales the step by `1/(sqrt(accum) + eps)`.
pub fn step_adagrad(params: &mut [f64], grads: &[f64], accum: &mut [f64], lr: f64, eps: f64) -> Result<()> {
    check_lengths(params.len(), grads.len(), &[accum.len()])?;
    for ((p, g), a) in params.iter_mut().zip(grads).zip(accum.iter_mut()) {
        *a += g * g;
        *p -= lr * g / (a.sqrt() + eps);
    }
    Ok(())
}

/// Decayed averages of squared gradients and squared updates; the unit-free
/// update is multiplied by `lr` (1.0 recovers the original rule).
pub fn step_adadelta(
    params: &mut [f64],
    grads: &[f64],
    sq_grad: &mut [f64],
    sq_update: &mut [f64],
    lr: f64,
    decay: f64,
    eps: f64,
) -> Result<()> {
    check_lengths(params.len(), grads.len(), &[sq_grad.len(), sq_update.len()])?;
    for i in 0..params.len() {
        let g = grads[i];
        sq_grad[i] = decay * sq_grad[i] + (1.0 - decay) * g * g;
        let delta = -((sq_update[i] + eps).sqrt() / (sq_grad[i] + eps).sqrt()) * g;
        sq_update[i] = decay * sq_update[i] + (1.0 - decay) * delta * delta;
        params[i] += lr * delta;
    }
    Ok(())
}

/// Bias-corrected first and second moments; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn step_adam(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check_lengths(params.len(), grads.len(), &[m.len(), v.len()])?;
    if t == 0 {
        return Err(Error::contract("adam step count starts at 1"));
    }
    let c1 = 1.0 - beta1.powf(t as f64);
    let c2 = 1.0 - beta2.powf(t as f64);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct TensorState {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    params: OptimizerParams,
    lr: f64,
    step: u64,
    state: Vec<TensorState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: OptimizerParams, lr: f64, tensor_sizes: &[usize]) -> Self {
        let state = tensor_sizes
            .iter()
            .map(|&n| TensorState {
                first: vec![0.0; n],
                second: vec![0.0; n],
            })
            .collect();
        Self {
            kind,
            params,
            lr,
            step: 0,
            state,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        if params.len() != self.state.len() || grads.len() != self.state.len() {
            return Err(Error::contract("optimizer tensor count does not match parameters"));
        }
        self.step += 1;
        let hp = self.params;
        for ((p, g), st) in params.into_iter().zip(grads).zip(&mut self.state) {
            match self.kind {
                OptimizerKind::Sgd => step_sgd(p, g, self.lr)?,
                OptimizerKind::Adagrad => step_adagrad(p, g, &mut st.first, self.lr, hp.adagrad_eps)?,
                OptimizerKind::Adadelta => step_adadelta(
                    p,
                    g,
                    &mut st.first,
                    &mut st.second,
                    self.lr,
                    hp.adadelta_decay,
                    hp.adadelta_eps,
                )?,
                OptimizerKind::Adam => step_adam(
                    p,
                    g,
                    &mut st.first,
                    &mut st.second,
                    self.step,
                    self.lr,
                    hp.adam_beta1,
                    hp.adam_beta2,
                    hp.adam_eps,
                )?,
            }
        }
        Ok(())
    }
}

// ---- training loop ----

/// Shuffles `0..n` and cuts it into consecutive minibatches of `batch_size`;
/// the last batch keeps the remainder.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Per-sample mean cross-entropy on the training set.
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    GapExceeded,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub stop_reason: StopReason,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "validation_loss"])?;
        for r in &self.records {
            w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.validation_loss.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Training and validation loss against epoch.
    pub fn to_svg(&self) -> String {
        let xs: Vec<f64> = self.records.iter().map(|r| r.epoch as f64).collect();
        let chart = LineChart {
            title: "Cross Entropy Loss Against Iteration".into(),
            x_label: "Iteration".into(),
            y_label: "Cross entropy loss".into(),
            series: vec![
                Series {
                    name: "Training".into(),
                    xs: xs.clone(),
                    ys: self.records.iter().map(|r| r.train_loss).collect(),
                },
                Series {
                    name: "Validation".into(),
                    xs,
                    ys: self.records.iter().map(|r| r.validation_loss).collect(),
                },
            ],
            reference_y: None,
        };
        chart.render()
    }
}

/// Trains a copy of `model` with minibatch updates.
///
/// Each epoch reshuffles the training set, applies one optimizer update per
/// minibatch (every subject visited exactly once), then records the mean
/// training and validation losses. Training stops after `max_epochs`, or
/// earlier once the validation loss exceeds the training loss by more than
/// `gap_delta`. The returned model holds the parameters of the last epoch.
pub fn train(model: &InnerModel, train_set: &Cohort, validation_set: &Cohort, cfg: &TrainConfig) -> Result<(InnerModel, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() || validation_set.is_empty() {
        return Err(Error::config("training and validation sets must be non-empty"));
    }
    if cfg.batch_size > train_set.len() {
        return Err(Error::config(format!(
            "batch size {} exceeds training set size {}",
            cfg.batch_size,
            train_set.len()
        )));
    }
    train_set.require_labels()?;
    validation_set.require_labels()?;
    for set in [train_set, validation_set] {
        if set.dim() != model.input_dim() {
            return Err(Error::contract(format!(
                "data has {} covariates, model expects {}",
                set.dim(),
                model.input_dim()
            )));
        }
    }

    let mut model = model.clone();
    let sizes: Vec<usize> = model.param_slices_mut().iter().map(|s| s.len()).collect();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.optimizer_params, cfg.learning_rate, &sizes);
    let mut shuffle_rng = rng::stream(cfg.seed, "shuffle");
    let mut dropout_rng = rng::stream(cfg.seed, "dropout");
    let mut records = Vec::with_capacity(cfg.max_epochs);
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        for batch in epoch_batches(train_set.len(), cfg.batch_size, &mut shuffle_rng) {
            let mb = train_set.select(&batch);
            let (loss, mut grads) = model.loss_and_gradients(&mb, Mode::Train, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: "non-finite minibatch loss".into(),
                });
            }
            if cfg.reduction == LossReduction::Mean {
                grads.scale(1.0 / batch.len() as f64);
            }
            optimizer.apply(model.param_slices_mut(), grads.slices())?;
        }
        let train_loss = model.mean_loss(train_set)?;
        let validation_loss = model.mean_loss(validation_set)?;
        if !(train_loss.is_finite() && validation_loss.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                reason: format!("train loss {train_loss}, validation loss {validation_loss}"),
            });
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
        });
        if validation_loss - train_loss > cfg.gap_delta {
            stop_reason = StopReason::GapExceeded;
            break;
        }
    }
    Ok((model, TrainLog { records, stop_reason }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub learning_rate: f64,
    /// Final validation loss, or `None` if the run diverged.
    pub validation_loss: Option<f64>,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchOutcome {
    pub best_learning_rate: f64,
    pub points: Vec<GridPoint>,
}

/// Trains one fresh model per learning rate and picks the lowest final
/// validation loss, preferring the smaller rate on ties.
///
/// `model_factory` receives a per-point seed derived from `cfg.seed`.
pub fn grid_search_lr<F>(
    model_factory: F,
    train_set: &Cohort,
    validation_set: &Cohort,
    grid: &[f64],
    cfg: &TrainConfig,
) -> Result<GridSearchOutcome>
where
    F: Fn(u64) -> Result<InnerModel> + Sync,
{
    if grid.is_empty() {
        return Err(Error::config("learning-rate grid is empty"));
    }
    let runs: Vec<Result<GridPoint>> = grid
        .par_iter()
        .enumerate()
        .map(|(k, &lr)| {
            let seed = rng::derive_indexed(cfg.seed, "grid", k as u64);
            let model = model_factory(seed)?;
            let point_cfg = TrainConfig {
                learning_rate: lr,
                seed,
                ..cfg.clone()
            };
            match train(&model, train_set, validation_set, &point_cfg) {
                Ok((_, log)) => Ok(GridPoint {
                    learning_rate: lr,
                    validation_loss: log.last().map(|r| r.validation_loss),
                    epochs: log.records.len(),
                }),
                Err(Error::Divergence { epoch, .. }) => Ok(GridPoint {
                    learning_rate: lr,
                    validation_loss: None,
                    epochs: epoch,
                }),
                Err(e) => Err(e),
            }
        })
        .collect();
    let points = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut best: Option<(f64, f64)> = None;
    for p in &points {
        if let Some(loss) = p.validation_loss {
            let better = match best {
                None => true,
                Some((bl, blr)) => loss < bl || (loss == bl && p.learning_rate < blr),
            };
            if better {
                best = Some((loss, p.learning_rate));
            }
        }
    }
    match best {
        Some((_, lr)) => Ok(GridSearchOutcome {
            best_learning_rate: lr,
            points,
        }),
        None => Err(Error::SearchFailed(
            points
                .iter()
                .map(|p| format!("lr {} diverged at epoch {}", p.learning_rate, p.epochs))
                .collect::<Vec<_>>()
                .join("; "),
        )),
    }
}
