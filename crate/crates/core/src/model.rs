//! The INNER composition: `logit P(Y=1 | X, Z) = F(Z; alpha) + F(Z; beta) * X`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{self, init_network, Activation, DenseNetwork, InitScheme, Mode, NetworkGrads, NetworkSpec};
use crate::rng;
use crate::{Error, Result};

/// Logits are clamped to this magnitude before the sigmoid and the loss.
pub const LOGIT_CLAMP: f64 = 35.0;

pub const PAIN_MIN: f64 = 0.0;
pub const PAIN_MAX: f64 = 10.0;

fn check_pain(pain: f64) -> Result<()> {
    if !(PAIN_MIN..=PAIN_MAX).contains(&pain) {
        return Err(Error::contract(format!("pain score {pain} outside [0, 10]")));
    }
    Ok(())
}

fn check_label(label: u8) -> Result<()> {
    if label > 1 {
        return Err(Error::contract(format!("label {label} is not binary")));
    }
    Ok(())
}

/// One patient: pain score `X`, covariates `Z` and an optional outcome `Y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub pain: f64,
    pub covariates: Vec<f64>,
    pub label: Option<u8>,
}

impl Subject {
    pub fn new(pain: f64, covariates: Vec<f64>, label: Option<u8>) -> Result<Self> {
        check_pain(pain)?;
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite covariate".into()));
        }
        if let Some(y) = label {
            check_label(y)?;
        }
        Ok(Self {
            pain,
            covariates,
            label,
        })
    }
}

/// A set of subjects stored column-wise: covariates as an `n x p` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    covariates: Array2<f64>,
    pain: Array1<f64>,
    labels: Option<Vec<u8>>,
}

impl Cohort {
    pub fn new(covariates: Array2<f64>, pain: Array1<f64>, labels: Option<Vec<u8>>) -> Result<Self> {
        if covariates.nrows() != pain.len() {
            return Err(Error::contract(format!(
                "{} covariate rows but {} pain scores",
                covariates.nrows(),
                pain.len()
            )));
        }
        if let Some(ls) = &labels {
            if ls.len() != pain.len() {
                return Err(Error::contract(format!("{} labels for {} subjects", ls.len(), pain.len())));
            }
            for &y in ls {
                check_label(y)?;
            }
        }
        for &x in &pain {
            check_pain(x)?;
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite covariate".into()));
        }
        Ok(Self {
            covariates: covariates.as_standard_layout().into_owned(),
            pain,
            labels,
        })
    }

    /// Builds a cohort; labels are kept only if every subject has one.
    pub fn from_subjects(subjects: &[Subject]) -> Result<Self> {
        let p = subjects.first().map_or(0, |s| s.covariates.len());
        if subjects.iter().any(|s| s.covariates.len() != p) {
            return Err(Error::contract("subjects have differing covariate lengths"));
        }
        let flat: Vec<f64> = subjects.iter().flat_map(|s| s.covariates.iter().copied()).collect();
        let covariates = Array2::from_shape_vec((subjects.len(), p), flat).expect("consistent lengths");
        let pain = subjects.iter().map(|s| s.pain).collect();
        let labels = subjects.iter().map(|s| s.label).collect::<Option<Vec<u8>>>();
        Cohort::new(covariates, pain, labels)
    }

    pub fn len(&self) -> usize {
        self.pain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pain.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> ArrayView2<'_, f64> {
        self.covariates.view()
    }

    pub fn pain(&self) -> ArrayView1<'_, f64> {
        self.pain.view()
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[u8]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::contract("cohort has unlabeled subjects"))
    }

    pub fn subject(&self, i: usize) -> Subject {
        Subject {
            pain: self.pain[i],
            covariates: self.covariates.row(i).to_vec(),
            label: self.labels.as_ref().map(|l| l[i]),
        }
    }

    pub fn subjects(&self) -> impl Iterator<Item = Subject> + '_ {
        (0..self.len()).map(|i| self.subject(i))
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Cohort {
        Cohort {
            covariates: self.covariates.select(Axis(0), indices),
            pain: self.pain.select(Axis(0), indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Same covariates with every pain score replaced by `pain`.
    pub fn with_pain(&self, pain: f64) -> Result<Cohort> {
        check_pain(pain)?;
        Ok(Cohort {
            covariates: self.covariates.clone(),
            pain: Array1::from_elem(self.len(), pain),
            labels: self.labels.clone(),
        })
    }

    pub fn prevalence(&self) -> Option<f64> {
        self.labels
            .as_ref()
            .filter(|l| !l.is_empty())
            .map(|l| l.iter().map(|&y| f64::from(y)).sum::<f64>() / l.len() as f64)
    }
}

/// Baseline and pain-induced tendencies of one subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TendencyScore {
    /// Odds of the outcome at zero pain, `exp(log_bot)`.
    pub bot: f64,
    /// Odds ratio per unit of pain, `exp(log_pot)`.
    pub pot: f64,
    pub log_bot: f64,
    pub log_pot: f64,
}

impl TendencyScore {
    pub fn from_logs(log_bot: f64, log_pot: f64) -> Self {
        Self {
            bot: log_bot.exp(),
            pot: log_pot.exp(),
            log_bot,
            log_pot,
        }
    }

    pub fn logit_at(&self, pain: f64) -> f64 {
        self.log_bot + self.log_pot * pain
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerGrads {
    pub alpha: NetworkGrads,
    pub beta: NetworkGrads,
}

impl InnerGrads {
    pub fn scale(&mut self, factor: f64) {
        self.alpha.scale(factor);
        self.beta.scale(factor);
    }

    /// Gradient tensors: alpha's then beta's, matching [`InnerModel::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut s = self.alpha.slices();
        s.extend(self.beta.slices());
        s
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

/// Stable `-[y log p + (1-y) log(1-p)]` for `p = sigmoid(logit)`.
#[inline]
pub fn cross_entropy(logit: f64, label: u8) -> f64 {
    let l = logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    let softplus = l.max(0.0) + (-l.abs()).exp().ln_1p();
    softplus - f64::from(label) * l
}

#[inline]
pub fn probability(logit: f64) -> f64 {
    nn::sigmoid(logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerModel {
    net_alpha: DenseNetwork,
    net_beta: DenseNetwork,
}

impl InnerModel {
    pub fn new(net_alpha: DenseNetwork, net_beta: DenseNetwork) -> Result<Self> {
        let (sa, sb) = (net_alpha.spec(), net_beta.spec());
        if sa.dims != sb.dims || sa.activations != sb.activations {
            return Err(Error::config("intercept and slope networks must share layer sizes and activations"));
        }
        let last = net_alpha.layers().last().expect("non-empty network");
        if last.out_dim() != 1 || last.activation() != Activation::Linear {
            return Err(Error::config("networks must end in a single linear unit"));
        }
        Ok(Self { net_alpha, net_beta })
    }

    /// Both networks from one architecture, seeded from independent streams.
    pub fn init(spec: &NetworkSpec, scheme: InitScheme, seed: u64) -> Result<Self> {
        let alpha = init_network(spec, scheme, rng::derive_seed(seed, "init:alpha"))?;
        let beta = init_network(spec, scheme, rng::derive_seed(seed, "init:beta"))?;
        Self::new(alpha, beta)
    }

    /// One linear layer per network: `logit = Z'w_a + b_a + (Z'w_b + b_b) X`,
    /// all parameters zero.
    pub fn logistic_baseline(p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::config("baseline needs at least one covariate"));
        }
        let layer = || nn::DenseLayer::new(Array2::zeros((1, p)), Array1::zeros(1), Activation::Linear, 0.0);
        Self::new(
            DenseNetwork::from_layers(p, vec![layer()?])?,
            DenseNetwork::from_layers(p, vec![layer()?])?,
        )
    }

    /// The baseline with given coefficients.
    pub fn logistic_with(w_alpha: &[f64], b_alpha: f64, w_beta: &[f64], b_beta: f64) -> Result<Self> {
        if w_alpha.len() != w_beta.len() {
            return Err(Error::config("coefficient vectors differ in length"));
        }
        let p = w_alpha.len();
        let layer = |w: &[f64], b: f64| {
            nn::DenseLayer::new(
                Array2::from_shape_vec((1, p), w.to_vec()).expect("1 x p"),
                Array1::from_elem(1, b),
                Activation::Linear,
                0.0,
            )
        };
        Self::new(
            DenseNetwork::from_layers(p, vec![layer(w_alpha, b_alpha)?])?,
            DenseNetwork::from_layers(p, vec![layer(w_beta, b_beta)?])?,
        )
    }

    pub fn net_alpha(&self) -> &DenseNetwork {
        &self.net_alpha
    }

    pub fn net_beta(&self) -> &DenseNetwork {
        &self.net_beta
    }

    pub fn input_dim(&self) -> usize {
        self.net_alpha.input_dim()
    }

    pub fn architecture(&self) -> NetworkSpec {
        self.net_alpha.spec()
    }

    pub fn num_params(&self) -> usize {
        self.net_alpha.num_params() + self.net_beta.num_params()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut s = self.net_alpha.param_slices_mut();
        s.extend(self.net_beta.param_slices_mut());
        s
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.net_alpha.flat_params();
        v.extend(self.net_beta.flat_params());
        v
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        let na = self.net_alpha.num_params();
        if params.len() != self.num_params() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        self.net_alpha.set_flat_params(&params[..na])?;
        self.net_beta.set_flat_params(&params[na..])
    }

    fn check_dim(&self, p: usize) -> Result<()> {
        if p != self.input_dim() {
            return Err(Error::contract(format!(
                "covariate length {p} does not match model input dimension {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Eval-mode network outputs `(F(Z; alpha), F(Z; beta))` for each row.
    pub fn log_scores(&self, covariates: ArrayView2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        self.check_dim(covariates.ncols())?;
        let a = self.net_alpha.predict_batch(covariates)?.column(0).to_owned();
        let b = self.net_beta.predict_batch(covariates)?.column(0).to_owned();
        Ok((a, b))
    }

    pub fn logits(&self, cohort: &Cohort) -> Result<Array1<f64>> {
        let (a, b) = self.log_scores(cohort.covariates())?;
        Ok(a + b * cohort.pain())
    }

    pub fn predict(&self, subject: &Subject) -> Result<f64> {
        let t = self.tendency(&subject.covariates)?;
        Ok(probability(t.logit_at(subject.pain)))
    }

    pub fn predict_cohort(&self, cohort: &Cohort) -> Result<Vec<f64>> {
        Ok(self.logits(cohort)?.iter().map(|&l| probability(l)).collect())
    }

    pub fn tendency(&self, covariates: &[f64]) -> Result<TendencyScore> {
        self.check_dim(covariates.len())?;
        let view = ArrayView2::from_shape((1, covariates.len()), covariates).expect("1 x p");
        let (a, b) = self.log_scores(view)?;
        Ok(TendencyScore::from_logs(a[0], b[0]))
    }

    /// Summed cross-entropy over a labeled cohort.
    pub fn batch_loss(&self, cohort: &Cohort) -> Result<f64> {
        let labels = cohort.require_labels()?;
        let logits = self.logits(cohort)?;
        Ok(logits.iter().zip(labels).map(|(&l, &y)| cross_entropy(l, y)).sum())
    }

    /// Mean cross-entropy; zero for an empty cohort.
    pub fn mean_loss(&self, cohort: &Cohort) -> Result<f64> {
        if cohort.is_empty() {
            return Ok(0.0);
        }
        Ok(self.batch_loss(cohort)? / cohort.len() as f64)
    }

    /// Eval-mode gradients of [`InnerModel::batch_loss`].
    pub fn batch_gradients(&self, cohort: &Cohort) -> Result<InnerGrads> {
        let mut unused = rng::seeded(0);
        Ok(self.loss_and_gradients(cohort, Mode::Eval, &mut unused)?.1)
    }

    /// Summed loss and its gradients for one pass in the given mode.
    ///
    /// Uses `dL/dlogit_i = p_i - y_i`, sent upstream as `(p_i - y_i)` into the
    /// intercept network and `(p_i - y_i) x_i` into the slope network.
    pub fn loss_and_gradients<R: Rng + ?Sized>(
        &self,
        cohort: &Cohort,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(f64, InnerGrads)> {
        let labels = cohort.require_labels()?;
        self.check_dim(cohort.dim())?;
        let z = cohort.covariates();
        let (a, trace_a) = self.net_alpha.forward_batch(z, mode, rng)?;
        let (b, trace_b) = self.net_beta.forward_batch(z, mode, rng)?;
        let pain = cohort.pain();
        let n = cohort.len();
        let mut loss = 0.0;
        let mut up_a = Array2::zeros((n, 1));
        let mut up_b = Array2::zeros((n, 1));
        for i in 0..n {
            let logit = a[[i, 0]] + b[[i, 0]] * pain[i];
            loss += cross_entropy(logit, labels[i]);
            let resid = nn::sigmoid(logit) - f64::from(labels[i]);
            up_a[[i, 0]] = resid;
            up_b[[i, 0]] = resid * pain[i];
        }
        let (alpha, _) = self.net_alpha.backward(&trace_a, up_a.view())?;
        let (beta, _) = self.net_beta.backward(&trace_b, up_b.view())?;
        Ok((loss, InnerGrads { alpha, beta }))
    }

    pub fn to_envelope(&self, covariate_schema_hash: Option<String>) -> ModelEnvelope {
        ModelEnvelope {
            architecture: self.architecture(),
            net_alpha: self.net_alpha.clone(),
            net_beta: self.net_beta.clone(),
            covariate_schema_hash,
        }
    }
}

/// Serialized form of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEnvelope {
    pub architecture: NetworkSpec,
    pub net_alpha: DenseNetwork,
    pub net_beta: DenseNetwork,
    pub covariate_schema_hash: Option<String>,
}

impl ModelEnvelope {
    pub fn into_model(self) -> Result<InnerModel> {
        let spec = self.net_alpha.spec();
        if spec.dims != self.architecture.dims || spec.activations != self.architecture.activations {
            return Err(Error::config("architecture does not describe the stored networks"));
        }
        InnerModel::new(self.net_alpha, self.net_beta)
    }
}
