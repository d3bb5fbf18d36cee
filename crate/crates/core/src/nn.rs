//! Dense feed-forward networks.
//!
//! A [`DenseNetwork`] is a chain of affine layers `h = act(W a + b)` with an
//! optional inverted-dropout mask applied to each layer's output. Inputs are
//! processed in row-major batches (`batch x in_dim`); a single vector is a batch
//! of one. [`DenseNetwork::forward_batch`] records a [`ForwardTrace`] that
//! [`DenseNetwork::backward`] consumes to produce exact parameter gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
    Sigmoid,
}

/// Logistic function, evaluated without overflow for either sign of `x`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative with respect to the pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    #[default]
    GlorotUniform,
    GlorotNormal,
    HeUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BiasInit {
    #[default]
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct InitScheme {
    pub weights: WeightInit,
    pub bias: BiasInit,
}

impl InitScheme {
    pub fn new(weights: WeightInit, bias: BiasInit) -> Self {
        Self { weights, bias }
    }

    /// Half-width of the uniform support for a layer, if the scheme is uniform.
    pub fn uniform_limit(&self, in_dim: usize, out_dim: usize) -> Option<f64> {
        match self.weights {
            WeightInit::GlorotUniform => Some((6.0 / (in_dim + out_dim) as f64).sqrt()),
            WeightInit::HeUniform => Some((6.0 / in_dim as f64).sqrt()),
            WeightInit::GlorotNormal => None,
        }
    }
}

/// Layer sizes, activations and dropout rates of a network, without parameters.
///
/// `dims` has one more entry than `activations`: `dims[0]` is the input width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub dropout_rates: Vec<f64>,
}

impl NetworkSpec {
    pub fn new(dims: Vec<usize>, activations: Vec<Activation>, dropout_rates: Vec<f64>) -> Result<Self> {
        let spec = Self {
            dims,
            activations,
            dropout_rates,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// ReLU hidden layers followed by a single linear output unit.
    pub fn relu_regressor(input_dim: usize, hidden: &[usize]) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mut activations = vec![Activation::Relu; hidden.len()];
        activations.push(Activation::Linear);
        let dropout_rates = vec![0.0; hidden.len() + 1];
        Self {
            dims,
            activations,
            dropout_rates,
        }
    }

    /// Same shape with the given per-layer dropout rates.
    pub fn with_dropout(mut self, rates: Vec<f64>) -> Result<Self> {
        self.dropout_rates = rates;
        self.validate()?;
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(Error::config("network needs at least an input and an output dimension"));
        }
        if self.dims.contains(&0) {
            return Err(Error::config("layer dimensions must be positive"));
        }
        let layers = self.dims.len() - 1;
        if self.activations.len() != layers {
            return Err(Error::config(format!(
                "{} layers need {} activations, got {}",
                layers,
                layers,
                self.activations.len()
            )));
        }
        if self.dropout_rates.len() != layers {
            return Err(Error::config(format!(
                "{} layers need {} dropout rates, got {}",
                layers,
                layers,
                self.dropout_rates.len()
            )));
        }
        if let Some(r) = self.dropout_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::config(format!("dropout rate {r} outside [0, 1)")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weights: Array2<f64>,
    bias: Array1<f64>,
    activation: Activation,
    dropout_rate: f64,
}

impl DenseLayer {
    /// `weights` has shape `out_dim x in_dim`.
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation, dropout_rate: f64) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::config(format!(
                "weight rows ({}) and bias length ({}) differ",
                weights.nrows(),
                bias.len()
            )));
        }
        if weights.is_empty() {
            return Err(Error::config("empty weight matrix"));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("layer parameters must be finite".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::config(format!("dropout rate {dropout_rate} outside [0, 1)")));
        }
        // standard layout keeps `as_slice` available for the optimizers
        Ok(Self {
            weights: weights.as_standard_layout().into_owned(),
            bias,
            activation,
            dropout_rate,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut Array1<f64> {
        &mut self.bias
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active.
    Train,
    /// Dropout inactive: a pure forward pass.
    Eval,
}

/// Intermediate values of one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    mode: Mode,
    shapes: Vec<(usize, usize)>,
    inputs: Array2<f64>,
    pre_activations: Vec<Array2<f64>>,
    /// Scaled keep-masks (`0` or `1/(1-rate)`); `None` is the identity.
    masks: Vec<Option<Array2<f64>>>,
    /// Layer outputs after activation and masking.
    outputs: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn masks(&self) -> &[Option<Array2<f64>>] {
        &self.masks
    }

    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre_activations
    }

    pub fn outputs(&self) -> &[Array2<f64>] {
        &self.outputs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Parameter gradients, one entry per layer, same shapes as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetworkGrads {
    pub fn zeros_like(net: &DenseNetwork) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.mapv_inplace(|v| v * factor);
            l.bias.mapv_inplace(|v| v * factor);
        }
    }

    /// Gradient tensors in the same order as [`DenseNetwork::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weights.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("contiguous"));
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetwork {
    input_dim: usize,
    layers: Vec<DenseLayer>,
}

/// Builds a network with freshly initialized parameters.
///
/// Weight draws are row-major per layer from one stream seeded by `seed`;
/// the same `(spec, scheme, seed)` always yields identical parameters.
pub fn init_network(spec: &NetworkSpec, scheme: InitScheme, seed: u64) -> Result<DenseNetwork> {
    spec.validate()?;
    let mut rng = rng::seeded(seed);
    let mut layers = Vec::with_capacity(spec.num_layers());
    for (l, (&activation, &rate)) in spec.activations.iter().zip(&spec.dropout_rates).enumerate() {
        let (in_dim, out_dim) = (spec.dims[l], spec.dims[l + 1]);
        let weights = match scheme.weights {
            WeightInit::GlorotUniform | WeightInit::HeUniform => {
                let limit = scheme.uniform_limit(in_dim, out_dim).expect("uniform scheme");
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                Array2::from_shape_simple_fn((out_dim, in_dim), || dist.sample(&mut rng))
            }
            WeightInit::GlorotNormal => {
                let sd = (2.0 / (in_dim + out_dim) as f64).sqrt();
                let dist = Normal::new(0.0, sd).expect("positive sd");
                Array2::from_shape_simple_fn((out_dim, in_dim), || dist.sample(&mut rng))
            }
        };
        let bias = match scheme.bias {
            BiasInit::Zeros => Array1::zeros(out_dim),
            BiasInit::Ones => Array1::ones(out_dim),
        };
        layers.push(DenseLayer::new(weights, bias, activation, rate)?);
    }
    DenseNetwork::from_layers(spec.dims[0], layers)
}

impl DenseNetwork {
    pub fn from_layers(input_dim: usize, layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network has no layers"));
        }
        let mut expected = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_dim() != expected {
                return Err(Error::config(format!(
                    "layer {i} expects {} inputs but receives {expected}",
                    layer.in_dim()
                )));
            }
            expected = layer.out_dim();
        }
        Ok(Self { input_dim, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(DenseLayer::out_dim).unwrap_or(0)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn spec(&self) -> NetworkSpec {
        let mut dims = vec![self.input_dim];
        dims.extend(self.layers.iter().map(DenseLayer::out_dim));
        NetworkSpec {
            dims,
            activations: self.layers.iter().map(DenseLayer::activation).collect(),
            dropout_rates: self.layers.iter().map(DenseLayer::dropout_rate).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameter tensors as flat slices: `[W_0, b_0, W_1, b_1, ...]`, row-major.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weights.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("contiguous"));
        }
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut offset = 0;
        for slice in self.param_slices_mut() {
            let n = slice.len();
            slice.copy_from_slice(&params[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim {
            return Err(Error::contract(format!(
                "input width {} does not match network input dimension {}",
                inputs.ncols(),
                self.input_dim
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        Ok(())
    }

    /// Single-vector forward pass.
    pub fn forward<R: Rng + ?Sized>(&self, input: &[f64], mode: Mode, rng: &mut R) -> Result<(Vec<f64>, ForwardTrace)> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::contract(format!("input shape: {e}")))?;
        let (out, trace) = self.forward_batch(view, mode, rng)?;
        Ok((out.row(0).to_vec(), trace))
    }

    /// Batched forward pass over the rows of `inputs`, recording a trace.
    ///
    /// In [`Mode::Train`], each layer with a nonzero dropout rate zeroes each
    /// output unit independently with that probability and scales survivors by
    /// `1/(1-rate)`. Masks are resampled on every call.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        inputs: ArrayView2<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array2<f64>, ForwardTrace)> {
        self.check_inputs(&inputs)?;
        let n = self.layers.len();
        let mut pre_activations = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(n);
        for (l, layer) in self.layers.iter().enumerate() {
            let a = if l == 0 { inputs } else { outputs[l - 1].view() };
            let z = affine(layer, a);
            let mut h = z.mapv(|v| layer.activation.apply(v));
            let mask = match mode {
                Mode::Train if layer.dropout_rate > 0.0 => {
                    let rate = layer.dropout_rate;
                    let keep = 1.0 / (1.0 - rate);
                    let m = Array2::from_shape_simple_fn(h.raw_dim(), || {
                        if rng.random::<f64>() < rate {
                            0.0
                        } else {
                            keep
                        }
                    });
                    h *= &m;
                    Some(m)
                }
                _ => None,
            };
            pre_activations.push(z);
            masks.push(mask);
            outputs.push(h);
        }
        let out = outputs.last().expect("at least one layer").clone();
        let trace = ForwardTrace {
            mode,
            shapes: self.layers.iter().map(|l| (l.in_dim(), l.out_dim())).collect(),
            inputs: inputs.to_owned(),
            pre_activations,
            masks,
            outputs,
        };
        Ok((out, trace))
    }

    /// Eval-mode batched forward pass without a trace.
    pub fn predict_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_inputs(&inputs)?;
        let mut a = affine(&self.layers[0], inputs);
        a.mapv_inplace(|v| self.layers[0].activation.apply(v));
        for layer in &self.layers[1..] {
            let mut z = affine(layer, a.view());
            z.mapv_inplace(|v| layer.activation.apply(v));
            a = z;
        }
        Ok(a)
    }

    /// Reverse-mode gradients of `sum(upstream .* output)` for a recorded pass.
    ///
    /// `upstream` has the shape of the traced output (`batch x out_dim`).
    /// Returns the parameter gradients summed over the batch and the gradient
    /// with respect to each input row.
    pub fn backward(&self, trace: &ForwardTrace, upstream: ArrayView2<f64>) -> Result<(NetworkGrads, Array2<f64>)> {
        let shapes: Vec<(usize, usize)> = self.layers.iter().map(|l| (l.in_dim(), l.out_dim())).collect();
        if shapes != trace.shapes {
            return Err(Error::contract("trace was recorded on a network with different layer shapes"));
        }
        if upstream.dim() != (trace.batch_size(), self.output_dim()) {
            return Err(Error::contract(format!(
                "upstream gradient shape {:?} does not match output shape {:?}",
                upstream.dim(),
                (trace.batch_size(), self.output_dim())
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.to_owned();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if let Some(mask) = &trace.masks[l] {
                g *= mask;
            }
            let z = &trace.pre_activations[l];
            match layer.activation {
                Activation::Linear => {}
                act => g.zip_mut_with(z, |gv, &zv| *gv *= act.derivative(zv)),
            }
            let a = if l == 0 {
                trace.inputs.view()
            } else {
                trace.outputs[l - 1].view()
            };
            let dw = g.t().dot(&a).as_standard_layout().into_owned();
            let db = g.sum_axis(Axis(0));
            let g_in = g.dot(&layer.weights);
            grads.push(LayerGrads { weights: dw, bias: db });
            g = g_in;
        }
        grads.reverse();
        Ok((NetworkGrads { layers: grads }, g))
    }
}

fn affine(layer: &DenseLayer, a: ArrayView2<f64>) -> Array2<f64> {
    let mut z = a.dot(&layer.weights.t());
    z += &layer.bias;
    z
}

// ---- serialization ----

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerDocument {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// JSON layout of a network: shape metadata plus row-major parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkDocument {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    dropout_rates: Vec<f64>,
    layers: Vec<LayerDocument>,
}

impl From<&DenseNetwork> for NetworkDocument {
    fn from(net: &DenseNetwork) -> Self {
        let spec = net.spec();
        Self {
            dims: spec.dims,
            activations: spec.activations,
            dropout_rates: spec.dropout_rates,
            layers: net
                .layers
                .iter()
                .map(|l| LayerDocument {
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<NetworkDocument> for DenseNetwork {
    type Error = Error;

    fn try_from(doc: NetworkDocument) -> Result<Self> {
        let spec = NetworkSpec::new(doc.dims, doc.activations, doc.dropout_rates)?;
        if doc.layers.len() != spec.num_layers() {
            return Err(Error::config(format!(
                "document lists {} layers but dims describe {}",
                doc.layers.len(),
                spec.num_layers()
            )));
        }
        let mut layers = Vec::with_capacity(doc.layers.len());
        for (l, layer) in doc.layers.into_iter().enumerate() {
            let (in_dim, out_dim) = (spec.dims[l], spec.dims[l + 1]);
            let weights = Array2::from_shape_vec((out_dim, in_dim), layer.weights)
                .map_err(|e| Error::config(format!("layer {l} weights: {e}")))?;
            layers.push(DenseLayer::new(
                weights,
                Array1::from(layer.bias),
                spec.activations[l],
                spec.dropout_rates[l],
            )?);
        }
        DenseNetwork::from_layers(spec.dims[0], layers)
    }
}

impl Serialize for DenseNetwork {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        NetworkDocument::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DenseNetwork {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let doc = NetworkDocument::deserialize(deserializer)?;
        DenseNetwork::try_from(doc).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn single_layer(w: Array2<f64>, b: Array1<f64>, act: Activation) -> DenseNetwork {
        let in_dim = w.ncols();
        DenseNetwork::from_layers(in_dim, vec![DenseLayer::new(w, b, act, 0.0).unwrap()]).unwrap()
    }

    fn eval(net: &DenseNetwork, x: &[f64]) -> Vec<f64> {
        net.forward(x, Mode::Eval, &mut rng::seeded(0)).unwrap().0
    }

    #[test]
    fn glorot_uniform_respects_support() {
        let spec = NetworkSpec::new(vec![2, 1], vec![Activation::Linear], vec![0.0]).unwrap();
        for seed in 0..50 {
            let net = init_network(&spec, InitScheme::default(), seed).unwrap();
            for w in net.layers()[0].weights() {
                assert!(w.abs() <= 2f64.sqrt());
            }
        }
    }

    #[test]
    fn he_uniform_and_normal_scales() {
        let spec = NetworkSpec::relu_regressor(6, &[40]);
        let he = init_network(&spec, InitScheme::new(WeightInit::HeUniform, BiasInit::Zeros), 3).unwrap();
        assert!(he.layers()[0].weights().iter().all(|w| w.abs() <= 1.0));
        let normal = init_network(&spec, InitScheme::new(WeightInit::GlorotNormal, BiasInit::Ones), 3).unwrap();
        let w = normal.layers()[0].weights();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 46.0).abs() < 0.02, "variance {var}");
        assert!(normal.layers()[1].bias().iter().all(|&b| b == 1.0));
    }

    #[test]
    fn zero_bias_init() {
        let spec = NetworkSpec::new(vec![3, 1], vec![Activation::Linear], vec![0.0]).unwrap();
        let net = init_network(&spec, InitScheme::default(), 11).unwrap();
        assert_eq!(net.layers()[0].bias(), &array![0.0]);
    }

    #[test]
    fn init_is_deterministic() {
        let spec = NetworkSpec::relu_regressor(8, &[250, 125]);
        let a = init_network(&spec, InitScheme::default(), 7).unwrap();
        let b = init_network(&spec, InitScheme::default(), 7).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        let c = init_network(&spec, InitScheme::default(), 8).unwrap();
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn mismatched_lists_are_config_errors() {
        let bad = NetworkSpec::new(vec![3, 2, 1], vec![Activation::Relu], vec![0.0, 0.0]);
        assert!(matches!(bad, Err(Error::Config(_))));
        let bad = NetworkSpec::new(vec![3], vec![], vec![]);
        assert!(matches!(bad, Err(Error::Config(_))));
        let bad = NetworkSpec::new(vec![3, 1], vec![Activation::Linear], vec![1.0]);
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn identity_linear_layer() {
        let net = single_layer(Array2::eye(3), Array1::zeros(3), Activation::Linear);
        assert_eq!(eval(&net, &[1.5, -2.0, 0.25]), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn relu_layer_clips_negative() {
        let net = single_layer(Array2::eye(2), Array1::zeros(2), Activation::Relu);
        assert_eq!(eval(&net, &[-1.0, 2.0]), vec![0.0, 2.0]);
    }

    #[test]
    fn two_layer_matches_hand_formula() {
        let w1 = array![[0.5, -1.0], [2.0, 0.25], [-0.75, 1.5]];
        let b1 = array![0.1, -0.2, 0.3];
        let w2 = array![[1.0, -0.5, 2.0]];
        let b2 = array![0.05];
        let net = DenseNetwork::from_layers(
            2,
            vec![
                DenseLayer::new(w1, b1, Activation::Relu, 0.0).unwrap(),
                DenseLayer::new(w2, b2, Activation::Sigmoid, 0.0).unwrap(),
            ],
        )
        .unwrap();
        // hidden pre-activations for x = (1, 1): -0.4, 2.05, 1.05 -> relu 0, 2.05, 1.05
        let h = [0.0, 2.05, 1.05];
        let z2: f64 = 1.0 * h[0] - 0.5 * h[1] + 2.0 * h[2] + 0.05;
        let expected = 1.0 / (1.0 + (-z2).exp());
        assert_relative_eq!(eval(&net, &[1.0, 1.0])[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_relative_eq!(sigmoid(-40.0), (-40f64).exp() / (1.0 + (-40f64).exp()), max_relative = 1e-12);
        assert!(sigmoid(-700.0) > 0.0);
    }

    #[test]
    fn wrong_width_and_nonfinite_inputs_error() {
        let net = single_layer(Array2::eye(2), Array1::zeros(2), Activation::Linear);
        let mut r = rng::seeded(0);
        assert!(matches!(net.forward(&[1.0], Mode::Eval, &mut r), Err(Error::Contract(_))));
        assert!(matches!(net.forward(&[1.0, 2.0, 3.0], Mode::Eval, &mut r), Err(Error::Contract(_))));
        assert!(matches!(net.forward(&[1.0, f64::NAN], Mode::Eval, &mut r), Err(Error::Numeric(_))));
    }

    #[test]
    fn linear_backward_is_input() {
        let net = single_layer(array![[0.3, -0.7, 1.1]], array![0.2], Activation::Linear);
        let x = [2.0, -1.0, 0.5];
        let (_, trace) = net.forward(&x, Mode::Eval, &mut rng::seeded(0)).unwrap();
        let (g, gin) = net.backward(&trace, array![[1.0]].view()).unwrap();
        assert_eq!(g.layers[0].weights, array![[2.0, -1.0, 0.5]]);
        assert_eq!(g.layers[0].bias, array![1.0]);
        assert_eq!(gin, array![[0.3, -0.7, 1.1]]);
    }

    #[test]
    fn relu_dead_unit_has_zero_gradient() {
        let net = DenseNetwork::from_layers(
            1,
            vec![
                DenseLayer::new(array![[1.0], [-1.0]], array![0.0, 0.0], Activation::Relu, 0.0).unwrap(),
                DenseLayer::new(array![[1.0, 1.0]], array![0.0], Activation::Linear, 0.0).unwrap(),
            ],
        )
        .unwrap();
        let (_, trace) = net.forward(&[2.0], Mode::Eval, &mut rng::seeded(0)).unwrap();
        let (g, _) = net.backward(&trace, array![[1.0]].view()).unwrap();
        // unit 2 has pre-activation -2
        assert_eq!(g.layers[0].weights[[1, 0]], 0.0);
        assert_eq!(g.layers[0].bias[1], 0.0);
        assert_eq!(g.layers[0].weights[[0, 0]], 2.0);
    }

    #[test]
    fn backward_rejects_foreign_trace() {
        let a = init_network(&NetworkSpec::relu_regressor(3, &[4]), InitScheme::default(), 1).unwrap();
        let b = init_network(&NetworkSpec::relu_regressor(3, &[5]), InitScheme::default(), 1).unwrap();
        let (_, trace) = a.forward(&[0.1, 0.2, 0.3], Mode::Eval, &mut rng::seeded(0)).unwrap();
        assert!(matches!(b.backward(&trace, array![[1.0]].view()), Err(Error::Contract(_))));
    }

    #[test]
    fn eval_mode_has_identity_masks() {
        let spec = NetworkSpec::relu_regressor(4, &[16, 8]).with_dropout(vec![0.5, 0.3, 0.0]).unwrap();
        let net = init_network(&spec, InitScheme::default(), 2).unwrap();
        let (out, trace) = net.forward(&[0.1, -0.4, 0.9, 1.2], Mode::Eval, &mut rng::seeded(0)).unwrap();
        assert!(trace.masks().iter().all(Option::is_none));
        let again = net.predict_batch(ndarray::aview2(&[[0.1, -0.4, 0.9, 1.2]])).unwrap();
        assert_eq!(out[0], again[[0, 0]]);
    }

    #[test]
    fn train_masks_are_reproducible() {
        let spec = NetworkSpec::relu_regressor(4, &[16]).with_dropout(vec![0.5, 0.0]).unwrap();
        let net = init_network(&spec, InitScheme::default(), 2).unwrap();
        let x = [0.3, 0.1, -0.2, 0.8];
        let (_, t1) = net.forward(&x, Mode::Train, &mut rng::seeded(5)).unwrap();
        let (_, t2) = net.forward(&x, Mode::Train, &mut rng::seeded(5)).unwrap();
        assert_eq!(t1.masks()[0], t2.masks()[0]);
        let m = t1.masks()[0].as_ref().unwrap();
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_expectation_matches_eval() {
        // dropout feeding the linear output layer is unbiased in expectation
        let spec = NetworkSpec::relu_regressor(3, &[12]).with_dropout(vec![0.4, 0.0]).unwrap();
        let net = init_network(&spec, InitScheme::new(WeightInit::GlorotUniform, BiasInit::Ones), 9).unwrap();
        let x = [0.5, -1.0, 0.75];
        let target = eval(&net, &x)[0];
        let mut r = rng::seeded(123);
        let n = 10_000;
        let draws: Vec<f64> = (0..n).map(|_| net.forward(&x, Mode::Train, &mut r).unwrap().0[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(se > 0.0);
        assert!((mean - target).abs() < 3.0 * se, "mean {mean} eval {target} se {se}");
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let spec = NetworkSpec::relu_regressor(5, &[7, 3]).with_dropout(vec![0.1, 0.0, 0.0]).unwrap();
        let net = init_network(&spec, InitScheme::new(WeightInit::GlorotNormal, BiasInit::Zeros), 4).unwrap();
        let text = serde_json::to_string(&net).unwrap();
        let back: DenseNetwork = serde_json::from_str(&text).unwrap();
        assert_eq!(back, net);
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["dims"], serde_json::json!([5, 7, 3, 1]));
        assert_eq!(value["activations"], serde_json::json!(["relu", "relu", "linear"]));
        assert_eq!(value["layers"][0]["weights"].as_array().unwrap().len(), 35);
    }

    #[test]
    fn json_with_wrong_weight_count_is_rejected() {
        let text = r#"{"dims":[2,1],"activations":["linear"],"dropout_rates":[0.0],
                       "layers":[{"weights":[1.0],"bias":[0.0]}]}"#;
        assert!(serde_json::from_str::<DenseNetwork>(text).is_err());
    }

    /// Central finite differences of `sum(c .* net(x))` using forward passes only.
    fn fd_gradient(net: &DenseNetwork, x: ArrayView2<f64>, c: ArrayView2<f64>, step: f64) -> Vec<f64> {
        let base = net.flat_params();
        let objective = |p: &[f64]| {
            let mut n2 = net.clone();
            n2.set_flat_params(p).unwrap();
            let out = n2.predict_batch(x).unwrap();
            (&out * &c).sum()
        };
        (0..base.len())
            .map(|i| {
                let mut plus = base.clone();
                plus[i] += step;
                let mut minus = base.clone();
                minus[i] -= step;
                (objective(&plus) - objective(&minus)) / (2.0 * step)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn backward_matches_finite_differences_8_5_1() {
        let spec = NetworkSpec::new(
            vec![8, 5, 1],
            vec![Activation::Sigmoid, Activation::Linear],
            vec![0.0, 0.0],
        )
        .unwrap();
        let net = init_network(&spec, InitScheme::default(), 21).unwrap();
        let mut r = rng::seeded(1);
        let x = Array2::from_shape_simple_fn((3, 8), || r.random::<f64>() * 2.0 - 1.0);
        let c = array![[1.0], [-0.5], [2.0]];
        let (_, trace) = net.forward_batch(x.view(), Mode::Eval, &mut r).unwrap();
        let (g, _) = net.backward(&trace, c.view()).unwrap();
        let fd = fd_gradient(&net, x.view(), c.view(), 1e-6);
        for (a, b) in g.flatten().iter().zip(&fd) {
            assert!(rel_err(*a, *b) < 1e-5, "analytic {a} fd {b}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = init_network(&NetworkSpec::relu_regressor(4, &[6, 3]), InitScheme::default(), 8).unwrap();
        let x = array![[0.3, -0.2, 0.9, 0.4]];
        let (_, trace) = net.forward_batch(x.view(), Mode::Eval, &mut rng::seeded(0)).unwrap();
        let (_, gin) = net.backward(&trace, array![[1.0]].view()).unwrap();
        for j in 0..4 {
            let mut p = x.clone();
            p[[0, j]] += 1e-6;
            let mut m = x.clone();
            m[[0, j]] -= 1e-6;
            let fd = (net.predict_batch(p.view()).unwrap()[[0, 0]] - net.predict_batch(m.view()).unwrap()[[0, 0]]) / 2e-6;
            assert!(rel_err(gin[[0, j]], fd) < 1e-5);
        }
    }

    #[test]
    fn dropout_backward_matches_masked_finite_differences() {
        // with a fixed mask, the traced computation is a deterministic function;
        // reproduce it by replaying the same rng seed for every perturbation
        let spec = NetworkSpec::relu_regressor(3, &[6]).with_dropout(vec![0.5, 0.0]).unwrap();
        let net = init_network(&spec, InitScheme::new(WeightInit::GlorotUniform, BiasInit::Ones), 4).unwrap();
        let x = array![[0.2, -0.5, 0.8]];
        let (_, trace) = net.forward_batch(x.view(), Mode::Train, &mut rng::seeded(77)).unwrap();
        let (g, _) = net.backward(&trace, array![[1.0]].view()).unwrap();
        let base = net.flat_params();
        let replay = |p: &[f64]| {
            let mut n2 = net.clone();
            n2.set_flat_params(p).unwrap();
            n2.forward_batch(x.view(), Mode::Train, &mut rng::seeded(77)).unwrap().0[[0, 0]]
        };
        for (i, a) in g.flatten().iter().enumerate() {
            let mut plus = base.clone();
            plus[i] += 1e-6;
            let mut minus = base.clone();
            minus[i] -= 1e-6;
            let fd = (replay(&plus) - replay(&minus)) / 2e-6;
            assert!(rel_err(*a, fd) < 1e-5, "param {i}: {a} vs {fd}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn random_networks_pass_gradient_check(
            seed in 0u64..10_000,
            depth in 1usize..=4,
            width_seed in 0u64..1000,
        ) {
            let mut r = rng::seeded(width_seed);
            let mut dims = vec![r.random_range(1..=16usize)];
            for _ in 0..depth - 1 {
                dims.push(r.random_range(1..=16usize));
            }
            dims.push(r.random_range(1..=3usize));
            let acts: Vec<Activation> = (0..depth)
                .map(|_| [Activation::Sigmoid, Activation::Linear, Activation::Relu][r.random_range(0..3usize)])
                .collect();
            let spec = NetworkSpec::new(dims.clone(), acts, vec![0.0; depth]).unwrap();
            let net = init_network(&spec, InitScheme::new(WeightInit::GlorotNormal, BiasInit::Ones), seed).unwrap();
            let x = Array2::from_shape_simple_fn((2, dims[0]), || r.random::<f64>() * 2.0 - 1.0);
            let c = Array2::from_shape_simple_fn((2, *dims.last().unwrap()), || r.random::<f64>() - 0.5);
            let (_, trace) = net.forward_batch(x.view(), Mode::Eval, &mut r).unwrap();
            let (g, _) = net.backward(&trace, c.view()).unwrap();
            let fd = fd_gradient(&net, x.view(), c.view(), 1e-6);
            for (a, b) in g.flatten().iter().zip(&fd) {
                prop_assert!(rel_err(*a, *b) < 1e-5, "analytic {} fd {}", a, b);
            }
        }

        #[test]
        fn forward_never_truncates(extra in 1usize..5, short in 0usize..3) {
            let net = init_network(&NetworkSpec::relu_regressor(3, &[2]), InitScheme::default(), 0).unwrap();
            let long = vec![0.5; 3 + extra];
            let short_v = vec![0.5; short];
            prop_assert!(net.forward(&long, Mode::Eval, &mut rng::seeded(0)).is_err());
            prop_assert!(net.forward(&short_v, Mode::Eval, &mut rng::seeded(0)).is_err());
        }
    }
}
