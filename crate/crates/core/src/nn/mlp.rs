//! Dense multilayer perceptron with a cached forward pass and analytic backward pass.
//!
//! Weights are stored row-major with shape `(out, in)`; batched inputs are
//! `(batch, in)` matrices. A backward pass returns the gradient of
//! `sum_b <grad_output[b], output[b]>`, so batch averaging belongs to the loss
//! that builds `grad_output`.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const LEAKY_RELU_SLOPE: f64 = 0.01;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_RELU_SLOPE * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and the activation output `y`.
    #[inline]
    pub fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_RELU_SLOPE
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::LeakyRelu => 2,
            Activation::Tanh => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::LeakyRelu,
            3 => Activation::Tanh,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub(crate) weights: Array2<f64>,
    pub(crate) bias: Array1<f64>,
    pub(crate) activation: Activation,
}

impl Layer {
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Per-layer parameter gradients, same shapes as the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Gradients {
            layers: mlp
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            w.mapv_inplace(|v| v * factor);
            b.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b.iter()).all(|v| v.is_finite()))
    }

    /// Flattened in the same order as [`Mlp::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Activations kept from a forward pass, needed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// `inputs[l]` is the input to layer `l`; `outputs[l]` its activation output.
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("network has at least one layer")
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden_activation: Activation,
    output_activation: Activation,
    layers: Vec<Layer>,
    version: u64,
}

impl Mlp {
    /// Builds a network with weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` and zero biases.
    pub fn new(
        sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(sizes, hidden_activation, output_activation, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidLayerSizes(sizes.to_vec()));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..=bound));
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                    activation: if l + 1 == n { output_activation } else { hidden_activation },
                }
            })
            .collect();
        Ok(Mlp {
            sizes: sizes.to_vec(),
            hidden_activation,
            output_activation,
            layers,
            version: fresh_version(),
        })
    }

    /// All weights and biases set to zero.
    pub fn zeros(
        sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        let mut mlp = Self::new(sizes, hidden_activation, output_activation, 0)?;
        mlp.map_params(|_| 0.0);
        Ok(mlp)
    }

    pub(crate) fn from_parts(
        sizes: Vec<usize>,
        hidden_activation: Activation,
        output_activation: Activation,
        layers: Vec<Layer>,
    ) -> Self {
        Mlp { sizes, hidden_activation, output_activation, layers, version: fresh_version() }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Row-major weights then bias, layer by layer.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        let mut it = params.iter();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().unwrap();
            }
        }
        self.version = fresh_version();
        Ok(())
    }

    pub fn map_params(&mut self, mut f: impl FnMut(f64) -> f64) {
        for l in &mut self.layers {
            l.weights.mapv_inplace(&mut f);
            l.bias.mapv_inplace(&mut f);
        }
        self.version = fresh_version();
    }

    /// Mutable access to each layer's (weights, bias) as flat slices, bumping the version.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.version = fresh_version();
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weights.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// `self <- (1 - tau) * self + tau * source`.
    pub fn polyak_from(&mut self, source: &Mlp, tau: f64) {
        for (dst, src) in self.layers.iter_mut().zip(&source.layers) {
            dst.weights.zip_mut_with(&src.weights, |d, &s| *d = (1.0 - tau) * *d + tau * s);
            dst.bias.zip_mut_with(&src.bias, |d, &s| *d = (1.0 - tau) * *d + tau * s);
        }
        self.version = fresh_version();
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), actual: cols });
        }
        Ok(())
    }

    /// Batched forward pass keeping every intermediate for backward.
    pub fn forward(&self, input: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(input.ncols())?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre_activations = Vec::with_capacity(n);
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(n);
        let mut current = input.to_owned();
        for layer in &self.layers {
            let mut z = current.dot(&layer.weights.t());
            z += &layer.bias;
            let act = layer.activation;
            let y = z.mapv(|v| act.apply(v));
            inputs.push(current);
            pre_activations.push(z);
            current = y.clone();
            outputs.push(y);
        }
        let cache = ForwardCache { version: self.version, inputs, pre_activations, outputs };
        Ok((current, cache))
    }

    /// Batched forward pass without a cache.
    pub fn predict(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let mut current: Option<Array2<f64>> = None;
        for layer in &self.layers {
            let mut z = match &current {
                None => input.dot(&layer.weights.t()),
                Some(x) => x.dot(&layer.weights.t()),
            };
            z += &layer.bias;
            let act = layer.activation;
            z.mapv_inplace(|v| act.apply(v));
            current = Some(z);
        }
        Ok(current.expect("at least one layer"))
    }

    pub fn predict_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let view = ArrayView2::from_shape((1, input.len()), input).expect("contiguous row");
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    /// Gradients of `sum_b <output_gradient[b], output[b]>` with respect to the
    /// parameters and to the input batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_gradient: ArrayView2<'_, f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        if cache.version != self.version {
            return Err(Error::StaleCache { cache: cache.version, network: self.version });
        }
        let out = cache.output();
        if output_gradient.dim() != out.dim() {
            return Err(Error::DimensionMismatch {
                expected: out.len(),
                actual: output_gradient.len(),
            });
        }
        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        let mut upstream = output_gradient.to_owned();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let act = layer.activation;
            let mut dz = upstream;
            if act != Activation::Identity {
                ndarray::Zip::from(&mut dz)
                    .and(&cache.pre_activations[l])
                    .and(&cache.outputs[l])
                    .for_each(|d, &z, &y| *d *= act.derivative(z, y));
            }
            let mut dw = dz.t().dot(&cache.inputs[l]);
            if !dw.is_standard_layout() {
                dw = dw.as_standard_layout().into_owned();
            }
            let db = dz.sum_axis(Axis(0));
            upstream = dz.dot(&layer.weights);
            grads.push((dw, db));
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, upstream))
    }
}
