//! Minimal dense feed-forward network with hand-derived reverse-mode gradients.
//!
//! Layers compute `act(Ŵ·x + b)`. With Lipschitz normalization enabled, each
//! layer owns a trainable bound `c` and its weight rows are rescaled by
//! `min(1, softplus(c) / Σ_j |W_ij|)` before the affine map, which caps the
//! layer's ∞-norm Lipschitz constant at `softplus(c)`. The product of those
//! bounds is exposed as a differentiable penalty.
//!
//! Batches are row-major `N × dim` matrices so whole images can be pushed
//! through in a handful of matrix products.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("input has {got} features, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("upstream gradient has shape {got:?}, expected {expected:?}")]
    GradDim {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("forward cache does not belong to this network")]
    StaleCache,
    #[error("layer dimensions do not chain: {0}")]
    BadShape(String),
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLen { expected: usize, got: usize },
}

/// Rows per block in [`DenseNet::forward_batch`].
const FORWARD_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Relu => z.max(0.0),
            Self::Sigmoid => sigmoid(z),
            Self::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Sigmoid => a * (1.0 - a),
            Self::Identity => 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `outputs × inputs`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub lipschitz_c: f64,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    fn row_abs_sums(&self) -> Vec<f64> {
        self.weights
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|w| w.abs()).sum())
            .collect()
    }

    /// Weights after Lipschitz row rescaling.
    pub fn effective_weights(&self, normalize: bool) -> Array2<f64> {
        if !normalize {
            return self.weights.clone();
        }
        let bound = softplus(self.lipschitz_c);
        let sums = self.row_abs_sums();
        let mut w = self.weights.clone();
        for (mut row, &r) in w.rows_mut().into_iter().zip(&sums) {
            if r > bound {
                row *= bound / r;
            }
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<DenseLayer>,
    /// Whether Lipschitz row normalization is applied in the forward pass.
    pub lipschitz: bool,
}

/// Intermediate values retained by [`DenseNet::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layer_inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    effective: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub lipschitz_c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
    /// Gradient with respect to the input batch.
    pub input: Array2<f64>,
}

impl NetGrads {
    /// Flattens in the same order as [`DenseNet::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
            out.push(l.lipschitz_c);
        }
        out
    }
}

impl DenseNet {
    /// Builds a network with layer widths `dims` (input first) and one
    /// activation per layer. Weights use scaled normal initialisation; each
    /// Lipschitz bound starts at the layer's largest absolute row sum so the
    /// normalisation is inactive at initialisation.
    pub fn new<R: Rng>(
        dims: &[usize],
        activations: &[Activation],
        lipschitz: bool,
        rng: &mut R,
    ) -> Result<Self, NetError> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(NetError::BadShape(format!(
                "{} dims for {} activations",
                dims.len(),
                activations.len()
            )));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let gain = if activation == Activation::Relu {
                    2.0
                } else {
                    1.0
                };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).unwrap();
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| normal.sample(rng));
                let mut layer = DenseLayer {
                    weights,
                    bias: Array1::zeros(fan_out),
                    lipschitz_c: 0.0,
                    activation,
                };
                let max_row = layer.row_abs_sums().into_iter().fold(1e-6, f64::max);
                layer.lipschitz_c = softplus_inv(max_row);
                layer
            })
            .collect();
        Ok(Self { layers, lipschitz })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs()).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len() + 1)
            .sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
            out.push(l.lipschitz_c);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<(), NetError> {
        if params.len() != self.param_count() {
            return Err(NetError::ParamLen {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut i = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut() {
                *w = params[i];
                i += 1;
            }
            for b in l.bias.iter_mut() {
                *b = params[i];
                i += 1;
            }
            l.lipschitz_c = params[i];
            i += 1;
        }
        Ok(())
    }

    /// Zeroes the weights and bias of the final layer.
    pub fn zero_last_layer(&mut self) {
        if let Some(l) = self.layers.last_mut() {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    /// Evaluates a single input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.forward_batch(batch)?.into_raw_vec_and_offset().0)
    }

    /// Evaluates an `N × input_dim` batch without retaining intermediates.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NetError> {
        self.check_input(x.ncols())?;
        let weights: Vec<Array2<f64>> = self
            .layers
            .iter()
            .map(|l| l.effective_weights(self.lipschitz))
            .collect();
        let mut out = Array2::zeros((x.nrows(), self.output_dim()));
        for (rows, mut dst) in x
            .axis_chunks_iter(Axis(0), FORWARD_CHUNK)
            .zip(out.axis_chunks_iter_mut(Axis(0), FORWARD_CHUNK))
        {
            let mut a = rows.to_owned();
            for (l, w) in self.layers.iter().zip(&weights) {
                let mut z = a.dot(&w.t());
                z += &l.bias;
                z.mapv_inplace(|v| l.activation.apply(v));
                a = z;
            }
            dst.assign(&a);
        }
        Ok(out)
    }

    pub fn forward_cached(&self, x: Array2<f64>) -> Result<ForwardCache, NetError> {
        self.check_input(x.ncols())?;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut effective = Vec::with_capacity(self.layers.len());
        let mut a = x;
        for l in &self.layers {
            let w = l.effective_weights(self.lipschitz);
            let mut z = a.dot(&w.t());
            z += &l.bias;
            let out = z.mapv(|v| l.activation.apply(v));
            layer_inputs.push(a);
            pre_activations.push(z);
            effective.push(w);
            a = out;
        }
        Ok(ForwardCache {
            layer_inputs,
            pre_activations,
            effective,
            output: a,
        })
    }

    /// Reverse pass: exact gradients of `Σ grad_out ⊙ output` with respect to
    /// every weight, bias, Lipschitz bound and the input batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: ArrayView2<f64>,
    ) -> Result<NetGrads, NetError> {
        self.backward_impl(cache, grad_out, true)
    }

    /// [`DenseNet::backward`] without the input gradient, which is left empty.
    pub fn param_backward(
        &self,
        cache: &ForwardCache,
        grad_out: ArrayView2<f64>,
    ) -> Result<NetGrads, NetError> {
        self.backward_impl(cache, grad_out, false)
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        grad_out: ArrayView2<f64>,
        want_input: bool,
    ) -> Result<NetGrads, NetError> {
        if cache.layer_inputs.len() != self.layers.len()
            || cache
                .effective
                .iter()
                .zip(&self.layers)
                .any(|(w, l)| w.dim() != l.weights.dim())
        {
            return Err(NetError::StaleCache);
        }
        if grad_out.dim() != cache.output.dim() {
            return Err(NetError::GradDim {
                expected: cache.output.dim(),
                got: grad_out.dim(),
            });
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_out.to_owned();
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_activations[idx];
            let a_out = if idx + 1 == self.layers.len() {
                &cache.output
            } else {
                &cache.layer_inputs[idx + 1]
            };
            let mut dz = upstream;
            ndarray::Zip::from(&mut dz)
                .and(z)
                .and(a_out)
                .for_each(|g, &zv, &av| *g *= l.activation.derivative(zv, av));
            let d_eff = dz.t().dot(&cache.layer_inputs[idx]);
            let d_bias = dz.sum_axis(Axis(0));
            upstream = if idx > 0 || want_input {
                dz.dot(&cache.effective[idx])
            } else {
                Array2::zeros((0, 0))
            };
            let (d_w, d_c) = self.normalization_backward(l, d_eff);
            layers.push(LayerGrads {
                weights: d_w,
                bias: d_bias,
                lipschitz_c: d_c,
            });
        }
        layers.reverse();
        Ok(NetGrads {
            layers,
            input: upstream,
        })
    }

    /// Chains `∂L/∂Ŵ` through the row rescaling to `∂L/∂W` and `∂L/∂c`.
    fn normalization_backward(&self, l: &DenseLayer, d_eff: Array2<f64>) -> (Array2<f64>, f64) {
        if !self.lipschitz {
            return (d_eff, 0.0);
        }
        let bound = softplus(l.lipschitz_c);
        let d_bound = sigmoid(l.lipschitz_c);
        let sums = l.row_abs_sums();
        let mut d_w = d_eff;
        let mut d_c = 0.0;
        for ((mut g_row, w_row), &r) in d_w.rows_mut().into_iter().zip(l.weights.rows()).zip(&sums)
        {
            if r <= bound {
                continue;
            }
            let gw: f64 = g_row.iter().zip(w_row.iter()).map(|(g, w)| g * w).sum();
            let s = bound / r;
            let k = bound / (r * r) * gw;
            for (g, &w) in g_row.iter_mut().zip(w_row.iter()) {
                *g = s * *g - k * w.signum();
            }
            d_c += d_bound * gw / r;
        }
        (d_w, d_c)
    }

    /// `∏ softplus(c_i)` over layers.
    pub fn lipschitz_penalty(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| softplus(l.lipschitz_c))
            .product()
    }

    /// Gradient of [`DenseNet::lipschitz_penalty`] with respect to each `c_i`.
    pub fn lipschitz_penalty_grad(&self) -> Vec<f64> {
        let bounds: Vec<f64> = self
            .layers
            .iter()
            .map(|l| softplus(l.lipschitz_c))
            .collect();
        (0..bounds.len())
            .map(|i| {
                let others: f64 = bounds
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, b)| b)
                    .product();
                others * sigmoid(self.layers[i].lipschitz_c)
            })
            .collect()
    }

    /// Largest relative error between [`DenseNet::backward`] and central finite
    /// differences (step `1e-4`) over every parameter and input coordinate,
    /// using the scalar objective `Σ_k w_k·out_k` with fixed weights `w_k`.
    pub fn grad_check(&self, x: &[f64]) -> Result<f64, NetError> {
        const STEP: f64 = 1e-4;
        let out_dim = self.output_dim();
        let proj: Vec<f64> = (0..out_dim).map(|k| 1.0 + 0.37 * k as f64).collect();
        let objective = |net: &DenseNet, input: &[f64]| -> Result<f64, NetError> {
            Ok(net
                .forward(input)?
                .iter()
                .zip(&proj)
                .map(|(o, w)| o * w)
                .sum())
        };
        let batch = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
        let cache = self.forward_cached(batch)?;
        let g_out = Array2::from_shape_vec((1, out_dim), proj.clone()).expect("row vector");
        let grads = self.backward(&cache, g_out.view())?;

        let mut worst: f64 = 0.0;
        let params = self.flat_params();
        let analytic = grads.flatten();
        let mut probe = self.clone();
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] = params[i] + STEP;
            probe.set_flat_params(&p)?;
            let up = objective(&probe, x)?;
            p[i] = params[i] - STEP;
            probe.set_flat_params(&p)?;
            let down = objective(&probe, x)?;
            worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * STEP)));
        }
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] = x[i] + STEP;
            let up = objective(self, &xp)?;
            xp[i] = x[i] - STEP;
            let down = objective(self, &xp)?;
            worst = worst.max(relative_error(
                grads.input[[0, i]],
                (up - down) / (2.0 * STEP),
            ));
        }
        Ok(worst)
    }

    fn check_input(&self, got: usize) -> Result<(), NetError> {
        if got != self.input_dim() {
            return Err(NetError::InputDim {
                expected: self.input_dim(),
                got,
            });
        }
        Ok(())
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`; the floor keeps exact zeros from dividing
/// by zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Adam state for a whole network, updated through flat parameter vectors.
#[derive(Debug, Clone)]
pub struct NetOptimizer {
    adam: crate::optim::Adam,
    pub lr: f64,
}

impl NetOptimizer {
    pub fn new(net: &DenseNet, lr: f64) -> Self {
        Self {
            adam: crate::optim::Adam::new(net.param_count()),
            lr,
        }
    }

    pub fn step(&mut self, net: &mut DenseNet, grads: &[f64]) -> Result<(), NetError> {
        let mut params = net.flat_params();
        if grads.len() != params.len() {
            return Err(NetError::ParamLen {
                expected: params.len(),
                got: grads.len(),
            });
        }
        self.adam.step(&mut params, grads, self.lr);
        net.set_flat_params(&params)
    }
}
