use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::rng;

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Relu,
    Softmax,
    Identity,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Elu => "elu",
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
            Activation::Identity => "identity",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Elu => 0,
            Activation::Relu => 1,
            Activation::Softmax => 2,
            Activation::Identity => 3,
            Activation::Sigmoid => 4,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Elu,
            1 => Activation::Relu,
            2 => Activation::Softmax,
            3 => Activation::Identity,
            4 => Activation::Sigmoid,
            _ => return None,
        })
    }

    fn is_output_only(self) -> bool {
        matches!(self, Activation::Softmax | Activation::Sigmoid)
    }

    fn apply(self, z: &mut Matrix) {
        match self {
            Activation::Identity => {}
            Activation::Elu => {
                for v in z.data_mut() {
                    if *v <= 0.0 {
                        *v = v.exp_m1();
                    }
                }
            }
            Activation::Relu => {
                for v in z.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Activation::Sigmoid => {
                for v in z.data_mut() {
                    *v = sigmoid(*v);
                }
            }
            Activation::Softmax => {
                for r in 0..z.rows() {
                    softmax_in_place(z.row_mut(r));
                }
            }
        }
    }

    /// Gradient w.r.t. the pre-activation given the post-activation `y`.
    fn backward(self, y: &Matrix, grad: &Matrix) -> Matrix {
        match self {
            Activation::Identity => grad.clone(),
            Activation::Elu => {
                let mut out = grad.clone();
                for (g, &yv) in out.data_mut().iter_mut().zip(y.data()) {
                    if yv <= 0.0 {
                        *g *= yv + 1.0;
                    }
                }
                out
            }
            Activation::Relu => {
                let mut out = grad.clone();
                for (g, &yv) in out.data_mut().iter_mut().zip(y.data()) {
                    if yv <= 0.0 {
                        *g = 0.0;
                    }
                }
                out
            }
            Activation::Sigmoid => {
                let mut out = grad.clone();
                for (g, &yv) in out.data_mut().iter_mut().zip(y.data()) {
                    *g *= yv * (1.0 - yv);
                }
                out
            }
            Activation::Softmax => {
                let mut out = grad.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let inner: f64 = grad.row(r).iter().zip(yr).map(|(g, p)| g * p).sum();
                    for (o, (&g, &p)) in out.row_mut(r).iter_mut().zip(grad.row(r).iter().zip(yr)) {
                        *o = p * (g - inner);
                    }
                }
                out
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// One fully-connected layer: `act(x · W + b)` with `W` of shape `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(input: usize, output: usize, activation: Activation, rng: &mut rng::Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Dense {
            weight: Matrix::from_vec(input, output, data).expect("sized above"),
            bias: vec![0.0; output],
            activation,
        }
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Dense {
            weight: Matrix::zeros(input, output),
            bias: vec![0.0; output],
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    fn param_count(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }
}

/// A stack of dense layers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpNet {
    layers: Vec<Dense>,
    #[serde(skip, default = "fresh_stamp")]
    stamp: u64,
}

impl PartialEq for MlpNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations recorded by [`MlpNet::forward`], consumed by
/// [`MlpNet::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    stamp: u64,
    inputs: Vec<Matrix>,
    outputs: Vec<Matrix>,
}

impl ForwardCache {
    /// Post-activation output of layer `l`.
    pub fn layer_output(&self, l: usize) -> &Matrix {
        &self.outputs[l]
    }

    pub fn layer_input(&self, l: usize) -> &Matrix {
        &self.inputs[l]
    }

    pub fn output(&self) -> &Matrix {
        self.outputs.last().expect("nets have at least one layer")
    }
}

/// Parameter gradients, one `(weight, bias)` pair per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &MlpNet) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.input_dim(), l.output_dim()), vec![0.0; l.output_dim()]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape("gradient layer counts differ".into()));
        }
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.add_assign(ow)?;
            for (x, y) in b.iter_mut().zip(ob) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.scale(s);
            for x in b.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.data().iter().all(|&x| x == 0.0) && b.iter().all(|&x| x == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.is_finite() && b.iter().all(|x| x.is_finite()))
    }
}

impl MlpNet {
    /// Builds a net with layer widths `dims` (input first), `hidden`
    /// activations between layers and `output` on the last layer.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Param("an MLP needs at least input and output widths".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Param(format!("zero-width layer in {dims:?}")));
        }
        let mut rng = rng::seeded(seed);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::glorot(dims[i], dims[i + 1], act, &mut rng)
            })
            .collect();
        MlpNet::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Param("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} for {} outputs",
                    l.bias.len(),
                    l.output_dim()
                )));
            }
            if i + 1 < layers.len() {
                if l.activation.is_output_only() {
                    return Err(Error::Param(format!(
                        "layer {i}: {} is only allowed on the final layer",
                        l.activation.name()
                    )));
                }
                if l.output_dim() != layers[i + 1].input_dim() {
                    return Err(Error::Shape(format!(
                        "layer {i} emits {} but layer {} expects {}",
                        l.output_dim(),
                        i + 1,
                        layers[i + 1].input_dim()
                    )));
                }
            }
        }
        Ok(MlpNet {
            layers,
            stamp: fresh_stamp(),
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access to the layers; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.stamp = fresh_stamp();
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Widths from input to output, e.g. `[2, 128, 128, 64]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Dense::output_dim));
        d
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "net expects {} input columns, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("network input contains NaN or Inf".into()));
        }
        Ok(())
    }

    fn layer_forward(layer: &Dense, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul(&layer.weight)?;
        z.add_row_vector(&layer.bias);
        layer.activation.apply(&mut z);
        Ok(z)
    }

    /// Inference without recording activations.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in &self.layers {
            h = Self::layer_forward(l, &h)?;
        }
        if !h.is_finite() {
            return Err(Error::NonFinite("network output contains NaN or Inf".into()));
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let y = Self::layer_forward(l, &h)?;
            inputs.push(h);
            h = y.clone();
            outputs.push(y);
        }
        if !h.is_finite() {
            return Err(Error::NonFinite("network output contains NaN or Inf".into()));
        }
        Ok((
            h,
            ForwardCache {
                stamp: self.stamp,
                inputs,
                outputs,
            },
        ))
    }

    /// Backpropagates `grad_out` (gradient of the loss w.r.t. the net's
    /// output). Parameter gradients are the true gradients; the returned
    /// input gradient is multiplied by `reversal_scale`, so `-λ` turns
    /// this net into a gradient-reversal head for whatever feeds it.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &Matrix,
        reversal_scale: f64,
    ) -> Result<(Gradients, Matrix)> {
        if cache.stamp != self.stamp || cache.outputs.len() != self.layers.len() {
            return Err(Error::State(
                "forward cache does not belong to the current parameters".into(),
            ));
        }
        if grad_out.shape() != cache.output().shape() {
            return Err(Error::Shape(format!(
                "grad_out {:?} vs output {:?}",
                grad_out.shape(),
                cache.output().shape()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let delta = layer.activation.backward(&cache.outputs[l], &g);
            let wgrad = cache.inputs[l].t_matmul(&delta)?;
            let bgrad = delta.column_sums();
            g = delta.matmul_t(&layer.weight)?;
            layers.push((wgrad, bgrad));
        }
        layers.reverse();
        if reversal_scale != 1.0 {
            g.scale(reversal_scale);
        }
        Ok((Gradients { layers }, g))
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for a net with {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for l in self.layers_mut() {
            let nw = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// One optimizer step with `grads`.
    pub fn apply_adam(&mut self, adam: &mut super::Adam, grads: &Gradients) -> Result<()> {
        let mut params = self.params_flat();
        adam.step(&mut params, &grads.flatten())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(
                "parameters became non-finite after an Adam step".into(),
            ));
        }
        self.set_params_flat(&params)
    }
}
