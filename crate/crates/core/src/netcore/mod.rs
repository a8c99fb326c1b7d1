//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! Batches are row-major: one example per row. Weights are stored
//! `out x in`, so a layer computes `X W^T + b`.

mod adamw;

pub use adamw::{AdamWConfig, OptimizerState};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Silu,
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidConfig(format!("unknown activation '{other}'"))),
        }
    }
}

/// Anything that exposes its parameters as flat slices in a fixed order.
/// Optimizers and gradient buffers pair up slices by position.
pub trait ParamSet {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    widths: Vec<usize>,
    layers: Vec<DenseLayer>,
    activation: Activation,
}

/// Per-layer gradients with the same shapes as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub layers: Vec<DenseLayer>,
}

/// Cached forward pass: inputs to every layer and the hidden pre-activations.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::InvalidConfig(
            "a network needs at least an input and an output width".into(),
        ));
    }
    if widths.contains(&0) {
        return Err(Error::InvalidConfig("layer widths must be positive".into()));
    }
    Ok(())
}

impl DenseNet {
    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        validate_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer::zeros(w[0], w[1]))
            .collect();
        Ok(DenseNet {
            widths: widths.to_vec(),
            layers,
            activation,
        })
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation for weights
    /// and biases.
    pub fn random<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths, activation)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.weight.ncols() as f64).sqrt();
            layer.weight.mapv_inplace(|_| rng.random_range(-bound..bound));
            layer.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Ok(net)
    }

    /// Builds a network from explicit layers. Shapes must chain.
    pub fn from_layers(layers: Vec<DenseLayer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("a network needs at least one layer".into()));
        }
        let mut widths = vec![layers[0].weight.ncols()];
        for layer in &layers {
            check_dim("layer input width", *widths.last().unwrap(), layer.weight.ncols())?;
            check_dim("layer bias length", layer.weight.nrows(), layer.bias.len())?;
            widths.push(layer.weight.nrows());
        }
        validate_widths(&widths)?;
        Ok(DenseNet {
            widths,
            layers,
            activation,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Zeroes the final layer so the untrained network outputs exactly zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_dim("network input", self.input_width(), input.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("network input", self.input_width(), x.ncols())?;
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            if i < last {
                let act = self.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
        check_dim("network input", self.input_width(), x.ncols())?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            inputs.push(h);
            if i < last {
                let act = self.activation;
                h = z.mapv(|v| act.apply(v));
                pre.push(z);
            } else {
                h = z;
            }
        }
        Ok(ForwardTrace {
            inputs,
            pre,
            output: h,
        })
    }

    /// Gradients of a scalar loss whose gradient w.r.t. the output is
    /// `output_grad`, for a single example.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<GradBuffer> {
        check_dim("network input", self.input_width(), input.len())?;
        check_dim("output gradient", self.output_width(), output_grad.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        let g = ArrayView2::from_shape((1, output_grad.len()), output_grad).expect("row view");
        let trace = self.forward_trace(x)?;
        Ok(self.backward_trace(&trace, g)?.0)
    }

    /// Batch backward pass. Gradients are summed over rows; the second value
    /// is the gradient with respect to the batch input.
    pub fn backward_trace(
        &self,
        trace: &ForwardTrace,
        output_grad: ArrayView2<'_, f64>,
    ) -> Result<(GradBuffer, Array2<f64>)> {
        check_dim("output gradient width", self.output_width(), output_grad.ncols())?;
        check_dim("output gradient rows", trace.output.nrows(), output_grad.nrows())?;
        let mut grads: Vec<DenseLayer> = Vec::with_capacity(self.layers.len());
        let mut delta = output_grad.to_owned();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            // The product of a transposed view can come back column-major.
            let weight = delta.t().dot(&trace.inputs[i]).as_standard_layout().into_owned();
            let bias = delta.sum_axis(Axis(0));
            grads.push(DenseLayer { weight, bias });
            let mut back = delta.dot(&layer.weight);
            if i > 0 {
                let act = self.activation;
                ndarray::Zip::from(&mut back)
                    .and(&trace.pre[i - 1])
                    .for_each(|g, &z| *g *= act.derivative(z));
            }
            delta = back;
        }
        grads.reverse();
        Ok((GradBuffer { layers: grads }, delta))
    }
}

impl GradBuffer {
    pub fn zeros_like(net: &DenseNet) -> Self {
        GradBuffer {
            layers: net
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.weight.ncols(), l.weight.nrows()))
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.param_slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_scaled(&mut self, other: &GradBuffer, factor: f64) -> Result<()> {
        check_dim("gradient layers", self.layers.len(), other.layers.len())?;
        for (dst, src) in self.param_slices_mut().into_iter().zip(other.param_slices()) {
            check_dim("gradient block", dst.len(), src.len())?;
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += factor * s);
        }
        Ok(())
    }
}

fn layer_slices(layers: &[DenseLayer]) -> Vec<&[f64]> {
    layers
        .iter()
        .flat_map(|l| {
            [
                l.weight.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
        .collect()
}

fn layer_slices_mut(layers: &mut [DenseLayer]) -> Vec<&mut [f64]> {
    layers
        .iter_mut()
        .flat_map(|l| {
            [
                l.weight.as_slice_mut().expect("standard layout"),
                l.bias.as_slice_mut().expect("standard layout"),
            ]
        })
        .collect()
}

impl ParamSet for DenseNet {
    fn param_slices(&self) -> Vec<&[f64]> {
        layer_slices(&self.layers)
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        layer_slices_mut(&mut self.layers)
    }
}

impl ParamSet for GradBuffer {
    fn param_slices(&self) -> Vec<&[f64]> {
        layer_slices(&self.layers)
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        layer_slices_mut(&mut self.layers)
    }
}
