//! Small fully connected networks with exact backpropagation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Sigmoid => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            3 => Activation::Sigmoid,
            _ => return None,
        })
    }
}

/// Affine map followed by an elementwise nonlinearity. Weights are row-major
/// `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if weights.len() != inputs * outputs || bias.len() != outputs {
            return Err(invalid(format!(
                "dense {inputs}->{outputs} needs {} weights and {outputs} biases, got {} and {}",
                inputs * outputs,
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            bias,
            activation,
        })
    }

    /// Uniform init scaled by fan-in.
    pub fn random<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.gen_range(-bound..bound)).collect();
        let bias = (0..outputs).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            inputs,
            outputs,
            weights,
            bias,
            activation,
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Intermediate values kept by [`Mlp::forward_trace`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `outputs[0]` is the input, `outputs[l + 1]` the output of layer `l`.
    outputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().expect("trace holds at least the input")
    }
}

/// Parameter gradients laid out like [`Mlp::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads(pub Vec<f64>);

impl Mlp {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("network needs at least one layer"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(invalid(format!(
                    "layer {l} emits {} values but layer {} takes {}",
                    pair[0].outputs,
                    l + 1,
                    pair[1].inputs
                )));
            }
        }
        Ok(Self { layers })
    }

    /// `sizes = [in, h1, .., out]`; hidden layers use `hidden`, the last
    /// layer uses `output`.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(invalid(format!("bad layer sizes {sizes:?}")));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| Dense::random(w[0], w[1], if l == last { output } else { hidden }, rng))
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Scales the last layer's parameters, e.g. by zero for a zero head.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weights.iter_mut().chain(last.bias.iter_mut()).for_each(|p| *p *= factor);
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for layer in &self.layers {
            x = (0..layer.outputs)
                .map(|o| layer.activation.apply(affine(layer, o, &x)))
                .collect();
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        outputs.push(input.to_vec());
        for layer in &self.layers {
            let x = outputs.last().unwrap();
            let z: Vec<f64> = (0..layer.outputs).map(|o| affine(layer, o, x)).collect();
            let a = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(z);
            outputs.push(a);
        }
        Ok(ForwardTrace { outputs, pre })
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads(vec![0.0; self.param_count()])
    }

    /// Backpropagates `grad_output` (dLoss/dOutput) through a recorded pass,
    /// accumulating parameter gradients into `acc` and returning dLoss/dInput.
    pub fn backward_into(&self, trace: &ForwardTrace, grad_output: &[f64], acc: &mut MlpGrads) -> Result<Vec<f64>> {
        if grad_output.len() != self.output_dim() {
            return Err(invalid(format!(
                "output gradient has {} entries, network emits {}",
                grad_output.len(),
                self.output_dim()
            )));
        }
        if acc.0.len() != self.param_count() || trace.pre.len() != self.layers.len() {
            return Err(invalid("gradient buffer or trace does not match this network"));
        }
        let mut offset = self.param_count();
        let mut delta_out = grad_output.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            offset -= layer.param_count();
            let x = &trace.outputs[l];
            let z = &trace.pre[l];
            let a = &trace.outputs[l + 1];
            let delta: Vec<f64> = (0..layer.outputs)
                .map(|o| delta_out[o] * layer.activation.derivative(z[o], a[o]))
                .collect();
            let (gw, gb) = acc.0[offset..offset + layer.param_count()].split_at_mut(layer.weights.len());
            for o in 0..layer.outputs {
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, &xi) in row.iter_mut().zip(x) {
                    *g += delta[o] * xi;
                }
                gb[o] += delta[o];
            }
            let mut delta_in = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (d, &w) in delta_in.iter_mut().zip(row) {
                    *d += delta[o] * w;
                }
            }
            delta_out = delta_in;
        }
        Ok(delta_out)
    }

    pub fn backward(&self, trace: &ForwardTrace, grad_output: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        let mut acc = self.zero_grads();
        let grad_input = self.backward_into(trace, grad_output, &mut acc)?;
        Ok((acc, grad_input))
    }

    /// Flattened parameters: per layer, weights (row-major) then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(invalid(format!(
                "{} parameters given, network has {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut rest = params;
        for layer in &mut self.layers {
            let (w, tail) = rest.split_at(layer.weights.len());
            let (b, tail) = tail.split_at(layer.bias.len());
            layer.weights.copy_from_slice(w);
            layer.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    /// `self <- tau * source + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) -> Result<()> {
        if source.param_count() != self.param_count() {
            return Err(invalid("soft update between differently shaped networks"));
        }
        for (dst, src) in self.layers.iter_mut().zip(&source.layers) {
            for (d, s) in dst.weights.iter_mut().zip(&src.weights).chain(dst.bias.iter_mut().zip(&src.bias)) {
                *d = tau * s + (1.0 - tau) * *d;
            }
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(invalid(format!(
                "input has {} entries, network takes {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

fn affine(layer: &Dense, o: usize, x: &[f64]) -> f64 {
    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
    layer.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
}
