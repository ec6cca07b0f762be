//! Multi-layer perceptrons expressed as tape graphs.
//!
//! Parameters live in plain tensors owned by the model; each training
//! step binds them onto a fresh tape as leaves, builds the forward
//! graph, and maps gradients back through the flat parameter order
//! (layer 0 weight, layer 0 bias, layer 1 weight, ...). That order is
//! also the checkpoint serialization order.

use crate::error::{CoreError, Result};
use crate::rng::Xoshiro;
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::Tensor;

/// One dense layer: weight [d_in, d_out], bias [d_out].
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weight init, zero bias.
    pub fn init(d_in: usize, d_out: usize, rng: &mut Xoshiro) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let data: Vec<f64> = (0..d_in * d_out).map(|_| rng.uniform(-limit, limit)).collect();
        Linear {
            weight: Tensor::new(vec![d_in, d_out], data).expect("init shape"),
            bias: Tensor::zeros(vec![d_out]),
        }
    }
}

/// MLP with tanh hidden activations and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    /// [d_in, hidden..., d_out].
    pub widths: Vec<usize>,
}

/// Tape leaf ids for one bound MLP, in parameter order.
pub struct MlpBinding {
    pub weight_ids: Vec<NodeId>,
    pub bias_ids: Vec<NodeId>,
}

impl Mlp {
    pub fn init(widths: &[usize], rng: &mut Xoshiro) -> Result<Self> {
        if widths.len() < 2 {
            return Err(CoreError::Contract(format!(
                "an MLP needs at least input and output widths, got {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(CoreError::Contract(format!("zero width in {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Ok(Mlp {
            layers,
            widths: widths.to_vec(),
        })
    }

    pub fn d_in(&self) -> usize {
        self.widths[0]
    }

    pub fn d_out(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    /// Register all parameters as tape leaves.
    pub fn bind(&self, tape: &mut Tape) -> MlpBinding {
        let mut weight_ids = Vec::with_capacity(self.layers.len());
        let mut bias_ids = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            weight_ids.push(tape.leaf(layer.weight.clone()));
            bias_ids.push(tape.leaf(layer.bias.clone()));
        }
        MlpBinding { weight_ids, bias_ids }
    }

    /// Forward through bound parameters: tanh on hidden layers, linear
    /// output. `input` must be rank-2 [batch, d_in].
    pub fn forward(&self, tape: &mut Tape, binding: &MlpBinding, input: NodeId) -> Result<NodeId> {
        if tape.value(input).cols() != self.d_in() || tape.value(input).shape().len() != 2 {
            return Err(CoreError::dimension(
                "mlp forward",
                format!("input shape {:?}", tape.value(input).shape()),
                format!("[batch, {}]", self.d_in()),
            ));
        }
        let mut h = input;
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            h = tape.matmul(h, binding.weight_ids[i])?;
            h = tape.add_bias(h, binding.bias_ids[i])?;
            if i != last {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Plain forward without a tape, for inference paths.
    pub fn forward_values(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.d_in() {
            return Err(CoreError::dimension(
                "mlp forward",
                format!("{} inputs", input.len()),
                format!("{}", self.d_in()),
            ));
        }
        let mut h = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let d_in = self.widths[i];
            let d_out = self.widths[i + 1];
            let mut out = layer.bias.data().to_vec();
            let w = layer.weight.data();
            for p in 0..d_in {
                let hp = h[p];
                if hp == 0.0 {
                    continue;
                }
                for j in 0..d_out {
                    out[j] += hp * w[p * d_out + j];
                }
            }
            if i != last {
                for v in out.iter_mut() {
                    *v = v.tanh();
                }
            }
            h = out;
        }
        Ok(h)
    }

    /// Parameters flattened in declaration order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.data());
            out.extend_from_slice(layer.bias.data());
        }
        out
    }

    /// Inverse of [`Mlp::params_flat`].
    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(CoreError::dimension(
                "set_params_flat",
                format!("{} values", flat.len()),
                format!("{} parameters", self.param_count()),
            ));
        }
        let mut off = 0;
        for layer in self.layers.iter_mut() {
            let wn = layer.weight.numel();
            layer.weight =
                Tensor::new(layer.weight.shape().to_vec(), flat[off..off + wn].to_vec())?;
            off += wn;
            let bn = layer.bias.numel();
            layer.bias = Tensor::new(layer.bias.shape().to_vec(), flat[off..off + bn].to_vec())?;
            off += bn;
        }
        Ok(())
    }

    /// Gradients w.r.t. all parameters, flattened in declaration order.
    pub fn grads_flat(&self, binding: &MlpBinding, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for i in 0..self.layers.len() {
            out.extend_from_slice(grads.wrt(binding.weight_ids[i]).data());
            out.extend_from_slice(grads.wrt(binding.bias_ids[i]).data());
        }
        out
    }
}
