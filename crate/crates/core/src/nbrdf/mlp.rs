//! Dense multilayer perceptron with batched forward and reverse-mode passes.
//!
//! Batches are row-major `(samples × features)` matrices. Weights are stored
//! as `(out × in)` so that a layer computes `z = x·Wᵀ + b`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::RngStream;

/// Default LeakyReLU negative slope.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Leaky,
    Linear,
}

impl Activation {
    pub fn tag(self) -> u32 {
        match self {
            Activation::Linear => 0,
            Activation::Leaky => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Activation::Linear),
            1 => Some(Activation::Leaky),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `(out × in)`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    pub layers: Vec<DenseLayer>,
    pub leaky_slope: f64,
}

/// Gradients with the same layout as the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &MlpNet) -> Self {
        MlpGrads {
            weights: net
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weights.raw_dim()))
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.raw_dim()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| *v == 0.0))
            && self.biases.iter().all(|b| b.iter().all(|v| *v == 0.0))
    }
}

/// Cached activations of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardTape {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

impl MlpNet {
    pub fn new(layers: Vec<DenseLayer>, leaky_slope: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::shape(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::shape(format!("layer {i} bias length mismatch")));
            }
            if l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::domain(format!("layer {i} has non-finite weights")));
            }
        }
        Ok(MlpNet {
            layers,
            leaky_slope,
        })
    }

    /// He-initialized network with layer widths `dims` (`dims.len() - 1`
    /// layers) and zero biases.
    pub fn random(
        dims: &[usize],
        activations: &[Activation],
        leaky_slope: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::shape("need one activation per layer"));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let gain = match activation {
                    Activation::Leaky => 2.0 / (1.0 + leaky_slope * leaky_slope),
                    Activation::Linear => 1.0,
                };
                let std = (gain / fan_in as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| rng.gaussian(0.0, std));
                DenseLayer {
                    weights,
                    bias: Array1::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        MlpNet::new(layers, leaky_slope)
    }

    /// All-zero network with the given widths.
    pub fn zeros(dims: &[usize], activations: &[Activation], leaky_slope: f64) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::shape("need one activation per layer"));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| DenseLayer {
                weights: Array2::zeros((d[1], d[0])),
                bias: Array1::zeros(d[1]),
                activation,
            })
            .collect();
        MlpNet::new(layers, leaky_slope)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output_dim()).unwrap_or(0)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Rounds every weight, and the slope, to the nearest `f32` so the
    /// network survives the 32-bit container format unchanged.
    pub fn round_to_f32(&mut self) {
        self.leaky_slope = self.leaky_slope as f32 as f64;
        for l in &mut self.layers {
            l.weights.mapv_inplace(|v| v as f32 as f64);
            l.bias.mapv_inplace(|v| v as f32 as f64);
        }
    }

    #[inline]
    fn activate(&self, a: Activation, z: f64) -> f64 {
        match a {
            Activation::Linear => z,
            Activation::Leaky => {
                if z > 0.0 {
                    z
                } else {
                    self.leaky_slope * z
                }
            }
        }
    }

    #[inline]
    fn activation_slope(&self, a: Activation, z: f64) -> f64 {
        match a {
            Activation::Linear => 1.0,
            Activation::Leaky => {
                if z > 0.0 {
                    1.0
                } else {
                    self.leaky_slope
                }
            }
        }
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects {} inputs, got {cols}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let mut x = input.to_vec();
        for l in &self.layers {
            let mut y = Vec::with_capacity(l.output_dim());
            for (row, b) in l.weights.rows().into_iter().zip(l.bias.iter()) {
                let z = row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + b;
                y.push(self.activate(l.activation, z));
            }
            x = y;
        }
        Ok(x)
    }

    /// Batched forward pass without caching.
    pub fn forward_batch(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let mut x = input.to_owned();
        for l in &self.layers {
            let mut z = x.dot(&l.weights.t());
            z += &l.bias;
            let a = l.activation;
            z.mapv_inplace(|v| self.activate(a, v));
            x = z;
        }
        Ok(x)
    }

    /// Batched forward pass that records what [`MlpNet::backward_batch`]
    /// needs.
    pub fn forward_tape(&self, input: ArrayView2<'_, f64>) -> Result<ForwardTape> {
        self.check_input(input.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for l in &self.layers {
            let mut z = x.dot(&l.weights.t());
            z += &l.bias;
            let a = l.activation;
            let y = z.mapv(|v| self.activate(a, v));
            inputs.push(x);
            pre.push(z);
            x = y;
        }
        Ok(ForwardTape {
            inputs,
            pre,
            output: x,
        })
    }

    /// Reverse pass for a batch: returns parameter gradients summed over the
    /// batch and the per-sample input gradient.
    pub fn backward_batch(
        &self,
        tape: &ForwardTape,
        out_grad: ArrayView2<'_, f64>,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        let (grads, g) = self.reverse(tape, out_grad, true)?;
        Ok((grads, g.expect("input gradient requested")))
    }

    /// As [`MlpNet::backward_batch`] but skips the input gradient, which
    /// saves one matrix product when the input is constant.
    pub fn backward_batch_params(&self, tape: &ForwardTape, out_grad: ArrayView2<'_, f64>) -> Result<MlpGrads> {
        Ok(self.reverse(tape, out_grad, false)?.0)
    }

    fn reverse(
        &self,
        tape: &ForwardTape,
        out_grad: ArrayView2<'_, f64>,
        input_grad: bool,
    ) -> Result<(MlpGrads, Option<Array2<f64>>)> {
        if out_grad.dim() != tape.output.dim() {
            return Err(Error::shape(format!(
                "output gradient {:?} does not match output {:?}",
                out_grad.dim(),
                tape.output.dim()
            )));
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut g = out_grad.to_owned();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let a = l.activation;
            if a != Activation::Linear {
                ndarray::Zip::from(&mut g)
                    .and(&tape.pre[i])
                    .for_each(|gv, &z| *gv *= self.activation_slope(a, z));
            }
            grads.weights[i] = g.t().dot(&tape.inputs[i]);
            grads.biases[i] = g.sum_axis(Axis(0));
            if i == 0 && !input_grad {
                return Ok((grads, None));
            }
            g = g.dot(&l.weights);
        }
        Ok((grads, Some(g)))
    }
}

/// Reverse-mode derivative of one forward pass: weight gradients, bias
/// gradients and the input gradient for upstream gradient `out_grad`.
pub fn backward(net: &MlpNet, input: &[f64], out_grad: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
    let x = ArrayView2::from_shape((1, input.len()), input)
        .map_err(|e| Error::shape(e.to_string()))?;
    let g = ArrayView2::from_shape((1, out_grad.len()), out_grad)
        .map_err(|e| Error::shape(e.to_string()))?;
    let tape = net.forward_tape(x)?;
    let (grads, input_grad) = net.backward_batch(&tape, g)?;
    Ok((grads, input_grad.into_raw_vec_and_offset().0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_unchained_layers() {
        let layers = vec![
            DenseLayer {
                weights: Array2::zeros((3, 2)),
                bias: Array1::zeros(3),
                activation: Activation::Leaky,
            },
            DenseLayer {
                weights: Array2::zeros((1, 4)),
                bias: Array1::zeros(1),
                activation: Activation::Linear,
            },
        ];
        assert!(MlpNet::new(layers, 0.01).is_err());
    }

    #[test]
    fn linear_adjoint() {
        let w = array![[1.0, 2.0, -1.0], [0.5, -3.0, 4.0]];
        let net = MlpNet::new(
            vec![DenseLayer {
                weights: w.clone(),
                bias: array![0.1, -0.2],
                activation: Activation::Linear,
            }],
            0.01,
        )
        .unwrap();
        let og = [0.7, -1.3];
        let (grads, ig) = backward(&net, &[0.3, -0.4, 2.0], &og).unwrap();
        let want = w.t().dot(&array![0.7, -1.3]);
        for (a, b) in ig.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(grads.biases[0], array![0.7, -1.3]);
        assert_eq!(grads.weights[0][[1, 2]], -1.3 * 2.0);
    }

    #[test]
    fn zero_out_grad_gives_zero_grads() {
        let net = MlpNet::random(
            &[5, 7, 3],
            &[Activation::Leaky, Activation::Linear],
            0.01,
            &mut RngStream::new(1),
        )
        .unwrap();
        let (grads, ig) = backward(&net, &[0.1, 0.2, 0.3, 0.4, 0.5], &[0.0; 3]).unwrap();
        assert!(grads.is_zero());
        assert!(ig.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_matches_single() {
        let net = MlpNet::random(
            &[4, 8, 8, 2],
            &[Activation::Leaky, Activation::Leaky, Activation::Linear],
            0.01,
            &mut RngStream::new(2),
        )
        .unwrap();
        let batch = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let out = net.forward_batch(batch.view()).unwrap();
        for (i, row) in batch.rows().into_iter().enumerate() {
            let single = net.forward(row.as_slice().unwrap()).unwrap();
            for (a, b) in single.iter().zip(out.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = MlpNet::zeros(&[6, 4, 3], &[Activation::Leaky, Activation::Linear], 0.01).unwrap();
        assert_eq!(net.forward(&[1.0; 6]).unwrap(), vec![0.0; 3]);
    }
}
