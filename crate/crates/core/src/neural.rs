//! Small feed-forward networks with hand-written reverse-mode gradients.
//!
//! These produce the potential tensors consumed by the structured models: a
//! per-position unary scorer for chains and a per-pixel embedding net for the
//! segmentation model. Forward passes record a tape of layer inputs and
//! pre-activations; backward replays it exactly.

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, RngDomain, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Elementwise nonlinearity applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`. ReLU uses subgradient 0 at z = 0.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture description: input width, hidden widths, output width, and
/// the activations. The final bias can be dropped, which some scale
/// equivalence arguments assume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub final_activation: Activation,
    pub final_bias: bool,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layer {
    /// out×in weight matrix.
    weight: Tensor,
    /// Empty when the layer has no bias.
    bias: Vec<f64>,
    activation: Activation,
}

/// Feed-forward network. Immutable during inference, so shared references
/// can run forward passes concurrently.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

/// Cached layer inputs and pre-activations from one forward pass.
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

/// Per-layer gradients, shape-congruent with the owning network.
pub struct ParamGrads {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| Tensor::zeros(l.weight.shape()))
                .collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_assign(b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            for v in w.data_mut() {
                *v *= factor;
            }
        }
        for b in &mut self.biases {
            for v in b {
                *v *= factor;
            }
        }
    }

    /// Concatenates all gradients in the same order as `Mlp::flatten_params`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            flat.extend_from_slice(w.data());
            flat.extend_from_slice(b);
        }
        flat
    }
}

impl Mlp {
    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Concatenates all parameters layer by layer, weights before bias.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            flat.extend_from_slice(layer.weight.data());
            flat.extend_from_slice(&layer.bias);
        }
        flat
    }

    /// Writes back a flat parameter vector produced by `flatten_params`.
    pub fn assign_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DataLength {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let n_w = layer.weight.len();
            layer.weight.data_mut().copy_from_slice(&flat[offset..offset + n_w]);
            offset += n_w;
            let n_b = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + n_b]);
            offset += n_b;
        }
        Ok(())
    }

    /// Multiplies the final layer's parameters by `factor`, scaling the whole
    /// network output when the final activation is the identity.
    pub fn scale_final_layer(&mut self, factor: f64) {
        let layer = self.layers.last_mut().unwrap();
        for v in layer.weight.data_mut() {
            *v *= factor;
        }
        for v in &mut layer.bias {
            *v *= factor;
        }
    }

    /// Index range of the final layer's parameters within the flat vector.
    pub fn final_layer_range(&self) -> std::ops::Range<usize> {
        let last = self.layers.last().unwrap();
        let tail = last.weight.len() + last.bias.len();
        let total = self.num_params();
        total - tail..total
    }
}

/// Samples a network with weights uniform in ±1/√fan_in and zero biases,
/// deterministically under the seed.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<Mlp> {
    spec.validate()?;
    let mut rng = seeded_rng(seed, RngDomain::ParamInit);
    let mut layers = Vec::new();
    let mut fan_in = spec.input_dim;
    let n_layers = spec.hidden_dims.len() + 1;
    for l in 0..n_layers {
        let is_final = l == n_layers - 1;
        let fan_out = if is_final {
            spec.output_dim
        } else {
            spec.hidden_dims[l]
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Tensor::from_vec(
            vec![fan_out, fan_in],
            (0..fan_out * fan_in)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
        )?;
        let bias = if is_final && !spec.final_bias {
            Vec::new()
        } else {
            vec![0.0; fan_out]
        };
        let activation = if is_final {
            spec.final_activation
        } else {
            spec.hidden_activation
        };
        layers.push(Layer {
            weight,
            bias,
            activation,
        });
        fan_in = fan_out;
    }
    Ok(Mlp {
        spec: spec.clone(),
        layers,
    })
}

/// Affine-plus-activation composition, recording what backward needs.
pub fn forward(net: &Mlp, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
    if x.len() != net.spec.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "input length {} vs network input dim {}",
            x.len(),
            net.spec.input_dim
        )));
    }
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut pre_activations = Vec::with_capacity(net.layers.len());
    let mut current = x.to_vec();
    for layer in &net.layers {
        let out_dim = layer.weight.rows();
        let mut z = vec![0.0; out_dim];
        for i in 0..out_dim {
            let row = layer.weight.row(i);
            let mut acc = if layer.bias.is_empty() { 0.0 } else { layer.bias[i] };
            for (w, v) in row.iter().zip(&current) {
                acc += w * v;
            }
            z[i] = acc;
        }
        inputs.push(current);
        current = z.iter().map(|&v| layer.activation.apply(v)).collect();
        pre_activations.push(z);
    }
    Ok((
        current,
        Tape {
            inputs,
            pre_activations,
        },
    ))
}

/// Reverse-mode pass: gradients for every parameter and for the input.
pub fn backward(net: &Mlp, tape: &Tape, dl_dy: &[f64]) -> Result<(ParamGrads, Vec<f64>)> {
    if tape.inputs.len() != net.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "tape has {} layers, network has {}",
            tape.inputs.len(),
            net.layers.len()
        )));
    }
    if dl_dy.len() != net.spec.output_dim {
        return Err(Error::ShapeMismatch(format!(
            "output gradient length {} vs output dim {}",
            dl_dy.len(),
            net.spec.output_dim
        )));
    }
    for (layer, (input, z)) in net
        .layers
        .iter()
        .zip(tape.inputs.iter().zip(&tape.pre_activations))
    {
        if input.len() != layer.weight.cols() || z.len() != layer.weight.rows() {
            return Err(Error::ShapeMismatch("tape does not match this network".into()));
        }
    }

    let mut grads = ParamGrads::zeros_like(net);
    let mut g = dl_dy.to_vec();
    for (l, layer) in net.layers.iter().enumerate().rev() {
        let z = &tape.pre_activations[l];
        let input = &tape.inputs[l];
        for (gi, zi) in g.iter_mut().zip(z) {
            *gi *= layer.activation.derivative(*zi);
        }
        let g_w = &mut grads.weights[l];
        for (i, &gi) in g.iter().enumerate() {
            for (j, &xj) in input.iter().enumerate() {
                *g_w.at_mut(i, j) += gi * xj;
            }
            if !layer.bias.is_empty() {
                grads.biases[l][i] += gi;
            }
        }
        let mut g_input = vec![0.0; input.len()];
        for (i, &gi) in g.iter().enumerate() {
            let row = layer.weight.row(i);
            for (j, &wij) in row.iter().enumerate() {
                g_input[j] += gi * wij;
            }
        }
        g = g_input;
    }
    Ok((grads, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_grad, max_rel_deviation};

    fn spec(
        input: usize,
        hidden: &[usize],
        output: usize,
        final_activation: Activation,
    ) -> MlpSpec {
        MlpSpec {
            input_dim: input,
            hidden_dims: hidden.to_vec(),
            output_dim: output,
            hidden_activation: Activation::Relu,
            final_activation,
            final_bias: true,
        }
    }

    #[test]
    fn identity_single_layer_passes_through() {
        let s = spec(3, &[], 3, Activation::Identity);
        let mut net = init_params(&s, 0).unwrap();
        let mut params = vec![0.0; net.num_params()];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        net.assign_params(&params).unwrap();
        let (y, _) = forward(&net, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(y, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn relu_clamps_negative_preactivations() {
        let s = spec(2, &[], 2, Activation::Relu);
        let mut net = init_params(&s, 0).unwrap();
        net.assign_params(&[-1.0, 0.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        let (y, _) = forward(&net, &[3.0, 4.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn two_layer_forward_matches_straight_line_recomputation() {
        let s = spec(2, &[3], 2, Activation::Identity);
        let net = init_params(&s, 42).unwrap();
        let x = [0.7, -1.3];
        let (y, _) = forward(&net, &x).unwrap();

        let flat = net.flatten_params();
        // Layer 0: 3x2 weights then 3 biases; layer 1: 2x3 weights then 2 biases.
        let w0 = &flat[0..6];
        let b0 = &flat[6..9];
        let w1 = &flat[9..15];
        let b1 = &flat[15..17];
        let mut h = [0.0; 3];
        for i in 0..3 {
            h[i] = (w0[i * 2] * x[0] + w0[i * 2 + 1] * x[1] + b0[i]).max(0.0);
        }
        for i in 0..2 {
            let expected = w1[i * 3] * h[0] + w1[i * 3 + 1] * h[1] + w1[i * 3 + 2] * h[2] + b1[i];
            assert!((y[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_grads() {
        let s = spec(3, &[4], 2, Activation::Sigmoid);
        let net = init_params(&s, 1).unwrap();
        let (_, tape) = forward(&net, &[0.1, 0.2, 0.3]).unwrap();
        let (grads, dx) = backward(&net, &tape, &[0.0, 0.0]).unwrap();
        assert!(grads.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_weight_grad_is_outer_product() {
        let s = spec(3, &[], 2, Activation::Identity);
        let net = init_params(&s, 2).unwrap();
        let x = [1.5, -0.5, 2.0];
        let (_, tape) = forward(&net, &x).unwrap();
        let (grads, _) = backward(&net, &tape, &[0.0, 1.0]).unwrap();
        for j in 0..3 {
            assert_eq!(grads.weights[0].at(0, j), 0.0);
            assert!((grads.weights[0].at(1, j) - x[j]).abs() < 1e-15);
        }
        assert_eq!(grads.biases[0], vec![0.0, 1.0]);
    }

    #[test]
    fn backward_matches_finite_differences_all_activations() {
        use rand::Rng;
        for (i, final_act) in [Activation::Relu, Activation::Sigmoid, Activation::Identity]
            .into_iter()
            .enumerate()
        {
            for seed in 0..20u64 {
                let s = spec(3, &[4, 3], 2, final_act);
                let mut net = init_params(&s, seed * 3 + i as u64).unwrap();
                // Zero-initialized biases can park ReLU pre-activations
                // exactly on the kink, where the subgradient and a two-sided
                // difference quotient legitimately disagree. Randomizing all
                // parameters moves the probe point off such corners.
                let mut rng = crate::numerics::seeded_rng(seed * 3 + i as u64, RngDomain::Probe);
                let params: Vec<f64> =
                    (0..net.num_params()).map(|_| rng.random_range(-0.8..0.8)).collect();
                net.assign_params(&params).unwrap();
                let x = [0.4, -0.9, 1.1];
                let (_, tape) = forward(&net, &x).unwrap();
                let dl_dy = [0.7, -1.2];
                let (grads, dx) = backward(&net, &tape, &dl_dy).unwrap();

                let base = net.flatten_params();
                let fd = finite_difference_grad(
                    |p| {
                        net.assign_params(p).unwrap();
                        let (y, _) = forward(&net, &x).unwrap();
                        y.iter().zip(&dl_dy).map(|(a, b)| a * b).sum()
                    },
                    &base,
                    1e-6,
                )
                .unwrap();
                net.assign_params(&base).unwrap();
                let dev = max_rel_deviation(&grads.flatten(), &fd, 1e-6);
                assert!(dev < 1e-5, "seed {seed} activation {i}: deviation {dev:e}");

                let fd_x = finite_difference_grad(
                    |probe| {
                        let (y, _) = forward(&net, probe).unwrap();
                        y.iter().zip(&dl_dy).map(|(a, b)| a * b).sum()
                    },
                    &x,
                    1e-6,
                )
                .unwrap();
                let dev_x = max_rel_deviation(&dx, &fd_x, 1e-6);
                assert!(dev_x < 1e-5, "input grad seed {seed}: deviation {dev_x:e}");
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let s = spec(4, &[5], 3, Activation::Identity);
        let a = init_params(&s, 9).unwrap().flatten_params();
        let b = init_params(&s, 9).unwrap().flatten_params();
        let c = init_params(&s, 10).unwrap().flatten_params();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_bounds_and_zero_biases() {
        let s = spec(16, &[8], 4, Activation::Identity);
        let net = init_params(&s, 3).unwrap();
        let bound0 = 1.0 / 16f64.sqrt();
        for &v in net.layers[0].weight.data() {
            assert!(v.abs() < bound0);
        }
        assert!(net.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn final_layer_scaling_scales_identity_output() {
        let s = spec(3, &[4], 2, Activation::Identity);
        let mut net = init_params(&s, 5).unwrap();
        let x = [0.3, 0.6, -0.2];
        let (y0, _) = forward(&net, &x).unwrap();
        net.scale_final_layer(4.0);
        let (y1, _) = forward(&net, &x).unwrap();
        for (a, b) in y0.iter().zip(&y1) {
            assert!((4.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn final_bias_can_be_dropped() {
        let mut s = spec(3, &[2], 2, Activation::Identity);
        s.final_bias = false;
        let net = init_params(&s, 0).unwrap();
        assert_eq!(net.num_params(), 3 * 2 + 2 + 2 * 2);
        let range = net.final_layer_range();
        assert_eq!(range.len(), 4);
    }

    #[test]
    fn dimension_mismatch_errors() {
        let s = spec(3, &[], 2, Activation::Identity);
        let net = init_params(&s, 0).unwrap();
        assert!(forward(&net, &[1.0, 2.0]).is_err());
        let (_, tape) = forward(&net, &[1.0, 2.0, 3.0]).unwrap();
        assert!(backward(&net, &tape, &[1.0]).is_err());

        let other = init_params(&spec(4, &[], 2, Activation::Identity), 0).unwrap();
        assert!(backward(&other, &tape, &[1.0, 1.0]).is_err());
    }
}
