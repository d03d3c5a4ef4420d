//! Feed-forward network producing the latent representations `ζ` consumed by
//! the additive predictor, with a hand-written backward pass.
//!
//! Every hidden layer is followed by the activation; the final linear map to
//! the log-hazard (`γ`) lives in [`crate::model::DeepHead`] so it can be
//! cause-specific.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    #[inline]
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out × n_in`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn random<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (n_in + n_out) as f64).sqrt();
        let weights = (0..n_in * n_out).map(|_| rng.random_range(-a..a)).collect();
        Self {
            n_in,
            n_out,
            weights,
            bias: vec![0.0; n_out],
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    n: usize,
    /// `inputs[l]` is the (flat, row-major) input to layer `l`; the last
    /// entry is the network output.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("cache holds at least the input")
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }
}

impl Mlp {
    pub fn new<R: Rng>(n_in: usize, widths: &[usize], activation: Activation, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = n_in;
        for &w in widths {
            layers.push(Layer::random(prev, w, rng));
            prev = w;
        }
        Self { activation, layers }
    }

    pub fn n_inputs(&self) -> usize {
        self.layers.first().map_or(0, |l| l.n_in)
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    /// Forward pass over `n` rows of a flat `n × n_inputs` input.
    pub fn forward(&self, input: &[f64], n: usize) -> MlpCache {
        debug_assert_eq!(input.len(), n * self.n_inputs());
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_all = Vec::with_capacity(self.layers.len());
        inputs.push(input.to_vec());
        for layer in &self.layers {
            let x = inputs.last().unwrap();
            let mut pre = vec![0.0; n * layer.n_out];
            for r in 0..n {
                let xr = &x[r * layer.n_in..(r + 1) * layer.n_in];
                let out = &mut pre[r * layer.n_out..(r + 1) * layer.n_out];
                for (o, slot) in out.iter_mut().enumerate() {
                    let w = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
                    let mut acc = layer.bias[o];
                    for (wi, xi) in w.iter().zip(xr) {
                        acc += wi * xi;
                    }
                    *slot = acc;
                }
            }
            let post: Vec<f64> = pre.iter().map(|&v| self.activation.apply(v)).collect();
            pre_all.push(pre);
            inputs.push(post);
        }
        MlpCache {
            n,
            inputs,
            pre: pre_all,
        }
    }

    /// Accumulates parameter gradients into `grad` (laid out like
    /// [`Mlp::write_params`]) given `d_out = ∂L/∂output`.
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.n_params());
        let n = cache.n;
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.n_params();
        }
        let mut delta_post = d_out.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[l];
            let post = &cache.inputs[l + 1];
            let x = &cache.inputs[l];
            let delta: Vec<f64> = delta_post
                .iter()
                .zip(pre.iter().zip(post))
                .map(|(d, (&p, &q))| d * self.activation.derivative(p, q))
                .collect();
            let (gw, gb) = grad[offsets[l]..offsets[l] + layer.n_params()]
                .split_at_mut(layer.weights.len());
            let mut delta_in = if l > 0 {
                vec![0.0; n * layer.n_in]
            } else {
                Vec::new()
            };
            for r in 0..n {
                let dr = &delta[r * layer.n_out..(r + 1) * layer.n_out];
                let xr = &x[r * layer.n_in..(r + 1) * layer.n_in];
                for (o, &d) in dr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let gwo = &mut gw[o * layer.n_in..(o + 1) * layer.n_in];
                    for (g, xi) in gwo.iter_mut().zip(xr) {
                        *g += d * xi;
                    }
                    if l > 0 {
                        let w = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
                        let di = &mut delta_in[r * layer.n_in..(r + 1) * layer.n_in];
                        for (dv, wi) in di.iter_mut().zip(w) {
                            *dv += d * wi;
                        }
                    }
                }
            }
            delta_post = delta_in;
        }
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
    }

    /// Reads parameters back; returns the number consumed.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut off = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&src[off..off + nw]);
            off += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&src[off..off + nb]);
            off += nb;
        }
        off
    }

    /// Mask marking weight (as opposed to bias) positions in the flat layout.
    pub fn weight_mask(&self, out: &mut Vec<bool>) {
        for layer in &self.layers {
            out.extend(std::iter::repeat_n(true, layer.weights.len()));
            out.extend(std::iter::repeat_n(false, layer.bias.len()));
        }
    }
}
