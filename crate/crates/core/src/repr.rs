//! The trainable representation: a small stack of affine layers with optional
//! rectification, mapping raw region features to detection features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    RectifiedLinear,
}

/// One affine layer; `weight` is row-major `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprParams {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient with the same shape as [`ReprParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReprGrad {
    pub layers: Vec<LayerGrad>,
}

impl ReprGrad {
    pub fn add_assign(&mut self, other: &ReprGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(1.0, &b.weight, &mut a.weight);
            axpy(1.0, &b.bias, &mut a.bias);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias))
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `inputs[l]` is the input of layer `l`; the last entry is the output.
    inputs: Vec<Vec<f64>>,
    pub(crate) pre_activations: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("tape always holds the input")
    }
}

impl ReprParams {
    /// A representation with no layers: the identity map on `dim` inputs.
    pub fn identity(dim: usize) -> Self {
        ReprParams {
            input_dim: dim,
            layers: Vec::new(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.out_dim)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Checks layer chaining and finiteness.
    pub fn check(&self) -> Result<()> {
        let mut dim = self.input_dim;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim != dim {
                return Err(Error::dims(format!("layer {i} input"), dim, l.in_dim));
            }
            if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::InvalidConfig(format!("layer {i} has malformed parameters")));
            }
            if l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("layer {i} has non-finite parameters")));
            }
            dim = l.out_dim;
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        for l in &self.layers {
            let mut z = l.affine(&h);
            if l.activation == Activation::RectifiedLinear {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_tape(&self, x: &[f64]) -> Result<Tape> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_vec());
        for l in &self.layers {
            let z = l.affine(inputs.last().unwrap());
            let h = match l.activation {
                Activation::Identity => z.clone(),
                Activation::RectifiedLinear => z.iter().map(|v| v.max(0.0)).collect(),
            };
            pre_activations.push(z);
            inputs.push(h);
        }
        Ok(Tape {
            inputs,
            pre_activations,
        })
    }

    pub fn zero_grad(&self) -> ReprGrad {
        ReprGrad {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Reverse pass for `upstream · φ(x)`: accumulates parameter gradients into
    /// `grad` and returns the gradient with respect to the input.
    pub fn backward_into(&self, tape: &Tape, upstream: &[f64], grad: &mut ReprGrad) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::dims("upstream gradient", self.output_dim(), upstream.len()));
        }
        let mut delta = upstream.to_vec();
        for (idx, l) in self.layers.iter().enumerate().rev() {
            if l.activation == Activation::RectifiedLinear {
                // subgradient 0 at the kink
                for (d, z) in delta.iter_mut().zip(&tape.pre_activations[idx]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &tape.inputs[idx];
            let g = &mut grad.layers[idx];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                axpy(*d, input, &mut g.weight[o * l.in_dim..(o + 1) * l.in_dim]);
            }
            let mut next = vec![0.0; l.in_dim];
            for (row, d) in l.weight.chunks_exact(l.in_dim).zip(&delta) {
                if *d != 0.0 {
                    axpy(*d, row, &mut next);
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// Gradients of `upstream · φ(x)` with respect to all parameters and to `x`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(ReprGrad, Vec<f64>)> {
        let tape = self.forward_tape(x)?;
        let mut grad = self.zero_grad();
        let dx = self.backward_into(&tape, upstream, &mut grad)?;
        Ok((grad, dx))
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
    }

    /// Overwrites all parameters from `src`, returning the number consumed.
    pub fn read_flat(&mut self, src: &[f64]) -> usize {
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.copy_from_slice(&src[at..at + n]);
            at += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&src[at..at + n]);
            at += n;
        }
        at
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::dims("representation input", self.input_dim, x.len()));
        }
        Ok(())
    }
}

/// Glorot-uniform initialisation: weights in `[-s, s]`, `s = sqrt(6 / (in + out))`,
/// zero biases. `dims` lists the input width followed by each layer's output width.
pub fn init_repr(seed: u64, dims: &[usize], activations: &[Activation]) -> Result<ReprParams> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "representation dims must be non-empty and positive, got {dims:?}"
        )));
    }
    if activations.len() + 1 != dims.len() {
        return Err(Error::InvalidConfig(format!(
            "{} layer widths need {} activations, got {}",
            dims.len(),
            dims.len() - 1,
            activations.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims
        .windows(2)
        .zip(activations)
        .map(|(w, &activation)| {
            let (in_dim, out_dim) = (w[0], w[1]);
            let s = (6.0 / (in_dim + out_dim) as f64).sqrt();
            Layer {
                in_dim,
                out_dim,
                weight: (0..in_dim * out_dim).map(|_| rng.random_range(-s..=s)).collect(),
                bias: vec![0.0; out_dim],
                activation,
            }
        })
        .collect();
    Ok(ReprParams {
        input_dim: dims[0],
        layers,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
