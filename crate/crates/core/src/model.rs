//! A small fully connected classifier with an exposed penultimate layer.
//!
//! The representation layer (the penultimate linear layer) is what the
//! debiasing loss and the diagnostics operate on; the final linear head maps
//! it to class logits. The same weights can run in two modes: recorded on a
//! tape for training, or as a plain forward pass for inference and for the
//! frozen bias encoder (identical arithmetic, no graph).

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{matmul_raw, AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model dims must be positive: {0}")]
    BadConfig(String),
    #[error("input has {got} columns, model expects {want}")]
    InputDim { got: usize, want: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Width of the representation (penultimate) layer.
    pub repr_dim: usize,
    pub n_classes: usize,
}

impl MlpConfig {
    pub fn new(input_dim: usize, n_classes: usize) -> Self {
        MlpConfig {
            input_dim,
            hidden_dims: vec![128, 64],
            repr_dim: 32,
            n_classes,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.repr_dim == 0
            || self.n_classes == 0
            || self.hidden_dims.contains(&0)
        {
            return Err(ModelError::BadConfig(format!("{self:?}")));
        }
        Ok(())
    }

    /// Layer widths from input to logits: hidden layers (relu), then the
    /// linear representation layer, then the linear head.
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.repr_dim);
        w.push(self.n_classes);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[fan_in, fan_out]`.
    pub w: Tensor,
    /// `[fan_out]`.
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
    pub layers: Vec<Layer>,
}

/// Handles to one recorded forward pass: the parameter leaves (for gradient
/// lookup, ordered w0, b0, w1, b1, ...), the representations, and the logits.
pub struct MlpVars {
    pub params: Vec<Var>,
    pub repr: Var,
    pub logits: Var,
}

impl Mlp {
    /// Fresh model with uniform fan-in ("Kaiming") initialization:
    /// weights from U(±√(6/fan_in)), biases zero.
    pub fn new(config: MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let widths = config.widths();
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w_data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            layers.push(Layer {
                w: Tensor::new(vec![fan_in, fan_out], w_data).expect("sized data"),
                b: Tensor::zeros(vec![fan_out]),
            });
        }
        Ok(Mlp { config, layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.numel() + l.b.numel()).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, d] if *d == self.config.input_dim => Ok(()),
            [_, d] => Err(ModelError::InputDim {
                got: *d,
                want: self.config.input_dim,
            }),
            other => Err(ModelError::InputDim {
                got: other.len(),
                want: 2,
            }),
        }
    }

    /// Record a differentiable forward pass of `x` (`[N, input_dim]`,
    /// already on `tape`). Parameters enter the tape as gradient-carrying
    /// leaves each call.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var) -> Result<MlpVars> {
        self.check_input(&tape.value(x).shape)?;
        let n_layers = self.layers.len();
        let mut params = Vec::with_capacity(2 * n_layers);
        let mut h = x;
        let mut repr = x;
        for (li, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(layer.w.clone().with_grad());
            let b = tape.leaf(layer.b.clone().with_grad());
            params.push(w);
            params.push(b);
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if li + 2 == n_layers {
                // the representation layer stays linear
                repr = h;
            } else if li + 1 < n_layers {
                h = tape.relu(h)?;
            }
        }
        Ok(MlpVars {
            params,
            repr,
            logits: h,
        })
    }

    /// Plain forward pass (no tape): `(representations, logits)`. Arithmetic
    /// matches `forward_tape` exactly.
    pub fn forward_infer(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(&x.shape)?;
        let n = x.shape[0];
        let n_layers = self.layers.len();
        let mut h = x.data.clone();
        let mut width = self.config.input_dim;
        let mut repr = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let fan_out = layer.w.shape[1];
            let mut z = matmul_raw(&h, &layer.w.data, n, width, fan_out);
            for row in 0..n {
                for c in 0..fan_out {
                    z[row * fan_out + c] += layer.b.data[c];
                }
            }
            if li + 2 == n_layers {
                repr = z.clone();
            } else if li + 1 < n_layers {
                for v in &mut z {
                    *v = v.max(0.0);
                }
            }
            h = z;
            width = fan_out;
        }
        Ok((
            Tensor::new(vec![n, self.config.repr_dim], repr).expect("repr shape"),
            Tensor::new(vec![n, self.config.n_classes], h).expect("logit shape"),
        ))
    }

    /// Predicted class per row: argmax of the logits (lowest index wins ties).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let (_, logits) = self.forward_infer(x)?;
        let c = self.config.n_classes;
        Ok((0..x.shape[0])
            .map(|i| {
                let row = &logits.data[i * c..(i + 1) * c];
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    /// Copy gradients from a backward pass into per-parameter slices, in the
    /// same order as `MlpVars::params`. Parameters that received no gradient
    /// yield zeros.
    pub fn collect_grads(
        &self,
        vars: &MlpVars,
        grads: &crate::autodiff::GradientMap,
    ) -> Vec<Vec<f64>> {
        vars.params
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let layer = &self.layers[k / 2];
                let numel = if k % 2 == 0 {
                    layer.w.numel()
                } else {
                    layer.b.numel()
                };
                grads
                    .get(v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; numel])
            })
            .collect()
    }

    /// Mutable views of all parameter tensors, ordered w0, b0, w1, b1, ...
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }
}
