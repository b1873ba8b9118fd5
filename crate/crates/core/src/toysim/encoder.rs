//! Shared query/passage encoder: hashed bag-of-tokens, tanh hidden layers and
//! an affine projection into the embedding space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::TokenId;
use super::{rng_for, splitmix64, Result, SimError};

/// Sparse L2-normalized bucket counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub(crate) entries: Vec<(usize, f64)>,
}

impl Features {
    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }
}

/// Dense affine map stored row-major as `[inputs][outputs]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.gen_range(-bound..bound)).collect();
        let bias = (0..outputs).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            inputs,
            outputs,
            weights,
            bias,
        }
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.outputs..(i + 1) * self.outputs]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    feature_dim: usize,
    /// Hidden layers followed by the projection; tanh after every hidden layer.
    layers: Vec<Layer>,
}

/// Gradient with the same layout as [`Encoder`]'s layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Layer>,
}

impl Gradient {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

pub fn init_encoder(feature_dim: usize, hidden_widths: &[usize], embedding_dim: usize, seed: u64) -> Result<Encoder> {
    if feature_dim == 0 || embedding_dim == 0 || hidden_widths.contains(&0) {
        return Err(SimError::Config(format!(
            "encoder dimensions must be positive (feature_dim {feature_dim}, hidden {hidden_widths:?}, embedding_dim {embedding_dim})"
        )));
    }
    let mut rng = rng_for(&[seed, 0xE4C]);
    let mut layers = Vec::with_capacity(hidden_widths.len() + 1);
    let mut inputs = feature_dim;
    for &w in hidden_widths.iter().chain(std::iter::once(&embedding_dim)) {
        layers.push(Layer::init(inputs, w, &mut rng));
        inputs = w;
    }
    Ok(Encoder { feature_dim, layers })
}

/// Activations of every layer for a batch of inputs, kept for backprop.
pub(crate) struct Forward {
    /// `outputs[l]` is `rows x layers[l].outputs`, row-major.
    outputs: Vec<Vec<f64>>,
    rows: usize,
}

impl Forward {
    pub fn embeddings(&self) -> &[f64] {
        self.outputs.last().expect("at least the projection layer")
    }
}

impl Encoder {
    /// All-zero parameters except the projection bias.
    pub fn affine_only(feature_dim: usize, embedding_dim: usize, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != embedding_dim || feature_dim == 0 || embedding_dim == 0 {
            return Err(SimError::Config("bias length must equal embedding_dim".into()));
        }
        let mut layer = Layer::zeros(feature_dim, embedding_dim);
        layer.bias = bias;
        Ok(Self {
            feature_dim,
            layers: vec![layer],
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.projection().outputs
    }

    pub fn hidden_layers(&self) -> &[Layer] {
        &self.layers[..self.layers.len() - 1]
    }

    pub fn projection(&self) -> &Layer {
        self.layers.last().expect("projection layer")
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.hidden_layers().iter().map(|l| l.outputs).collect()
    }

    /// Non-embedding parameters: every hidden and projection weight and bias.
    /// The hashed featurizer plays the role of the embedding table and has no
    /// trainable parameters of its own.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(SimError::Config(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// `self -= rate * grad`.
    pub fn apply_gradient(&mut self, grad: &Gradient, rate: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            for (w, d) in l.weights.iter_mut().zip(&g.weights) {
                *w -= rate * d;
            }
            for (b, d) in l.bias.iter_mut().zip(&g.bias) {
                *b -= rate * d;
            }
        }
    }

    pub fn featurize(&self, tokens: &[TokenId]) -> Result<Features> {
        if tokens.is_empty() {
            return Err(SimError::EmptyInput);
        }
        Ok(featurize(tokens, self.feature_dim))
    }

    pub fn encode(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let features = self.featurize(tokens)?;
        Ok(self.forward(std::slice::from_ref(&features)).embeddings().to_vec())
    }

    /// Embeddings for many inputs, `rows x embedding_dim` row-major.
    pub fn encode_batch(&self, inputs: &[&[TokenId]]) -> Result<Vec<f64>> {
        let features = inputs.iter().map(|t| self.featurize(t)).collect::<Result<Vec<_>>>()?;
        let mut fwd = self.forward(&features);
        Ok(fwd.outputs.pop().expect("projection output"))
    }

    pub(crate) fn forward(&self, inputs: &[Features]) -> Forward {
        let rows = inputs.len();
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(rows * layer.outputs);
            for r in 0..rows {
                out.extend_from_slice(&layer.bias);
                let dst = &mut out[r * layer.outputs..];
                if li == 0 {
                    for &(i, v) in &inputs[r].entries {
                        axpy(v, layer.row(i), dst);
                    }
                } else {
                    let prev = &outputs[li - 1][r * layer.inputs..(r + 1) * layer.inputs];
                    for (i, &h) in prev.iter().enumerate() {
                        if h != 0.0 {
                            axpy(h, layer.row(i), dst);
                        }
                    }
                }
            }
            if li != last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            outputs.push(out);
        }
        Forward { outputs, rows }
    }

    /// Backpropagates `d_embeddings` (`rows x embedding_dim`) through a forward pass.
    pub(crate) fn backward(&self, inputs: &[Features], fwd: &Forward, d_embeddings: Vec<f64>) -> Gradient {
        let rows = fwd.rows;
        let mut grads: Vec<Layer> = self.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect();
        let mut delta = d_embeddings;
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let g = &mut grads[li];
            let (n_in, n_out) = (layer.inputs, layer.outputs);
            for r in 0..rows {
                let d = &delta[r * n_out..(r + 1) * n_out];
                for (gb, dv) in g.bias.iter_mut().zip(d) {
                    *gb += dv;
                }
            }
            if li == 0 {
                for (r, feats) in inputs.iter().enumerate() {
                    let d = &delta[r * n_out..(r + 1) * n_out];
                    for &(i, v) in &feats.entries {
                        axpy(v, d, &mut g.weights[i * n_out..(i + 1) * n_out]);
                    }
                }
                break;
            }
            let prev = &fwd.outputs[li - 1];
            let mut prev_delta = vec![0.0; rows * n_in];
            for r in 0..rows {
                let d = &delta[r * n_out..(r + 1) * n_out];
                let h = &prev[r * n_in..(r + 1) * n_in];
                let pd = &mut prev_delta[r * n_in..(r + 1) * n_in];
                for i in 0..n_in {
                    axpy(h[i], d, &mut g.weights[i * n_out..(i + 1) * n_out]);
                    // tanh'(z) = 1 - tanh(z)^2
                    pd[i] = dot(d, layer.row(i)) * (1.0 - h[i] * h[i]);
                }
            }
            delta = prev_delta;
        }
        Gradient { layers: grads }
    }
}

pub(crate) fn featurize(tokens: &[TokenId], feature_dim: usize) -> Features {
    let mut counts: Vec<(usize, f64)> = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let bucket = token_bucket(t, feature_dim);
        match counts.iter_mut().find(|(b, _)| *b == bucket) {
            Some(slot) => slot.1 += 1.0,
            None => counts.push((bucket, 1.0)),
        }
    }
    counts.sort_by_key(|&(b, _)| b);
    let norm = counts.iter().map(|(_, c)| c * c).sum::<f64>().sqrt();
    for (_, c) in &mut counts {
        *c /= norm;
    }
    Features { entries: counts }
}

pub fn token_bucket(token: TokenId, feature_dim: usize) -> usize {
    (splitmix64(u64::from(token) ^ 0x5EED_F00D) % feature_dim as u64) as usize
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
