//! Multilayer perceptron with ReLU hidden activations and fixed affine
//! scaling layers at the input and output.

use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scaling::AffineScale;
use crate::{Error, Result};

/// Feed-forward network `out_scale(T_L(relu(...relu(T_1(in_scale(x))))))`.
///
/// `layer_dims = [n_0, ..., n_L]` describes the `L` affine layers;
/// `weights[l]` is the `n_{l+1} x n_l` matrix of layer `l` in row-major
/// order. The final affine layer has no activation. The scaling layers are
/// not trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub(crate) layer_dims: Vec<usize>,
    pub(crate) weights: Vec<Vec<f64>>,
    pub(crate) biases: Vec<Vec<f64>>,
    pub(crate) input_scale: AffineScale,
    pub(crate) output_scale: AffineScale,
}

/// Parameter gradients mirroring [`Mlp::weights`] and [`Mlp::biases`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Divides every gradient entry by `n` (batch averaging).
    pub fn scale(&mut self, factor: f64) {
        for t in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for g in t {
                *g *= factor;
            }
        }
    }
}

/// Forward pass intermediates needed by backpropagation.
pub(crate) struct Trace {
    /// Activations `a_0..a_L`; `a_0` is the normalized input and `a_L` the
    /// normalized output.
    pub acts: Vec<Vec<f64>>,
    /// Pre-activations `z_1..z_L`.
    pub pre_acts: Vec<Vec<f64>>,
}

fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

// Subgradient convention: relu'(0) = 0.
fn relu_prime(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

impl Mlp {
    /// Seeded He-uniform initialization: weights of layer `l` are drawn from
    /// `[-sqrt(6/n_{l-1}), sqrt(6/n_{l-1})]`, biases start at zero, and both
    /// scaling layers start as the identity.
    ///
    /// The same seed always produces bitwise-identical weights.
    pub fn new(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidValue(
                "an MLP needs at least an input and an output dimension".into(),
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidValue("layer dimensions must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for l in 0..layer_dims.len() - 1 {
            let fan_in = layer_dims[l];
            let fan_out = layer_dims[l + 1];
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            input_scale: AffineScale::identity(layer_dims[0]),
            output_scale: AffineScale::identity(layer_dims[layer_dims.len() - 1]),
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 1]
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_scale(&self) -> &AffineScale {
        &self.input_scale
    }

    pub fn output_scale(&self) -> &AffineScale {
        &self.output_scale
    }

    /// Replaces both scaling layers. Dimensions must match the network.
    pub fn set_scaling(&mut self, input: AffineScale, output: AffineScale) -> Result<()> {
        if input.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "input scale".into(),
                expected: self.input_dim(),
                got: input.dim(),
            });
        }
        if output.dim() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "output scale".into(),
                expected: self.output_dim(),
                got: output.dim(),
            });
        }
        self.input_scale = input;
        self.output_scale = output;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Weight matrix of affine layer `l`, row-major `(fan_out, fan_in)`.
    pub fn layer_weights(&self, l: usize) -> &[f64] {
        &self.weights[l]
    }

    pub fn layer_biases(&self, l: usize) -> &[f64] {
        &self.biases[l]
    }

    /// Mutable weight access for external optimizers and probes.
    pub fn layer_weights_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.weights[l]
    }

    pub fn layer_biases_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.biases[l]
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "MLP input".into(),
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    /// `W_l a + b_l`.
    fn affine(&self, l: usize, a: &[f64]) -> Vec<f64> {
        let n_in = self.layer_dims[l];
        let n_out = self.layer_dims[l + 1];
        let w = &self.weights[l];
        let b = &self.biases[l];
        let mut out = Vec::with_capacity(n_out);
        for r in 0..n_out {
            let row = &w[r * n_in..(r + 1) * n_in];
            let mut acc = b[r];
            for (wi, ai) in row.iter().zip(a) {
                acc += wi * ai;
            }
            out.push(acc);
        }
        out
    }

    pub(crate) fn trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let depth = self.depth();
        let mut acts = Vec::with_capacity(depth + 1);
        let mut pre_acts = Vec::with_capacity(depth);
        acts.push(self.input_scale.normalize(input));
        for l in 0..depth {
            let z = self.affine(l, &acts[l]);
            let a = if l + 1 < depth {
                z.iter().map(|&v| relu(v)).collect()
            } else {
                z.clone()
            };
            pre_acts.push(z);
            acts.push(a);
        }
        Ok(Trace { acts, pre_acts })
    }

    /// Network output in normalized units (before the output scale).
    pub fn forward_normalized(&self, input: &[f64]) -> Result<Vec<f64>> {
        let trace = self.trace(input)?;
        Ok(trace.acts.into_iter().next_back().expect("depth >= 1"))
    }

    /// Full forward pass in physical units.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.output_scale.denormalize(&self.forward_normalized(input)?))
    }

    /// Backpropagates `d(normalized output)` through the affine/ReLU chain,
    /// accumulating parameter gradients into `grads`.
    pub(crate) fn backward_normalized(
        &self,
        trace: &Trace,
        d_out_norm: &[f64],
        grads: &mut MlpGrads,
    ) {
        let depth = self.depth();
        debug_assert_eq!(d_out_norm.len(), self.output_dim());
        let mut d = d_out_norm.to_vec();
        for l in (0..depth).rev() {
            let n_in = self.layer_dims[l];
            let a_prev = &trace.acts[l];
            let gw = &mut grads.weights[l];
            let gb = &mut grads.biases[l];
            for (r, dr) in d.iter().enumerate() {
                gb[r] += dr;
                let row = &mut gw[r * n_in..(r + 1) * n_in];
                for (g, ai) in row.iter_mut().zip(a_prev) {
                    *g += dr * ai;
                }
            }
            if l > 0 {
                let w = &self.weights[l];
                let z_prev = &trace.pre_acts[l - 1];
                let mut d_prev = vec![0.0; n_in];
                for (r, dr) in d.iter().enumerate() {
                    let row = &w[r * n_in..(r + 1) * n_in];
                    for (dp, wi) in d_prev.iter_mut().zip(row) {
                        *dp += wi * dr;
                    }
                }
                for (dp, z) in d_prev.iter_mut().zip(z_prev) {
                    *dp *= relu_prime(*z);
                }
                d = d_prev;
            }
        }
    }

    /// Gradients of a scalar loss with respect to every weight and bias,
    /// given `upstream[i] = dL/d(output_i)` in physical units.
    ///
    /// The scaling layers pass gradients through (the output scale
    /// contributes its span factor) but receive none themselves.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<MlpGrads> {
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "MLP upstream gradient".into(),
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let trace = self.trace(input)?;
        let d_norm: Vec<f64> = upstream
            .iter()
            .enumerate()
            .map(|(i, u)| u * self.output_scale.span(i))
            .collect();
        let mut grads = MlpGrads::zeros_like(self);
        self.backward_normalized(&trace, &d_norm, &mut grads);
        Ok(grads)
    }
}

/// Serialized model schema, version 1.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    layer_dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    input_scale: AffineScale,
    output_scale: AffineScale,
}

/// Renders a model to its JSON schema (version 1).
pub fn model_to_json(net: &Mlp) -> String {
    let file = ModelFile {
        version: 1,
        layer_dims: net.layer_dims.clone(),
        weights: net.weights.clone(),
        biases: net.biases.clone(),
        input_scale: net.input_scale.clone(),
        output_scale: net.output_scale.clone(),
    };
    serde_json::to_string_pretty(&file).expect("model serialization cannot fail") + "\n"
}

/// Parses and validates a version-1 model JSON document.
pub fn model_from_json(text: &str) -> Result<Mlp> {
    let file: ModelFile = serde_json::from_str(text)?;
    if file.version != 1 {
        return Err(Error::Format(format!(
            "unsupported model version {} (expected 1)",
            file.version
        )));
    }
    if file.layer_dims.len() < 2 || file.layer_dims.contains(&0) {
        return Err(Error::Format("invalid layer_dims".into()));
    }
    let depth = file.layer_dims.len() - 1;
    if file.weights.len() != depth || file.biases.len() != depth {
        return Err(Error::Format(format!(
            "expected {depth} weight and bias tensors, got {} and {}",
            file.weights.len(),
            file.biases.len()
        )));
    }
    for l in 0..depth {
        let expect_w = file.layer_dims[l] * file.layer_dims[l + 1];
        if file.weights[l].len() != expect_w {
            return Err(Error::Format(format!(
                "layer {l}: expected {expect_w} weights, got {}",
                file.weights[l].len()
            )));
        }
        if file.biases[l].len() != file.layer_dims[l + 1] {
            return Err(Error::Format(format!(
                "layer {l}: expected {} biases, got {}",
                file.layer_dims[l + 1],
                file.biases[l].len()
            )));
        }
        if file.weights[l]
            .iter()
            .chain(&file.biases[l])
            .any(|v| !v.is_finite())
        {
            return Err(Error::Format(format!("layer {l}: non-finite parameter")));
        }
    }
    if file.input_scale.dim() != file.layer_dims[0] {
        return Err(Error::Format("input_scale dimension mismatch".into()));
    }
    if file.output_scale.dim() != file.layer_dims[depth] {
        return Err(Error::Format("output_scale dimension mismatch".into()));
    }
    // Re-validate scale bounds through the checked constructor.
    let input_scale = AffineScale::new(
        file.input_scale.min().to_vec(),
        file.input_scale.max().to_vec(),
    )?;
    let output_scale = AffineScale::new(
        file.output_scale.min().to_vec(),
        file.output_scale.max().to_vec(),
    )?;
    Ok(Mlp {
        layer_dims: file.layer_dims,
        weights: file.weights,
        biases: file.biases,
        input_scale,
        output_scale,
    })
}

/// Writes the model JSON (schema version 1) to `path`.
pub fn save_model(net: &Mlp, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_json(net))?;
    Ok(())
}

/// Loads a model saved by [`save_model`]. Round-trips are bitwise lossless.
pub fn load_model(path: &Path) -> Result<Mlp> {
    let text = std::fs::read_to_string(path)?;
    model_from_json(&text)
}
