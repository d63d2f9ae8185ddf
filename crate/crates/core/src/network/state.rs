//! Parameter storage and the forward pass.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{ActivationKind, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{euclidean_distance, BatchNormConfig, Mode, Real, RunningStats, Tape, Tensor, Var};

/// A network's spec together with its trainable tensors and batchnorm
/// running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState<T = f32> {
    pub spec: NetworkSpec,
    pub params: Vec<Tensor<T>>,
    pub running: Vec<RunningStats<T>>,
    pub rng_seed: u64,
}

/// Glorot-uniform weights, zero biases, unit gamma, zero beta.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<NetworkState<f32>> {
    spec.validate()?;
    let shapes = spec.shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut glorot = |shape: Vec<usize>, fan_in: usize, fan_out: usize| {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let dist = Uniform::new_inclusive(-limit, limit);
        let n = shape.iter().product();
        let values = (0..n).map(|_| dist.sample(&mut rng)).collect();
        Tensor::new(shape, values).map(Tensor::with_grad)
    };
    for (layer, input) in spec.layers.iter().zip(&shapes) {
        match layer {
            LayerSpec::Conv {
                filters, kernel, ..
            } => {
                let area = kernel * kernel;
                params.push(glorot(
                    vec![*filters, input[0], *kernel, *kernel],
                    input[0] * area,
                    filters * area,
                )?);
                params.push(Tensor::zeros(&[*filters]).with_grad());
            }
            LayerSpec::Dense { units, .. } => {
                params.push(glorot(vec![input[0], *units], input[0], *units)?);
                params.push(Tensor::zeros(&[*units]).with_grad());
            }
            LayerSpec::Batchnorm => {
                params.push(Tensor::full(&[input[0]], 1.0).with_grad());
                params.push(Tensor::zeros(&[input[0]]).with_grad());
            }
            _ => {}
        }
    }
    if spec.similarity_head {
        let d = spec.embedding_dim()?;
        params.push(glorot(vec![d, 1], d, 1)?);
        params.push(Tensor::zeros(&[1]).with_grad());
    }
    let running = spec
        .batchnorm_channels()?
        .into_iter()
        .map(RunningStats::standard)
        .collect();
    Ok(NetworkState {
        spec: spec.clone(),
        params,
        running,
        rng_seed: seed,
    })
}

/// Trainable scalar count: conv `k²·C·F + F`, dense `D·K + K`, batchnorm
/// `2·C`, similarity layer `D + 1`.
pub fn count_parameters<T: Real>(state: &NetworkState<T>) -> usize {
    state.params.iter().map(Tensor::numel).sum()
}

impl<T: Real> NetworkState<T> {
    pub fn cast<U: Real>(&self) -> NetworkState<U> {
        NetworkState {
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            running: self.running.iter().map(RunningStats::cast).collect(),
            rng_seed: self.rng_seed,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim().expect("validated spec")
    }

    /// Index of the first trainable tensor of each layer, plus the similarity
    /// layer's index at the end.
    fn param_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.spec.layers.len() + 1);
        let mut next = 0;
        for layer in &self.spec.layers {
            offsets.push(next);
            next += match layer {
                LayerSpec::Conv { .. } | LayerSpec::Dense { .. } | LayerSpec::Batchnorm => 2,
                _ => 0,
            };
        }
        offsets.push(next);
        offsets
    }

    /// `(layer index, parameter index)` of every conv/dense weight tensor with
    /// its L2 coefficient.
    pub fn regularized_weights(&self) -> Vec<(usize, usize, f64)> {
        let offsets = self.param_offsets();
        self.spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. } | LayerSpec::Dense { .. }))
            .map(|(i, l)| (i, offsets[i], l.l2_coefficient()))
            .collect()
    }

    /// Layer index owning each parameter tensor; the similarity layer reports
    /// `spec.layers.len()`.
    pub fn param_owners(&self) -> Vec<usize> {
        let offsets = self.param_offsets();
        let mut owners = vec![self.spec.layers.len(); self.params.len()];
        for (layer, w) in offsets.windows(2).enumerate() {
            for o in &mut owners[w[0]..w[1]] {
                *o = layer;
            }
        }
        owners
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p)).collect()
    }

    /// Runs the layer stack on a `[N, ...input_shape]` batch.
    ///
    /// Train mode updates the batchnorm running statistics and draws dropout
    /// masks from `rng`. When `trace` is given, each layer's output is pushed
    /// onto it.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        params: &[Var],
        input: Var,
        mode: Mode,
        rng: &mut R,
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(Error::dim(format!(
                "{} parameter handles for {} tensors",
                params.len(),
                self.params.len()
            )));
        }
        let offsets = self.param_offsets();
        run_layers(&self.spec, &offsets, &mut self.running, tape, params, input, mode, rng, trace)
    }

    /// `sigmoid(|a − b|·w + b₀)` for two `[N,D]` embedding batches → `[N,1]`.
    pub fn similarity(&self, tape: &mut Tape<T>, params: &[Var], a: Var, b: Var) -> Result<Var> {
        if !self.spec.similarity_head {
            return Err(Error::State("network has no similarity layer".into()));
        }
        let k = self.param_offsets()[self.spec.layers.len()];
        let diff = tape.sub(a, b)?;
        let abs = tape.abs(diff);
        let logit = tape.dense(abs, params[k], Some(params[k + 1]))?;
        Ok(tape.sigmoid(logit))
    }

    /// Eval-mode embedding of one sample shaped like `spec.input_shape`.
    pub fn embed(&self, input: &Tensor<T>) -> Result<Vec<T>> {
        if input.shape() != self.spec.input_shape.as_slice() {
            return Err(Error::dim(format!(
                "network expects input {:?}, got {:?}",
                self.spec.input_shape,
                input.shape()
            )));
        }
        let mut shape = vec![1];
        shape.extend(input.shape());
        let mut tape = Tape::new();
        let x = tape.constant(shape, input.values().to_vec())?;
        let (out, _) = self.eval_on(&mut tape, x, false)?;
        Ok(tape.value(out).to_vec())
    }

    /// Eval-mode forward without touching this state; returns the output and
    /// optionally the per-layer trace.
    fn eval_on(&self, tape: &mut Tape<T>, x: Var, traced: bool) -> Result<(Var, Vec<Var>)> {
        let mut running = self.running.clone();
        let consts: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.constant(p.shape().to_vec(), p.values().to_vec()))
            .collect::<Result<_>>()?;
        let mut trace = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_layers(
            &self.spec,
            &self.param_offsets(),
            &mut running,
            tape,
            &consts,
            x,
            Mode::Eval,
            &mut rng,
            traced.then_some(&mut trace),
        )?;
        Ok((out, trace))
    }

    /// Eval-mode per-layer outputs for one sample.
    pub fn trace(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut shape = vec![1];
        shape.extend(input.shape());
        let mut tape = Tape::new();
        let x = tape.constant(shape, input.values().to_vec())?;
        let (_, trace) = self.eval_on(&mut tape, x, true)?;
        Ok(trace.into_iter().map(|v| tape.tensor(v)).collect())
    }

    /// Similarity-layer probability for two precomputed embeddings.
    pub fn similarity_of(&self, a: &[T], b: &[T]) -> Result<f64> {
        if !self.spec.similarity_head {
            return Err(Error::State("network has no similarity layer".into()));
        }
        if a.len() != b.len() || a.len() != self.embedding_dim() {
            return Err(Error::dim(format!(
                "similarity of embeddings of length {} and {}",
                a.len(),
                b.len()
            )));
        }
        let k = self.param_offsets()[self.spec.layers.len()];
        let w = self.params[k].values();
        let b0 = self.params[k + 1].values()[0].as_f64();
        let logit = a
            .iter()
            .zip(b)
            .zip(w)
            .map(|((x, y), w)| (x.as_f64() - y.as_f64()).abs() * w.as_f64())
            .sum::<f64>()
            + b0;
        Ok(1.0 / (1.0 + (-logit).exp()))
    }
}

#[allow(clippy::too_many_arguments)]
fn run_layers<T: Real, R: Rng + ?Sized>(
    spec: &NetworkSpec,
    offsets: &[usize],
    running: &mut [RunningStats<T>],
    tape: &mut Tape<T>,
    params: &[Var],
    input: Var,
    mode: Mode,
    rng: &mut R,
    mut trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let expect = &spec.input_shape;
    let got = tape.shape(input);
    if got.len() != expect.len() + 1 || &got[1..] != expect.as_slice() {
        return Err(Error::dim(format!(
            "network expects [N, {expect:?}] input, got {got:?}"
        )));
    }
    let mut x = input;
    let mut bn = 0;
    for (i, layer) in spec.layers.iter().enumerate() {
        let p = &params[offsets[i]..];
        x = match layer {
            LayerSpec::Conv {
                stride, padding, ..
            } => tape.conv2d(x, p[0], Some(p[1]), *stride, *padding)?,
            LayerSpec::Batchnorm => {
                let shape = tape.shape(x).to_vec();
                let stats = &mut running[bn];
                bn += 1;
                let cfg = BatchNormConfig::default();
                if shape.len() == 2 {
                    let x4 = tape.reshape(x, vec![shape[0], shape[1], 1, 1])?;
                    let y = tape.batchnorm2d(x4, p[0], p[1], mode, stats, cfg)?;
                    tape.reshape(y, shape)?
                } else {
                    tape.batchnorm2d(x, p[0], p[1], mode, stats, cfg)?
                }
            }
            LayerSpec::Maxpool { window, stride } => tape.maxpool2d(x, *window, *stride)?,
            LayerSpec::Flatten => tape.flatten(x)?,
            LayerSpec::Dense { .. } => tape.dense(x, p[0], Some(p[1]))?,
            LayerSpec::Dropout { rate } => tape.dropout(x, *rate, mode, rng)?,
            LayerSpec::Activation { function } => match function {
                ActivationKind::Relu => tape.relu(x),
                ActivationKind::Sigmoid => tape.sigmoid(x),
            },
            LayerSpec::GlobalAvgPool => tape.global_avg_pool(x)?,
            LayerSpec::Reshape { shape } => {
                let mut full = vec![tape.shape(x)[0]];
                full.extend(shape);
                tape.reshape(x, full)?
            }
        };
        if let Some(t) = trace.as_deref_mut() {
            t.push(x);
        }
    }
    if tape.shape(x).len() != 2 {
        x = tape.flatten(x)?;
    }
    Ok(x)
}

/// Embedding of one image by a backbone ending in global average pooling.
pub fn extract_features<T: Real>(backbone: &NetworkState<T>, image: &Tensor<T>) -> Result<Vec<T>> {
    if !matches!(backbone.spec.layers.last(), Some(LayerSpec::GlobalAvgPool)) {
        return Err(Error::Spec {
            layer: backbone.spec.layers.len().saturating_sub(1),
            message: "feature extractor must end in global_avg_pool".into(),
        });
    }
    backbone.embed(image)
}

/// Distance between the two branch embeddings and the similarity-layer
/// probability (`NaN` when the network has no similarity layer).
pub fn siamese_forward<T: Real>(
    state: &NetworkState<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(f64, f64)> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "siamese inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ea = state.embed(a)?;
    let eb = state.embed(b)?;
    let distance = euclidean_distance(&ea, &eb)?;
    let similarity = if state.spec.similarity_head {
        state.similarity_of(&ea, &eb)?
    } else {
        f64::NAN
    };
    Ok((distance, similarity))
}
