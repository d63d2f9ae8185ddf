//! Wengert-style gradient tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs to push adjoints back to its inputs. Nodes are appended in execution
//! order, so a reverse index sweep is a valid reverse topological order.

use rand::Rng;

use super::kernels::{self, ConvGeometry};
use super::{window_output, Mode, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Per-channel running mean/variance used by batch normalization in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Real> RunningStats<T> {
    /// Unpopulated statistics; eval mode refuses to use these.
    pub fn uninitialized(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: false,
        }
    }

    /// Zero mean, unit variance.
    pub fn standard(channels: usize) -> Self {
        RunningStats {
            initialized: true,
            ..Self::uninitialized(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn cast<U: Real>(&self) -> RunningStats<U> {
        RunningStats {
            mean: self.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            initialized: self.initialized,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geometry: ConvGeometry,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    BatchNorm2d {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dense {
        input: usize,
        weights: usize,
        bias: Option<usize>,
    },
    Relu(usize),
    Sigmoid(usize),
    GlobalAvgPool(usize),
    Reshape(usize),
    Dropout {
        input: usize,
        mask: Vec<T>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst {
        input: usize,
        factors: Vec<T>,
    },
    Scale(usize, T),
    AddScalar(usize),
    Square(usize),
    Abs(usize),
    Sum(usize),
    RowDistance {
        a: usize,
        b: usize,
    },
    SliceRows {
        input: usize,
        offset: usize,
    },
    BinaryCrossEntropy {
        probs: usize,
        targets: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every grad-requiring leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    by_node: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// The gradient for `var`, if it required one.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.by_node.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into the tensor's stored gradient.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Err(Error::Usage(format!(
                "no gradient recorded for node {}",
                var.0
            ))),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as a leaf; it receives a gradient iff `requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            Op::Leaf,
            tensor.requires_grad,
        )
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        if shape.is_empty() || shape.contains(&0) || numel(&shape) != values.len() {
            return Err(Error::dim(format!(
                "constant of shape {shape:?} with {} values",
                values.len()
            )));
        }
        Ok(self.push(shape, values, Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are well-shaped")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let n = &self.nodes[x.0];
        let value = n.value.iter().map(|&v| f(v)).collect();
        let shape = n.shape.clone();
        let needs = n.needs_grad;
        self.push(shape, value, op, needs)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Cross-correlation of `[N,C,H,W]` with `[F,C,kH,kW]`, zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (is, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if is.len() != 4 || ks.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects rank-4 input and kernel, got {is:?} and {ks:?}"
            )));
        }
        if is[1] != ks[1] {
            return Err(Error::dim(format!(
                "conv2d input has {} channels but kernel expects {}",
                is[1], ks[1]
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::dim(format!(
                    "conv2d bias shape {:?} for {} filters",
                    self.shape(b),
                    ks[0]
                )));
            }
        }
        let (out_h, out_w) = match (
            window_output(is[2], ks[2], stride, padding),
            window_output(is[3], ks[3], stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::dim(format!(
                    "conv2d kernel {}x{} (stride {stride}, padding {padding}) does not fit input {}x{}",
                    ks[2], ks[3], is[2], is[3]
                )))
            }
        };
        let geometry = ConvGeometry {
            batch: is[0],
            in_channels: is[1],
            height: is[2],
            width: is[3],
            filters: ks[0],
            kernel_h: ks[2],
            kernel_w: ks[3],
            stride,
            padding,
            out_h,
            out_w,
        };
        let value = kernels::conv2d_forward(
            &geometry,
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
        );
        let mut deps = vec![input.0, kernel.0];
        deps.extend(bias.map(|b| b.0));
        let needs = self.needs(&deps);
        Ok(self.push(
            vec![is[0], ks[0], out_h, out_w],
            value,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.map(|b| b.0),
                geometry,
            },
            needs,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("maxpool2d expects rank 4, got {s:?}")));
        }
        if window == 0 || stride == 0 || window > s[2] || window > s[3] {
            return Err(Error::dim(format!(
                "maxpool window {window} exceeds spatial extent {}x{}",
                s[2], s[3]
            )));
        }
        let out_h = (s[2] - window) / stride + 1;
        let out_w = (s[3] - window) / stride + 1;
        let (value, argmax) = kernels::maxpool_forward(
            s[0] * s[1],
            s[2],
            s[3],
            window,
            stride,
            out_h,
            out_w,
            self.value(input),
        );
        let needs = self.nodes[input.0].needs_grad;
        Ok(self.push(
            vec![s[0], s[1], out_h, out_w],
            value,
            Op::MaxPool2d {
                input: input.0,
                argmax,
            },
            needs,
        ))
    }

    /// Per-channel batch normalization over `[N,C,H,W]`.
    ///
    /// Train mode normalizes with biased batch statistics and folds them into
    /// `stats`; eval mode reads `stats` only.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        stats: &mut RunningStats<T>,
        config: BatchNormConfig,
    ) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("batchnorm2d expects rank 4, got {s:?}")));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.channels() != c {
            return Err(Error::dim(format!(
                "batchnorm2d over {c} channels got gamma {:?}, beta {:?}, {} running channels",
                self.shape(gamma),
                self.shape(beta),
                stats.channels()
            )));
        }
        let x = self.value(input);
        let eps = T::from_f64(config.epsilon);
        let count = n * plane;
        let mut inv_std = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); x.len()];
        let batch_stats = mode == Mode::Train;
        if !batch_stats && !stats.initialized {
            return Err(Error::State(
                "batchnorm eval mode requires populated running statistics".into(),
            ));
        }
        for ch in 0..c {
            let (mean, var) = if batch_stats {
                let mut sum = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    sum += x[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    sq += x[off..off + plane]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mean;
                            d * d
                        })
                        .sum::<f64>();
                }
                let var = sq / count as f64;
                let m = config.momentum;
                if stats.initialized {
                    stats.mean[ch] =
                        T::from_f64((1.0 - m) * stats.mean[ch].as_f64() + m * mean);
                    stats.var[ch] = T::from_f64((1.0 - m) * stats.var[ch].as_f64() + m * var);
                } else {
                    stats.mean[ch] = T::from_f64(mean);
                    stats.var[ch] = T::from_f64(var);
                }
                (T::from_f64(mean), T::from_f64(var))
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            inv_std[ch] = T::one() / (var + eps).sqrt();
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    xhat[i] = (x[i] - mean) * inv_std[ch];
                }
            }
        }
        if batch_stats {
            stats.initialized = true;
        }
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut value = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    value[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let needs = self.needs(&[input.0, gamma.0, beta.0]);
        Ok(self.push(
            s,
            value,
            Op::BatchNorm2d {
                input: input.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        ))
    }

    /// Affine map `[N,D]·[D,K] + [K]`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weights).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim(format!(
                "dense: input {xs:?} incompatible with weights {ws:?}"
            )));
        }
        let (n, d, k) = (xs[0], xs[1], ws[1]);
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(Error::dim(format!(
                    "dense bias shape {:?} for {k} units",
                    self.shape(b)
                )));
            }
        }
        let mut value = vec![T::zero(); n * k];
        if let Some(b) = bias {
            let bv = self.value(b);
            for row in value.chunks_mut(k) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            n,
            d,
            k,
            T::one(),
            self.value(input),
            (d as isize, 1),
            self.value(weights),
            (k as isize, 1),
            T::one(),
            &mut value,
            (k as isize, 1),
        );
        let mut deps = vec![input.0, weights.0];
        deps.extend(bias.map(|b| b.0));
        let needs = self.needs(&deps);
        Ok(self.push(
            vec![n, k],
            value,
            Op::Dense {
                input: input.0,
                weights: weights.0,
                bias: bias.map(|b| b.0),
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x.0))
    }

    /// Logistic sigmoid, clamped into `[1e-7, 1 - 1e-7]`.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    /// `[N,C,H,W]` → `[N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!(
                "global_avg_pool expects rank 4, got {s:?}"
            )));
        }
        let plane = s[2] * s[3];
        let scale = T::from_f64(1.0 / plane as f64);
        let value = self
            .value(x)
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * scale)
            .collect();
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(vec![s[0], s[1]], value, Op::GlobalAvgPool(x.0), needs))
    }

    /// Row-major reshape; element order is untouched.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let value = self.value(x).to_vec();
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(shape, value, Op::Reshape(x.0), needs))
    }

    /// `[N, ...]` → `[N, D]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let d = numel(&s[1..]);
        self.reshape(x, vec![n, d])
    }

    /// Inverted dropout: identity in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate {rate} outside [0,1)"
            )));
        }
        let len = self.value(x).len();
        let mask: Vec<T> = if mode == Mode::Eval || rate == 0.0 {
            vec![T::one(); len]
        } else {
            let keep = T::from_f64(1.0 / (1.0 - rate));
            (0..len)
                .map(|_| {
                    if rng.gen::<f64>() < rate {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect()
        };
        let value = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(shape, value, Op::Dropout { input: x.0, mask }, needs))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(shape, value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Elementwise product with fixed (non-differentiable) factors.
    pub fn mul_const(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        if factors.len() != self.value(x).len() {
            return Err(Error::dim(format!(
                "mul_const: {} factors for {} elements",
                factors.len(),
                self.value(x).len()
            )));
        }
        let value = self
            .value(x)
            .iter()
            .zip(&factors)
            .map(|(&v, &f)| v * f)
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(shape, value, Op::MulConst { input: x.0, factors }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x.0, factor))
    }

    pub fn add_scalar(&mut self, x: Var, offset: T) -> Var {
        self.unary(x, |v| v + offset, Op::AddScalar(x.0))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x.0))
    }

    /// Sum of all elements, as shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum::<T>();
        let needs = self.nodes[x.0].needs_grad;
        self.push(vec![1], vec![total], Op::Sum(x.0), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    /// Per-row Euclidean distance between two `[N,D]` matrices → `[N]`.
    ///
    /// The gradient at zero distance is taken as zero.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_distance")?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!("row_distance expects rank 2, got {s:?}")));
        }
        let d = s[1];
        let value = self
            .value(a)
            .chunks(d)
            .zip(self.value(b).chunks(d))
            .map(|(x, y)| {
                x.iter()
                    .zip(y)
                    .map(|(&p, &q)| (p - q) * (p - q))
                    .sum::<T>()
                    .sqrt()
            })
            .collect();
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(vec![s[0]], value, Op::RowDistance { a: a.0, b: b.0 }, needs))
    }

    /// Rows `[offset, offset+len)` along the leading dimension.
    pub fn slice_rows(&mut self, x: Var, offset: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || offset + len > s[0] {
            return Err(Error::dim(format!(
                "slice [{offset}, {}) out of range for leading extent {}",
                offset + len,
                s[0]
            )));
        }
        let row = numel(&s[1..]);
        let value = self.value(x)[offset * row..(offset + len) * row].to_vec();
        let mut shape = s;
        shape[0] = len;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(shape, value, Op::SliceRows { input: x.0, offset }, needs))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: Vec<T>) -> Result<Var> {
        let p = self.value(probs);
        if targets.len() != p.len() {
            return Err(Error::dim(format!(
                "bce: {} targets for {} probabilities",
                targets.len(),
                p.len()
            )));
        }
        let n = T::from_f64(p.len() as f64);
        let loss = p
            .iter()
            .zip(&targets)
            .map(|(&p, &y)| -(y * p.ln() + (T::one() - y) * (T::one() - p).ln()))
            .sum::<T>()
            / n;
        let needs = self.nodes[probs.0].needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::BinaryCrossEntropy {
                probs: probs.0,
                targets,
            },
            needs,
        ))
    }

    /// Propagates adjoints from the scalar `loss` back to every leaf that
    /// requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(Gradients { by_node: grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], idx: usize) -> Option<&'g mut Vec<T>> {
        if !self.nodes[idx].needs_grad {
            return None;
        }
        let len = self.nodes[idx].value.len();
        Some(grads[idx].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], idx: usize, f: impl Fn(usize) -> T) {
        if let Some(slot) = self.slot(grads, idx) {
            for (i, s) in slot.iter_mut().enumerate() {
                *s += f(i);
            }
        }
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                // Three disjoint slots; take them out to borrow simultaneously.
                let mut dx = self.slot(grads, *input).map(std::mem::take);
                let mut dk = self.slot(grads, *kernel).map(std::mem::take);
                let mut db = bias.and_then(|b| self.slot(grads, b).map(std::mem::take));
                kernels::conv2d_backward(
                    geometry,
                    &self.nodes[*input].value,
                    &self.nodes[*kernel].value,
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(v) = dx {
                    grads[*input] = Some(v);
                }
                if let Some(v) = dk {
                    grads[*kernel] = Some(v);
                }
                if let (Some(b), Some(v)) = (bias, db) {
                    grads[*b] = Some(v);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if let Some(slot) = self.slot(grads, *input) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        slot[src] += gv;
                    }
                }
            }
            Op::BatchNorm2d {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = &node.shape;
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gam = &self.nodes[*gamma].value;
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            sum_dy[ch] += g[i];
                            sum_dy_xhat[ch] += g[i] * xhat[i];
                        }
                    }
                }
                self.accumulate(grads, *gamma, |ch| sum_dy_xhat[ch]);
                self.accumulate(grads, *beta, |ch| sum_dy[ch]);
                if let Some(slot) = self.slot(grads, *input) {
                    let m = T::from_f64((n * plane) as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for i in off..off + plane {
                                slot[i] += if *batch_stats {
                                    k * (g[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::Dense {
                input,
                weights,
                bias,
            } => {
                let xs = &self.nodes[*input].shape;
                let (n, d, k) = (xs[0], xs[1], node.shape[1]);
                if let Some(slot) = self.slot(grads, *input) {
                    // dX[N,D] += dY[N,K] · W[D,K]^T
                    T::gemm(
                        n,
                        k,
                        d,
                        T::one(),
                        g,
                        (k as isize, 1),
                        &self.nodes[*weights].value,
                        (1, k as isize),
                        T::one(),
                        slot,
                        (d as isize, 1),
                    );
                }
                if let Some(slot) = self.slot(grads, *weights) {
                    // dW[D,K] += X[N,D]^T · dY[N,K]
                    T::gemm(
                        d,
                        n,
                        k,
                        T::one(),
                        &self.nodes[*input].value,
                        (1, d as isize),
                        g,
                        (k as isize, 1),
                        T::one(),
                        slot,
                        (k as isize, 1),
                    );
                }
                if let Some(b) = bias {
                    if let Some(slot) = self.slot(grads, *b) {
                        for row in g.chunks(k) {
                            slot.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                self.accumulate(grads, *x, |i| if out[i] > T::zero() { g[i] } else { T::zero() })
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, |i| g[i] * out[i] * (T::one() - out[i]))
            }
            Op::GlobalAvgPool(x) => {
                let s = &self.nodes[*x].shape;
                let plane = s[2] * s[3];
                let scale = T::from_f64(1.0 / plane as f64);
                self.accumulate(grads, *x, |i| g[i / plane] * scale)
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |i| g[i]),
            Op::Dropout { input, mask } => self.accumulate(grads, *input, |i| g[i] * mask[i]),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |i| g[i]);
                self.accumulate(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |i| g[i]);
                self.accumulate(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.accumulate(grads, *a, |i| g[i] * bv[i]);
                self.accumulate(grads, *b, |i| g[i] * av[i]);
            }
            Op::MulConst { input, factors } => {
                self.accumulate(grads, *input, |i| g[i] * factors[i])
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, |i| g[i] * *f),
            Op::AddScalar(x) => self.accumulate(grads, *x, |i| g[i]),
            Op::Square(x) => {
                let xv = &self.nodes[*x].value;
                let two = T::from_f64(2.0);
                self.accumulate(grads, *x, |i| two * xv[i] * g[i])
            }
            Op::Abs(x) => {
                let xv = &self.nodes[*x].value;
                self.accumulate(grads, *x, |i| {
                    if xv[i] > T::zero() {
                        g[i]
                    } else if xv[i] < T::zero() {
                        -g[i]
                    } else {
                        T::zero()
                    }
                })
            }
            Op::Sum(x) => self.accumulate(grads, *x, |_| g[0]),
            Op::RowDistance { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let d = self.nodes[*a].shape[1];
                let coeff = |i: usize| {
                    let r = i / d;
                    if out[r] > T::zero() {
                        g[r] * (av[i] - bv[i]) / out[r]
                    } else {
                        T::zero()
                    }
                };
                self.accumulate(grads, *a, coeff);
                self.accumulate(grads, *b, |i| -coeff(i));
            }
            Op::SliceRows { input, offset } => {
                let row = numel(&node.shape[1..]);
                let start = offset * row;
                if let Some(slot) = self.slot(grads, *input) {
                    slot[start..start + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, &v)| *s += v);
                }
            }
            Op::BinaryCrossEntropy { probs, targets } => {
                let p = &self.nodes[*probs].value;
                let n = T::from_f64(p.len() as f64);
                self.accumulate(grads, *probs, |i| {
                    g[0] * (p[i] - targets[i]) / (p[i] * (T::one() - p[i])) / n
                })
            }
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let eps = T::from_f64(1e-7);
    s.max(eps).min(T::one() - eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.leaf(&t(&[1, 1, 1, 1], &[2.0]));
        let b = tape.leaf(&t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y), &[2.0, 4.0, 6.0, 8.0]);

        let x = tape.leaf(&t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = tape.leaf(&t(&[1, 1, 2, 2], &[1.0; 4]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_identity_kernel_and_channel_mismatch() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..18).map(f64::from).collect();
        let x = tape.leaf(&t(&[1, 2, 3, 3], &vals));
        // delta kernel: filter f copies channel f
        let k = tape.leaf(&t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), vals.as_slice());

        let bad = tape.leaf(&t(&[1, 3, 1, 1], &[1.0; 3]));
        assert!(matches!(
            tape.conv2d(x, bad, None, 1, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv_padding_and_stride() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 3, 3], &[1.0; 9]));
        let k = tape.leaf(&t(&[1, 1, 3, 3], &[1.0; 9]));
        let y = tape.conv2d(x, k, None, 2, 1).unwrap();
        // corners see a 2x2 patch of ones
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn maxpool_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y), &[4.0]);

        let x = tape.leaf(&t(
            &[1, 1, 4, 4],
            &[1., 5., 2., 0., 3., 4., 1., 1., 0., 0., 9., 2., 0., 0., 3., 4.],
        ));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y), &[5.0, 2.0, 0.0, 9.0]);

        let x = tape.leaf(&t(&[1, 1, 2, 2], &[7.0; 4]));
        let y = tape.maxpool2d(x, 2, 1).unwrap();
        assert_eq!(tape.value(y), &[7.0]);
        assert!(matches!(tape.maxpool2d(x, 3, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[3.0; 4]).with_grad());
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn batchnorm_examples() {
        let cfg = BatchNormConfig::default();
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 1, 1, 1], &[1.0, 3.0]));
        let g = tape.leaf(&t(&[1], &[1.0]));
        let b = tape.leaf(&t(&[1], &[0.0]));
        let mut stats = RunningStats::uninitialized(1);
        let y = tape
            .batchnorm2d(x, g, b, Mode::Train, &mut stats, cfg)
            .unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(y)[0] + expect).abs() < 1e-12);
        assert!((tape.value(y)[1] - expect).abs() < 1e-12);
        assert!((tape.value(y)[1] - 0.999995).abs() < 1e-6);
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);

        // gamma = 0 → beta everywhere
        let g0 = tape.leaf(&t(&[1], &[0.0]));
        let b5 = tape.leaf(&t(&[1], &[0.5]));
        let y = tape
            .batchnorm2d(x, g0, b5, Mode::Train, &mut stats, cfg)
            .unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn batchnorm_eval_requires_stats() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 1, 1], &[1.0]));
        let g = tape.leaf(&t(&[1], &[1.0]));
        let b = tape.leaf(&t(&[1], &[0.0]));
        let mut stats = RunningStats::uninitialized(1);
        assert!(matches!(
            tape.batchnorm2d(x, g, b, Mode::Eval, &mut stats, BatchNormConfig::default()),
            Err(Error::State(_))
        ));
        let mut stats = RunningStats::standard(1);
        let y = tape
            .batchnorm2d(x, g, b, Mode::Eval, &mut stats, BatchNormConfig::default())
            .unwrap();
        assert!((tape.value(y)[0] - 1.0 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_train_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..8 * 2 * 3 * 3).map(|_| rng.gen_range(-4.0..9.0)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[8, 2, 3, 3], &vals));
        let g = tape.leaf(&t(&[2], &[1.5, -0.5]));
        let b = tape.leaf(&t(&[2], &[0.25, 2.0]));
        let mut stats = RunningStats::standard(2);
        let y = tape
            .batchnorm2d(x, g, b, Mode::Train, &mut stats, BatchNormConfig::default())
            .unwrap();
        let v = tape.value(y);
        for (ch, (gamma, beta)) in [(1.5, 0.25), (-0.5, 2.0)].into_iter().enumerate() {
            let xs: Vec<f64> = (0..8)
                .flat_map(|n| v[(n * 2 + ch) * 9..(n * 2 + ch) * 9 + 9].to_vec())
                .collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
            assert!((m - beta).abs() < 1e-9);
            assert!((var - gamma * gamma).abs() < 1e-3 * gamma * gamma);
        }
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2], &[1.0, 1.0]));
        let w = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t(&[2], &[0.5, -0.5]));
        let y = tape.dense(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), &[4.5, 5.5]);

        let x = tape.leaf(&t(&[2, 2], &[3.0, -1.0, 0.5, 2.0]));
        let eye = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.dense(x, eye, None).unwrap();
        assert_eq!(tape.value(y), &[3.0, -1.0, 0.5, 2.0]);

        let z = tape.leaf(&t(&[1, 2], &[0.0, 0.0]));
        let y = tape.dense(z, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), &[0.5, -0.5]);

        let bad = tape.leaf(&t(&[3, 2], &[0.0; 6]));
        assert!(matches!(tape.dense(x, bad, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn activations() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s)[1], 0.5);
        assert!((tape.value(s)[2] - 0.8807970779778823).abs() < 1e-12);
        let big = tape.leaf(&t(&[2], &[100.0, -100.0]));
        let s = tape.sigmoid(big);
        assert!(tape.value(s)[0] < 1.0 && tape.value(s)[1] > 0.0);
    }

    #[test]
    fn pooling_and_flatten() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2, 2, 2], &[1., 2., 3., 4., 5., 5., 5., 5.]));
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p), &[2.5, 5.0]);

        let vals: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.leaf(&t(&[2, 3, 4], &vals));
        let f = tape.flatten(x).unwrap();
        assert_eq!(tape.shape(f), &[2, 12]);
        assert_eq!(tape.value(f), vals.as_slice());
        let back = tape.reshape(f, vec![2, 3, 4]).unwrap();
        assert_eq!(tape.tensor(back), t(&[2, 3, 4], &vals));
        let ff = tape.flatten(f).unwrap();
        assert_eq!(tape.shape(ff), &[2, 12]);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let y = tape.dropout(x, 0.9, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());

        let n = 100_000;
        let ones = tape.leaf(&t(&[n], &vec![1.0; n]));
        let y = tape.dropout(ones, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = tape.value(y).iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");

        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = tape.dropout(x, 0.5, Mode::Train, &mut r1).unwrap();
        let b = tape.dropout(x, 0.5, Mode::Train, &mut r2).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[3.0]).with_grad());
        let sq = tape.square(x);
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);

        let c = tape.leaf(&t(&[1], &[5.0]));
        let w = tape.leaf(&t(&[2], &[1.0, 1.0]).with_grad());
        let g = tape.backward(c).unwrap();
        assert_eq!(g.get(w).unwrap(), &[0.0, 0.0]);

        assert!(matches!(tape.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let mut param = t(&[1], &[3.0]).with_grad();
        let x = tape.leaf(&param);
        let sq = tape.square(x);
        for _ in 0..2 {
            tape.backward(sq).unwrap().accumulate_into(x, &mut param).unwrap();
        }
        assert_eq!(param.grad().unwrap(), &[12.0]);
    }

    #[test]
    fn row_distance_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 2], &[1.0, 1.0]).with_grad());
        let b = tape.leaf(&t(&[1, 2], &[1.0, 1.0]).with_grad());
        let d = tape.row_distance(a, b).unwrap();
        let l = tape.sum(d);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.0, 0.0]);
    }
}
