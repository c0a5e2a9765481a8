//! Wengert tape: reverse-mode differentiation over dense f64 tensors.
//!
//! Operations append nodes carrying the forward value plus whatever the
//! backward pass needs (argmax positions, softmax outputs, batch-norm
//! statistics). `backward` replays the tape in reverse and returns one
//! gradient per node that transitively depends on a `requires_grad` leaf.
//!
//! Reduction and accumulation loops run in a fixed index order, so two
//! passes over identical inputs produce bit-identical values and
//! gradients. A single tape is not thread-safe; run independent tapes on
//! separate threads instead.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics produced by a training-mode batch norm,
/// used by the caller to update running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    Relu(VarId),
    Sigmoid(VarId),
    MulConst(VarId, Vec<f64>),
    MatMul { a: VarId, b: VarId, m: usize, k: usize, n: usize },
    AddRowBias { x: VarId, bias: VarId, rows: usize, cols: usize },
    AddChannelBias { x: VarId, bias: VarId, batch: usize, channels: usize, spatial: usize },
    Conv2d { input: VarId, kernel: VarId, dims: ConvDims },
    BatchNormTrain {
        input: VarId,
        gamma: VarId,
        beta: VarId,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: usize,
        channels: usize,
        spatial: usize,
    },
    BatchNormEval {
        input: VarId,
        gamma: VarId,
        beta: VarId,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: usize,
        channels: usize,
        spatial: usize,
    },
    ReduceSum { input: VarId, axis: usize },
    ReduceMax { input: VarId, axis: usize, argmax: Vec<u32> },
    SumAll(VarId),
    MeanAll(VarId),
    Softmax { input: VarId, axis: usize },
    CrossEntropy { logits: VarId, labels: Vec<usize>, probs: Vec<f64> },
    Reshape(VarId),
    Gather { input: VarId, axis: usize, indices: Vec<usize> },
    Concat { inputs: Vec<VarId>, axis: usize, sizes: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, shaped like `v`'s value.
    /// `None` if no gradient flowed to `v`.
    pub fn wrt(&self, v: VarId) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) products.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Registers an input tensor. Its `requires_grad` flag decides whether
    /// gradients flow back to it.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        let needs_grad = value.requires_grad();
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Registers a tensor that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar payload of a one-element node.
    pub fn scalar(&self, v: VarId) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> VarId {
        self.nodes.push(Node { value, op, needs_grad });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, v: VarId) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: VarId, b: VarId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, v: VarId, axis: usize) -> Result<()> {
        let rank = self.value(v).rank();
        if axis >= rank {
            return Err(Error::AxisOutOfRange { axis, rank });
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Relu(a), needs)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Sigmoid(a), needs)
    }

    /// Elementwise product with a non-differentiable constant (e.g. a CWA
    /// mask). Gradient flows through `a` only.
    pub fn mul_const(&mut self, a: VarId, constant: &Tensor) -> Result<VarId> {
        if self.shape(a) != constant.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                left: self.shape(a).to_vec(),
                right: constant.shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(constant.data())
            .map(|(x, m)| x * m)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::MulConst(a, constant.data().to_vec()), needs))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, needs))
    }

    /// `(rows, cols) + (cols,)`, the bias repeated over rows.
    pub fn add_row_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: sx.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let bv = self.value(bias).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % cols])
            .collect();
        let value = Tensor::new(vec![rows, cols], data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddRowBias { x, bias, rows, cols }, needs))
    }

    /// `(batch, channels, ...) + (channels,)`, the bias repeated over batch
    /// and spatial positions.
    pub fn add_channel_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias));
        if sx.len() < 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                left: sx.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (batch, channels) = (sx[0], sx[1]);
        let spatial: usize = sx[2..].iter().product();
        let bv = self.value(bias).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[(i / spatial) % channels])
            .collect();
        let value = Tensor::new(sx, data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(
            value,
            Op::AddChannelBias { x, bias, batch, channels, spatial },
            needs,
        ))
    }

    /// Direct 2-D convolution of `(B, Cin, W, H)` with `(Cout, Cin, k, k)`.
    pub fn conv2d(
        &mut self,
        input: VarId,
        kernel: VarId,
        stride: usize,
        padding: usize,
    ) -> Result<VarId> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || sk[2] != sk[3] {
            return Err(Error::ShapeMismatch { op: "conv2d", left: si, right: sk });
        }
        if stride == 0 {
            return Err(Error::ZeroStride);
        }
        if si[1] != sk[1] {
            return Err(Error::ChannelMismatch { input: si[1], kernel: sk[1] });
        }
        let k = sk[2];
        for extent in [si[2], si[3]] {
            if k > extent + 2 * padding {
                return Err(Error::KernelTooLarge { kernel: k, padded: extent + 2 * padding });
            }
        }
        let dims = ConvDims {
            batch: si[0],
            c_in: si[1],
            w: si[2],
            h: si[3],
            c_out: sk[0],
            k,
            stride,
            padding,
        };
        let mut out = vec![0.0; dims.batch * dims.c_out * dims.w_out() * dims.h_out()];
        kernels::conv2d_forward(&dims, self.value(input).data(), self.value(kernel).data(), &mut out);
        let value = Tensor::new(vec![dims.batch, dims.c_out, dims.w_out(), dims.h_out()], out)?;
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(value, Op::Conv2d { input, kernel, dims }, needs))
    }

    /// Batch norm over `(B, C, ...)` using batch statistics. Returns the
    /// normalized output and the per-channel statistics for running updates.
    pub fn batch_norm_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    ) -> Result<(VarId, BatchStats)> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                left: sx,
                right: self.shape(gamma).to_vec(),
            });
        }
        let (batch, channels) = (sx[0], sx[1]);
        let spatial: usize = sx[2..].iter().product();
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                left: self.shape(gamma).to_vec(),
                right: vec![channels],
            });
        }
        let m = (batch * spatial) as f64;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for c in 0..channels {
            let mut acc = 0.0;
            for b in 0..batch {
                let base = (b * channels + c) * spatial;
                for s in 0..spatial {
                    acc += xd[base + s];
                }
            }
            mean[c] = acc / m;
            let mut vacc = 0.0;
            for b in 0..batch {
                let base = (b * channels + c) * spatial;
                for s in 0..spatial {
                    let d = xd[base + s] - mean[c];
                    vacc += d * d;
                }
            }
            var[c] = vacc / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let bta = self.value(beta).data().to_vec();
        let mut x_hat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, &v) in xd.iter().enumerate() {
            let c = (i / spatial) % channels;
            let xh = (v - mean[c]) * inv_std[c];
            x_hat[i] = xh;
            out[i] = g[c] * xh + bta[c];
        }
        let value = Tensor::new(sx, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            value,
            Op::BatchNormTrain { input: x, gamma, beta, x_hat, inv_std, batch, channels, spatial },
            needs,
        );
        Ok((id, BatchStats { mean, var }))
    }

    /// Batch norm using fixed running statistics (inference mode).
    pub fn batch_norm_eval(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<VarId> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                left: sx,
                right: self.shape(gamma).to_vec(),
            });
        }
        let (batch, channels) = (sx[0], sx[1]);
        let spatial: usize = sx[2..].iter().product();
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                left: vec![running_mean.len()],
                right: vec![channels],
            });
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let bta = self.value(beta).data().to_vec();
        let xd = self.value(x).data();
        let mut x_hat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, &v) in xd.iter().enumerate() {
            let c = (i / spatial) % channels;
            let xh = (v - running_mean[c]) * inv_std[c];
            x_hat[i] = xh;
            out[i] = g[c] * xh + bta[c];
        }
        let value = Tensor::new(sx, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::BatchNormEval { input: x, gamma, beta, x_hat, inv_std, batch, channels, spatial },
            needs,
        ))
    }

    pub fn reduce_sum(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, extent, inner) = axis_split(&shape, axis);
        let xd = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(out_shape, out)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::ReduceSum { input: a, axis }, needs))
    }

    pub fn reduce_mean(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        self.check_axis(a, axis)?;
        let extent = self.shape(a)[axis];
        let sum = self.reduce_sum(a, axis)?;
        // Fold the 1/extent into a dedicated op so the value and gradient
        // stay a single multiply away from the sum.
        let data: Vec<f64> = self
            .value(sum)
            .data()
            .iter()
            .map(|v| v / extent as f64)
            .collect();
        let value = Tensor::new(self.shape(sum).to_vec(), data)?;
        let needs = self.needs(sum);
        Ok(self.push(value, Op::Scale(sum, 1.0 / extent as f64), needs))
    }

    /// Max over `axis`. Ties route the gradient to the lowest index.
    pub fn reduce_max(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, extent, inner) = axis_split(&shape, axis);
        let xd = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0u32; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    let v = xd[base + i];
                    let oi = o * inner + i;
                    // Strict comparison keeps the first (lowest) index on ties.
                    if v > out[oi] {
                        out[oi] = v;
                        argmax[oi] = e as u32;
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(out_shape, out)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::ReduceMax { input: a, axis, argmax }, needs))
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let total: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let n = self.value(a).len() as f64;
        let total: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total / n), Op::MeanAll(a), needs)
    }

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, extent, inner) = axis_split(&shape, axis);
        let xd = self.value(a).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |e: usize| (o * extent + e) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for e in 0..extent {
                    m = m.max(xd[idx(e)]);
                }
                let mut denom = 0.0;
                for e in 0..extent {
                    let v = (xd[idx(e)] - m).exp();
                    out[idx(e)] = v;
                    denom += v;
                }
                for e in 0..extent {
                    out[idx(e)] /= denom;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Softmax { input: a, axis }, needs))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, computed with
    /// log-sum-exp. `logits` must be `(batch, classes)`.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: shape,
                right: vec![labels.len(), 0],
            });
        }
        let (batch, classes) = (shape[0], shape[1]);
        if labels.len() != batch {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: shape,
                right: vec![labels.len()],
            });
        }
        for &y in labels {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
        }
        let xd = self.value(logits).data();
        let mut probs = vec![0.0; xd.len()];
        let mut total = 0.0;
        for b in 0..batch {
            let row = &xd[b * classes..(b + 1) * classes];
            let m = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[b * classes + j] = e;
                denom += e;
            }
            for j in 0..classes {
                probs[b * classes + j] /= denom;
            }
            let lse = m + denom.ln();
            total += lse - row[labels[b]];
        }
        let value = Tensor::scalar(total / batch as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            needs,
        ))
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let value = self.value(a).reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// Selects `indices` along `axis`. Indices may repeat.
    pub fn gather(&mut self, a: VarId, axis: usize, indices: &[usize]) -> Result<VarId> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, extent, inner) = axis_split(&shape, axis);
        for &ix in indices {
            if ix >= extent {
                return Err(Error::IndexOutOfRange { index: ix, extent });
            }
        }
        if indices.is_empty() {
            return Err(Error::ZeroExtent { shape: vec![0] });
        }
        let xd = self.value(a).data();
        let mut out = vec![0.0; outer * indices.len() * inner];
        for o in 0..outer {
            for (t, &ix) in indices.iter().enumerate() {
                let src = (o * extent + ix) * inner;
                let dst = (o * indices.len() + t) * inner;
                out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = indices.len();
        let value = Tensor::new(out_shape, out)?;
        let needs = self.needs(a);
        Ok(self.push(
            value,
            Op::Gather { input: a, axis, indices: indices.to_vec() },
            needs,
        ))
    }

    /// Concatenates along `axis`. All other extents must agree.
    pub fn concat(&mut self, inputs: &[VarId], axis: usize) -> Result<VarId> {
        let first = *inputs.first().ok_or(Error::EmptyConcat)?;
        self.check_axis(first, axis)?;
        let base_shape = self.shape(first).to_vec();
        let mut sizes = Vec::with_capacity(inputs.len());
        let mut total = 0usize;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base_shape.len()
                || s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base_shape,
                    right: s.to_vec(),
                });
            }
            sizes.push(s[axis]);
            total += s[axis];
        }
        let mut out_shape = base_shape.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0usize;
        for (&v, &sz) in inputs.iter().zip(&sizes) {
            let xd = self.value(v).data();
            for o in 0..outer {
                let src = o * sz * inner;
                let dst = (o * total + offset) * inner;
                out[dst..dst + sz * inner].copy_from_slice(&xd[src..src + sz * inner]);
            }
            offset += sz;
        }
        let value = Tensor::new(out_shape, out)?;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            value,
            Op::Concat { inputs: inputs.to_vec(), axis, sizes },
            needs,
        ))
    }

    /// Reverse pass from a scalar `root`. Returns gradients for every node
    /// that transitively depends on a `requires_grad` leaf.
    pub fn backward(&self, root: VarId) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot { shape: self.shape(root).to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.needs(root) {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
            // Keep the gradient for the caller.
            grads[idx] = Some(g);
        }
        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient shaped like its node")
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: VarId, contribution: &[f64]) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            None => grads[v.0] = Some(contribution.to_vec()),
        }
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                if self.needs(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                    self.accumulate(grads, *a, &da);
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[idx].value.data())
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
            }
            Op::MulConst(a, mask) => {
                if self.needs(*a) {
                    let da: Vec<f64> = g.iter().zip(mask).map(|(gv, mv)| gv * mv).collect();
                    self.accumulate(grads, *a, &da);
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(g, self.value(*b).data(), *m, *n, *k, &mut da);
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(self.value(*a).data(), g, *k, *m, *n, &mut db);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::AddRowBias { x, bias, rows, cols } => {
                self.accumulate(grads, *x, g);
                if self.needs(*bias) {
                    let mut db = vec![0.0; *cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                    self.accumulate(grads, *bias, &db);
                }
            }
            Op::AddChannelBias { x, bias, batch, channels, spatial } => {
                self.accumulate(grads, *x, g);
                if self.needs(*bias) {
                    let mut db = vec![0.0; *channels];
                    for b in 0..*batch {
                        for c in 0..*channels {
                            let base = (b * channels + c) * spatial;
                            for s in 0..*spatial {
                                db[c] += g[base + s];
                            }
                        }
                    }
                    self.accumulate(grads, *bias, &db);
                }
            }
            Op::Conv2d { input, kernel, dims } => {
                if self.needs(*input) {
                    let mut di = vec![0.0; self.value(*input).len()];
                    kernels::conv2d_backward_input(dims, g, self.value(*kernel).data(), &mut di);
                    self.accumulate(grads, *input, &di);
                }
                if self.needs(*kernel) {
                    let mut dk = vec![0.0; self.value(*kernel).len()];
                    kernels::conv2d_backward_kernel(dims, self.value(*input).data(), g, &mut dk);
                    self.accumulate(grads, *kernel, &dk);
                }
            }
            Op::BatchNormTrain { input, gamma, beta, x_hat, inv_std, batch, channels, spatial } => {
                let gv = self.value(*gamma).data();
                let m = (*batch * *spatial) as f64;
                // Per-channel sums of g and g*x_hat drive all three gradients.
                let mut s1 = vec![0.0; *channels];
                let mut s2 = vec![0.0; *channels];
                for b in 0..*batch {
                    for c in 0..*channels {
                        let base = (b * channels + c) * spatial;
                        for s in 0..*spatial {
                            s1[c] += g[base + s];
                            s2[c] += g[base + s] * x_hat[base + s];
                        }
                    }
                }
                if self.needs(*input) {
                    let mut dx = vec![0.0; g.len()];
                    for (i, dv) in dx.iter_mut().enumerate() {
                        let c = (i / spatial) % channels;
                        *dv = gv[c] * inv_std[c] * (g[i] - s1[c] / m - x_hat[i] * s2[c] / m);
                    }
                    self.accumulate(grads, *input, &dx);
                }
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, &s2);
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, &s1);
                }
            }
            Op::BatchNormEval { input, gamma, beta, x_hat, inv_std, batch, channels, spatial } => {
                let gv = self.value(*gamma).data();
                if self.needs(*input) {
                    let mut dx = vec![0.0; g.len()];
                    for (i, dv) in dx.iter_mut().enumerate() {
                        let c = (i / spatial) % channels;
                        *dv = g[i] * gv[c] * inv_std[c];
                    }
                    self.accumulate(grads, *input, &dx);
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut s1 = vec![0.0; *channels];
                    let mut s2 = vec![0.0; *channels];
                    for b in 0..*batch {
                        for c in 0..*channels {
                            let base = (b * channels + c) * spatial;
                            for s in 0..*spatial {
                                s1[c] += g[base + s];
                                s2[c] += g[base + s] * x_hat[base + s];
                            }
                        }
                    }
                    if self.needs(*gamma) {
                        self.accumulate(grads, *gamma, &s2);
                    }
                    if self.needs(*beta) {
                        self.accumulate(grads, *beta, &s1);
                    }
                }
            }
            Op::ReduceSum { input, axis } => {
                if self.needs(*input) {
                    let shape = self.value(*input).shape();
                    let (outer, extent, inner) = axis_split(shape, *axis);
                    let mut dx = vec![0.0; self.value(*input).len()];
                    for o in 0..outer {
                        for e in 0..extent {
                            let base = (o * extent + e) * inner;
                            for i in 0..inner {
                                dx[base + i] = g[o * inner + i];
                            }
                        }
                    }
                    self.accumulate(grads, *input, &dx);
                }
            }
            Op::ReduceMax { input, axis, argmax } => {
                if self.needs(*input) {
                    let shape = self.value(*input).shape();
                    let (outer, extent, inner) = axis_split(shape, *axis);
                    let mut dx = vec![0.0; self.value(*input).len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let oi = o * inner + i;
                            let e = argmax[oi] as usize;
                            dx[(o * extent + e) * inner + i] += g[oi];
                        }
                    }
                    self.accumulate(grads, *input, &dx);
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let dx = vec![g[0]; self.value(*a).len()];
                    self.accumulate(grads, *a, &dx);
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let n = self.value(*a).len();
                    let dx = vec![g[0] / n as f64; n];
                    self.accumulate(grads, *a, &dx);
                }
            }
            Op::Softmax { input, axis } => {
                if self.needs(*input) {
                    let y = self.nodes[idx].value.data();
                    let shape = self.nodes[idx].value.shape();
                    let (outer, extent, inner) = axis_split(shape, *axis);
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |e: usize| (o * extent + e) * inner + i;
                            let mut dot = 0.0;
                            for e in 0..extent {
                                dot += g[at(e)] * y[at(e)];
                            }
                            for e in 0..extent {
                                dx[at(e)] = y[at(e)] * (g[at(e)] - dot);
                            }
                        }
                    }
                    self.accumulate(grads, *input, &dx);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.needs(*logits) {
                    let batch = labels.len();
                    let classes = probs.len() / batch;
                    let scale = g[0] / batch as f64;
                    let mut dx = vec![0.0; probs.len()];
                    for b in 0..batch {
                        for j in 0..classes {
                            let mut v = probs[b * classes + j];
                            if j == labels[b] {
                                v -= 1.0;
                            }
                            dx[b * classes + j] = v * scale;
                        }
                    }
                    self.accumulate(grads, *logits, &dx);
                }
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g);
            }
            Op::Gather { input, axis, indices } => {
                if self.needs(*input) {
                    let shape = self.value(*input).shape();
                    let (outer, extent, inner) = axis_split(shape, *axis);
                    let mut dx = vec![0.0; self.value(*input).len()];
                    for o in 0..outer {
                        for (t, &ix) in indices.iter().enumerate() {
                            let src = (o * indices.len() + t) * inner;
                            let dst = (o * extent + ix) * inner;
                            for i in 0..inner {
                                dx[dst + i] += g[src + i];
                            }
                        }
                    }
                    self.accumulate(grads, *input, &dx);
                }
            }
            Op::Concat { inputs, axis, sizes } => {
                let out_shape = self.nodes[idx].value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0usize;
                for (&v, &sz) in inputs.iter().zip(sizes) {
                    if self.needs(v) {
                        let mut dv = vec![0.0; self.value(v).len()];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * sz * inner;
                            dv[dst..dst + sz * inner]
                                .copy_from_slice(&g[src..src + sz * inner]);
                        }
                        self.accumulate(grads, v, &dv);
                    }
                    offset += sz;
                }
            }
        }
    }
}
