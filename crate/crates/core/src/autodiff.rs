//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever its
//! backward rule needs. Nodes are appended in evaluation order, so walking the
//! tape backwards from the loss visits each node once, after all of its
//! consumers.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::conv::{self, ConvGeometry};
use crate::error::TensorError;
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Whether normalization uses batch statistics (and updates running ones)
/// or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Running per-channel statistics for [`Tape::channel_norm`].
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> NormStats<T> {
    /// Fresh statistics: mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        NormStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    pub fn cast<U: Scalar>(&self) -> NormStats<U> {
        NormStats {
            mean: self.mean.iter().map(|v| U::of(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormOptions<T> {
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> Default for NormOptions<T> {
    fn default() -> Self {
        NormOptions { momentum: T::of(0.1), eps: T::of(1e-5) }
    }
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geometry: ConvGeometry },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Upsample2 { input: Var },
    ChannelNorm { input: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu { input: Var },
    Sigmoid { input: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: T },
    Sum { input: Var },
    ConcatChannels { a: Var, b: Var },
    ChannelAffine { input: Var, gamma: Var, beta: Var },
    Linear { input: Var, weight: Var, bias: Var },
    SoftDice { pred: Var, target: Vec<T>, eps: T },
    Pointwise { input: Var, derivative: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// An append-only record of operations over tensors of one precision.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Gradients are reported for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_unchecked(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.node(var).value
    }

    pub fn owns(&self, var: Var) -> bool {
        var.tape == self.id && var.index < self.nodes.len()
    }

    fn node(&self, var: Var) -> &Node<T> {
        assert!(self.owns(var), "variable {var:?} does not belong to this tape");
        &self.nodes[var.index]
    }

    fn needs(&self, var: Var) -> bool {
        self.node(var).requires_grad
    }

    fn push_unchecked(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var, TensorError> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push_unchecked(value, requires_grad, op))
    }

    /// Cross-correlation with zero padding: `[N,Cin,H,W] * [Cout,Cin,kh,kw] + bias[Cout]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        let [n, cin, h, w] = self.value(input).dims4(OP)?;
        let [cout, kcin, kh, kw] = self.value(kernel).dims4(OP)?;
        if kcin != cin {
            return Err(TensorError::dim(OP, format!("kernel expects {kcin} input channels, input has {cin}")));
        }
        if self.value(bias).shape() != [cout] {
            return Err(TensorError::dim(
                OP,
                format!("bias shape {:?} does not match {cout} output channels", self.value(bias).shape()),
            ));
        }
        if stride == 0 {
            return Err(TensorError::config(OP, "stride must be positive"));
        }
        let out_extent = |size: usize, k: usize| -> Result<usize, TensorError> {
            let span = (size + 2 * padding).checked_sub(k).ok_or_else(|| {
                TensorError::config(OP, format!("kernel {k} larger than padded extent {}", size + 2 * padding))
            })?;
            if span % stride != 0 {
                return Err(TensorError::config(
                    OP,
                    format!("({size} + 2*{padding} - {k}) is not divisible by stride {stride}"),
                ));
            }
            Ok(span / stride + 1)
        };
        let geometry = ConvGeometry {
            batch: n,
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: out_extent(h, kh)?,
            out_w: out_extent(w, kw)?,
        };
        let data = conv::conv2d_forward(
            &geometry,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(&[n, cout, geometry.out_h, geometry.out_w], data)?;
        self.push(OP, value, &[input, kernel, bias], Op::Conv2d { input, kernel, bias, geometry })
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var, TensorError> {
        const OP: &str = "maxpool2";
        let dims @ [n, c, h, w] = self.value(input).dims4(OP)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::config(OP, format!("spatial extent {h}x{w} must be even")));
        }
        let (data, argmax) = conv::maxpool2_forward(dims, self.value(input).data());
        let value = Tensor::new(&[n, c, h / 2, w / 2], data)?;
        self.push(OP, value, &[input], Op::MaxPool2 { input, argmax })
    }

    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var, TensorError> {
        const OP: &str = "upsample_nearest2";
        let dims @ [n, c, h, w] = self.value(input).dims4(OP)?;
        let value = Tensor::new(&[n, c, 2 * h, 2 * w], conv::upsample2_forward(dims, self.value(input).data()))?;
        self.push(OP, value, &[input], Op::Upsample2 { input })
    }

    /// Per-channel normalization without a learned affine.
    ///
    /// In [`Mode::Train`] batch statistics over `(N, H, W)` are used and the
    /// running statistics are updated; in [`Mode::Infer`] the running
    /// statistics are used as given.
    pub fn channel_norm(
        &mut self,
        input: Var,
        stats: &mut NormStats<T>,
        mode: Mode,
        options: NormOptions<T>,
    ) -> Result<Var, TensorError> {
        const OP: &str = "channel_norm";
        let [n, c, h, w] = self.value(input).dims4(OP)?;
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(TensorError::dim(OP, format!("statistics hold {} channels, input has {c}", stats.mean.len())));
        }
        let plane = h * w;
        let count = n * plane;
        if mode == Mode::Train && count < 2 {
            return Err(TensorError::config(OP, "train mode needs at least two values per channel"));
        }
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        let values = |ch: usize| (0..n).flat_map(move |b| x[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied());
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let count_t = T::of(count as f64);
                    let mean = values(ch).sum::<T>() / count_t;
                    let var = values(ch).map(|v| (v - mean) * (v - mean)).sum::<T>() / count_t;
                    let unbiased = var * count_t / T::of((count - 1) as f64);
                    stats.mean[ch] = (T::one() - options.momentum) * stats.mean[ch] + options.momentum * mean;
                    stats.var[ch] = (T::one() - options.momentum) * stats.var[ch] + options.momentum * unbiased;
                    (mean, var)
                }
                Mode::Infer => (stats.mean[ch], stats.var[ch]),
            };
            let inv = T::one() / (var + options.eps).sqrt();
            inv_std[ch] = inv;
            for b in 0..n {
                let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for (o, &v) in out[range.clone()].iter_mut().zip(&x[range]) {
                    *o = (v - mean) * inv;
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let xhat = value.data().to_vec();
        self.push(OP, value, &[input], Op::ChannelNorm { input, xhat, inv_std, batch_stats: mode == Mode::Train })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var, TensorError> {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, &[input], Op::Relu { input })
    }

    /// Logistic sigmoid, clamped to `[eps, 1 - eps]` so outputs stay strictly inside (0, 1).
    pub fn sigmoid(&mut self, input: Var) -> Result<Var, TensorError> {
        let lo = T::epsilon();
        let hi = T::one() - T::epsilon();
        let value = self.value(input).map(|v| {
            let s = if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            };
            s.max(lo).min(hi)
        });
        self.push("sigmoid", value, &[input], Op::Sigmoid { input })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::dim(op, format!("shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        self.push("add", value, &[a, b], Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        self.push("mul", value, &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var, TensorError> {
        let value = self.value(input).map(|v| v * factor);
        self.push("scale", value, &[input], Op::Scale { input, factor })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var, TensorError> {
        let value = Tensor::scalar(self.value(input).data().iter().copied().sum());
        self.push("sum", value, &[input], Op::Sum { input })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        const OP: &str = "concat_channels";
        let [n, ca, h, w] = self.value(a).dims4(OP)?;
        let [nb, cb, hb, wb] = self.value(b).dims4(OP)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(TensorError::dim(
                OP,
                format!("cannot join [{n},{ca},{h},{w}] with [{nb},{cb},{hb},{wb}]"),
            ));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(xa.len() + xb.len());
        for i in 0..n {
            data.extend_from_slice(&xa[i * sa..(i + 1) * sa]);
            data.extend_from_slice(&xb[i * sb..(i + 1) * sb]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], data)?;
        self.push(OP, value, &[a, b], Op::ConcatChannels { a, b })
    }

    /// `y[n,c,i,j] = gamma[c] * x[n,c,i,j] + beta[c]`.
    ///
    /// `gamma` and `beta` are either shared per channel (`[C]`) or given per
    /// sample (`[N, C]`).
    pub fn channel_affine(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        const OP: &str = "channel_affine";
        let [n, c, h, w] = self.value(input).dims4(OP)?;
        let gshape = self.value(gamma).shape().to_vec();
        if gshape != [c] && gshape != [n, c] {
            return Err(TensorError::dim(OP, format!("gamma shape {gshape:?} fits neither [{c}] nor [{n},{c}]")));
        }
        if self.value(beta).shape() != gshape.as_slice() {
            return Err(TensorError::dim(
                OP,
                format!("beta shape {:?} differs from gamma shape {gshape:?}", self.value(beta).shape()),
            ));
        }
        let per_sample = gshape.len() == 2;
        let (x, g, b) = (self.value(input).data(), self.value(gamma).data(), self.value(beta).data());
        let plane = h * w;
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let k = if per_sample { s * c + ch } else { ch };
                let range = (s * c + ch) * plane..(s * c + ch + 1) * plane;
                for (o, &v) in out[range.clone()].iter_mut().zip(&x[range]) {
                    *o = g[k] * v + b[k];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        self.push(OP, value, &[input, gamma, beta], Op::ChannelAffine { input, gamma, beta })
    }

    /// Dense layer: `[N, in] x [out, in]^T + bias[out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        const OP: &str = "linear";
        let (xs, ws, bs) = (self.value(input).shape(), self.value(weight).shape(), self.value(bias).shape());
        let (n, fan_in, fan_out) = match (xs, ws) {
            (&[n, i], &[o, wi]) if i == wi => (n, i, o),
            _ => return Err(TensorError::dim(OP, format!("input {xs:?} incompatible with weight {ws:?}"))),
        };
        if bs != [fan_out] {
            return Err(TensorError::dim(OP, format!("bias shape {bs:?} does not match {fan_out} outputs")));
        }
        let mut out = Vec::with_capacity(n * fan_out);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        gemm(
            T::one(),
            MatRef::rows(self.value(input).data(), n, fan_in),
            MatRef::transposed(self.value(weight).data(), fan_out, fan_in),
            T::one(),
            &mut out,
        );
        let value = Tensor::new(&[n, fan_out], out)?;
        self.push(OP, value, &[input, weight, bias], Op::Linear { input, weight, bias })
    }

    /// Soft Dice loss `1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)`
    /// over every element of `pred` against a constant `target`.
    pub fn soft_dice_loss(&mut self, pred: Var, target: &Tensor<T>, eps: T) -> Result<Var, TensorError> {
        const OP: &str = "soft_dice_loss";
        if self.value(pred).shape() != target.shape() {
            return Err(TensorError::dim(
                OP,
                format!("prediction {:?} vs target {:?}", self.value(pred).shape(), target.shape()),
            ));
        }
        let (inter, denom) = dice_terms(self.value(pred).data(), target.data());
        let loss = T::one() - (T::of(2.0) * inter + eps) / (denom + eps);
        let target = target.data().to_vec();
        self.push(OP, Tensor::scalar(loss), &[pred], Op::SoftDice { pred, target, eps })
    }

    /// Applies `f` elementwise with a caller-supplied derivative `df`.
    pub fn pointwise(&mut self, input: Var, f: impl Fn(T) -> T, df: impl Fn(T) -> T) -> Result<Var, TensorError> {
        let x = self.value(input);
        let value = x.map(&f);
        let derivative = x.data().iter().map(|&v| df(v)).collect();
        self.push("pointwise", value, &[input], Op::Pointwise { input, derivative })
    }

    /// Reverse sweep from a scalar `loss`, seeded with gradient one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if !self.owns(loss) {
            return Err(TensorError::Usage("loss variable was not recorded on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::Usage(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.needs(loss) {
            grads[loss.index] = Some(vec![T::one()]);
        }
        for index in (0..=loss.index).rev() {
            let node = &self.nodes[index];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[index].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(g.unwrap_or_else(|| vec![T::zero(); node.value.len()])),
                _ => None,
            })
            .collect();
        Ok(Gradients { tape: self.id, grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], var: Var, contribution: impl FnOnce(&mut [T])) {
        if !self.needs(var) {
            return;
        }
        let slot = grads[var.index].get_or_insert_with(|| vec![T::zero(); self.nodes[var.index].value.len()]);
        contribution(slot);
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geometry } => {
                let want = [self.needs(*input), self.needs(*kernel), self.needs(*bias)];
                let d = conv::conv2d_backward(geometry, self.value(*input).data(), self.value(*kernel).data(), g, want);
                for (var, part) in [(*input, d.input), (*kernel, d.kernel), (*bias, d.bias)] {
                    if let Some(part) = part {
                        self.accumulate(grads, var, |acc| add_into(acc, &part));
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => self.accumulate(grads, *input, |acc| {
                for (&idx, &gv) in argmax.iter().zip(g) {
                    acc[idx] += gv;
                }
            }),
            Op::Upsample2 { input } => {
                let dims = self.value(*input).dims4("upsample_nearest2").expect("recorded rank-4");
                let part = conv::upsample2_backward(dims, g);
                self.accumulate(grads, *input, |acc| add_into(acc, &part));
            }
            Op::ChannelNorm { input, xhat, inv_std, batch_stats } => {
                let [n, c, h, w] = self.value(*input).dims4("channel_norm").expect("recorded rank-4");
                let plane = h * w;
                let count = T::of((n * plane) as f64);
                self.accumulate(grads, *input, |acc| {
                    for ch in 0..c {
                        let ranges = (0..n).map(|b| (b * c + ch) * plane..(b * c + ch + 1) * plane);
                        if !batch_stats {
                            for r in ranges {
                                for i in r {
                                    acc[i] += g[i] * inv_std[ch];
                                }
                            }
                            continue;
                        }
                        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
                        for r in ranges.clone() {
                            for i in r {
                                sum_g += g[i];
                                sum_gx += g[i] * xhat[i];
                            }
                        }
                        let (mean_g, mean_gx) = (sum_g / count, sum_gx / count);
                        for r in ranges {
                            for i in r {
                                acc[i] += inv_std[ch] * (g[i] - mean_g - xhat[i] * mean_gx);
                            }
                        }
                    }
                });
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                self.accumulate(grads, *input, |acc| {
                    for i in 0..acc.len() {
                        if x[i] > T::zero() {
                            acc[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid { input } => {
                let s = node.value.data();
                self.accumulate(grads, *input, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * s[i] * (T::one() - s[i]);
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |acc| add_into(acc, g));
                self.accumulate(grads, *b, |acc| add_into(acc, g));
            }
            Op::Mul { a, b } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * xb[i];
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * xa[i];
                    }
                });
            }
            Op::Scale { input, factor } => self.accumulate(grads, *input, |acc| {
                for (a, &gv) in acc.iter_mut().zip(g) {
                    *a += gv * *factor;
                }
            }),
            Op::Sum { input } => self.accumulate(grads, *input, |acc| {
                for a in acc.iter_mut() {
                    *a += g[0];
                }
            }),
            Op::ConcatChannels { a, b } => {
                let [n, ca, h, w] = self.value(*a).dims4("concat_channels").expect("recorded rank-4");
                let cb = self.value(*b).shape()[1];
                let (sa, sb) = (ca * h * w, cb * h * w);
                self.accumulate(grads, *a, |acc| {
                    for i in 0..n {
                        add_into(&mut acc[i * sa..(i + 1) * sa], &g[i * (sa + sb)..i * (sa + sb) + sa]);
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for i in 0..n {
                        add_into(&mut acc[i * sb..(i + 1) * sb], &g[i * (sa + sb) + sa..(i + 1) * (sa + sb)]);
                    }
                });
            }
            Op::ChannelAffine { input, gamma, beta } => {
                let [n, c, h, w] = self.value(*input).dims4("channel_affine").expect("recorded rank-4");
                let per_sample = self.value(*gamma).rank() == 2;
                let (x, gm) = (self.value(*input).data(), self.value(*gamma).data());
                let plane = h * w;
                let param_index = |s: usize, ch: usize| if per_sample { s * c + ch } else { ch };
                self.accumulate(grads, *input, |acc| {
                    for s in 0..n {
                        for ch in 0..c {
                            let k = param_index(s, ch);
                            for i in (s * c + ch) * plane..(s * c + ch + 1) * plane {
                                acc[i] += g[i] * gm[k];
                            }
                        }
                    }
                });
                self.accumulate(grads, *gamma, |acc| {
                    for s in 0..n {
                        for ch in 0..c {
                            let r = (s * c + ch) * plane..(s * c + ch + 1) * plane;
                            acc[param_index(s, ch)] += g[r.clone()].iter().zip(&x[r]).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                });
                self.accumulate(grads, *beta, |acc| {
                    for s in 0..n {
                        for ch in 0..c {
                            let r = (s * c + ch) * plane..(s * c + ch + 1) * plane;
                            acc[param_index(s, ch)] += g[r].iter().copied().sum::<T>();
                        }
                    }
                });
            }
            Op::Linear { input, weight, bias } => {
                let (n, fan_in) = (self.value(*input).shape()[0], self.value(*input).shape()[1]);
                let fan_out = self.value(*weight).shape()[0];
                let (x, wt) = (self.value(*input).data(), self.value(*weight).data());
                self.accumulate(grads, *input, |acc| {
                    gemm(T::one(), MatRef::rows(g, n, fan_out), MatRef::rows(wt, fan_out, fan_in), T::one(), acc);
                });
                self.accumulate(grads, *weight, |acc| {
                    gemm(T::one(), MatRef::transposed(g, n, fan_out), MatRef::rows(x, n, fan_in), T::one(), acc);
                });
                self.accumulate(grads, *bias, |acc| {
                    for row in g.chunks(fan_out) {
                        add_into(acc, row);
                    }
                });
            }
            Op::SoftDice { pred, target, eps } => {
                let p = self.value(*pred).data();
                let (inter, denom) = dice_terms(p, target);
                let two = T::of(2.0);
                let d = denom + *eps;
                let num = two * inter + *eps;
                self.accumulate(grads, *pred, |acc| {
                    for i in 0..acc.len() {
                        let dp = -(two * target[i] * d - num * two * p[i]) / (d * d);
                        acc[i] += g[0] * dp;
                    }
                });
            }
            Op::Pointwise { input, derivative } => self.accumulate(grads, *input, |acc| {
                for i in 0..acc.len() {
                    acc[i] += g[i] * derivative[i];
                }
            }),
        }
    }
}

fn add_into<T: Scalar>(acc: &mut [T], part: &[T]) {
    for (a, &p) in acc.iter_mut().zip(part) {
        *a += p;
    }
}

/// `(sum(p g), sum(p^2) + sum(g^2))`
fn dice_terms<T: Scalar>(p: &[T], g: &[T]) -> (T, T) {
    let mut inter = T::zero();
    let mut denom = T::zero();
    for (&a, &b) in p.iter().zip(g) {
        inter += a * b;
        denom += a * a + b * b;
    }
    (inter, denom)
}

/// Gradients of a loss with respect to every `requires_grad` leaf.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index)?.as_deref()
    }

    pub fn tensor(&self, var: Var) -> Option<Tensor<T>> {
        let data = self.get(var)?.to_vec();
        Some(Tensor::new(&self.shapes[var.index], data).expect("gradient mirrors value shape"))
    }
}
