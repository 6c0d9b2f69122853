//! Differentiable primitives: forward evaluation and vector-Jacobian products.

use rand_distr::{Distribution, StandardNormal};

use crate::conv::{conv_output_size, conv_transpose_output_size, col2im, im2col, ColGeometry, ConvOptions};
use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Square,
    Sqrt,
    Log,
    Exp,
    Abs,
    Sigmoid,
    Recip,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Log => "log",
            Unary::Exp => "exp",
            Unary::Abs => "abs",
            Unary::Sigmoid => "sigmoid",
            Unary::Recip => "recip",
        }
    }

    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Log => x.ln(),
            Unary::Exp => x.exp(),
            Unary::Abs => x.abs(),
            Unary::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Unary::Recip => T::one() / x,
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        let two = T::one() + T::one();
        match self {
            Unary::Square => two * x,
            Unary::Sqrt => {
                if y > T::zero() {
                    T::one() / (two * y)
                } else {
                    T::zero()
                }
            }
            Unary::Log => T::one() / x,
            Unary::Exp => y,
            Unary::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Recip => -y * y,
        }
    }
}

/// Inference-time statistics for [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

/// Per-channel statistics observed by a training-mode batch norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStatistics<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    /// Number of values reduced per channel.
    pub count: usize,
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(T),
    AddScalar(T),
    Unary(Unary),
    MatMul,
    Conv2d(ColGeometry),
    ConvTranspose2d(ColGeometry),
    ChannelBias,
    PRelu,
    BatchNorm {
        train: bool,
        stats: BatchStatistics<T>,
        inv_std: Vec<T>,
    },
    Sum,
    Mean,
    MeanRows,
    Reshape,
    L2NormRows,
    MulRows,
    WindowFilter(Vec<T>),
    GaussianSample(Vec<T>),
}

impl<T: Scalar> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Unary(u) => u.name(),
            Op::MatMul => "matmul",
            Op::Conv2d(_) => "conv2d",
            Op::ConvTranspose2d(_) => "conv_transpose2d",
            Op::ChannelBias => "channel_bias",
            Op::PRelu => "prelu",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MeanRows => "mean_rows",
            Op::Reshape => "reshape",
            Op::L2NormRows => "l2_norm",
            Op::MulRows => "mul_rows",
            Op::WindowFilter(_) => "window_filter",
            Op::GaussianSample(_) => "gaussian_sample",
        }
    }
}

/// Splits `[B, C, rest..]` into `(B, C, prod(rest))`.
fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    (shape.len() >= 2).then(|| (shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Scalar> Graph<T> {
    fn mismatch(&self, op: &str, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            node: self.next_name(op),
            detail,
        }
    }

    fn invalid(&self, op: &str, detail: String) -> AutodiffError {
        AutodiffError::InvalidArgument {
            node: self.next_name(op),
            detail,
        }
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(
                op,
                format!(
                    "{} has shape {:?}, {} has shape {:?}",
                    self.describe(a),
                    self.shape(a),
                    self.describe(b),
                    self.shape(b)
                ),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, op: Op<T>, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<NodeId> {
        self.same_shape(op.name(), a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(op, vec![a, b], value)
    }

    fn map(&mut self, op: Op<T>, x: NodeId, f: impl Fn(T) -> T) -> Result<NodeId> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(op, vec![x], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        self.map(Op::Scale(factor), x, |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: NodeId, offset: T) -> Result<NodeId> {
        self.map(Op::AddScalar(offset), x, |v| v + offset)
    }

    fn unary(&mut self, kind: Unary, x: NodeId) -> Result<NodeId> {
        self.map(Op::Unary(kind), x, |v| kind.apply(v))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Square, x)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(self.invalid("sqrt", "negative operand".into()));
        }
        self.unary(Unary::Sqrt, x)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Log, x)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Exp, x)
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Abs, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn recip(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Recip, x)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        self.push(Op::MatMul, vec![a, b], Tensor::from_parts(vec![m, n], out))
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `w: [O, C, kh, kw]`, zero padded.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, opts: ConvOptions) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(self.mismatch(
                "conv2d",
                format!("input {sx:?} incompatible with kernel {sw:?} (expected [B,C,H,W] and [O,C,kh,kw])"),
            ));
        }
        let (oh, ow) = match (
            conv_output_size(sx[2], sw[2], opts.stride, opts.padding),
            conv_output_size(sx[3], sw[3], opts.stride, opts.padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(self.mismatch(
                    "conv2d",
                    format!("kernel {sw:?} with {opts:?} does not fit input {sx:?}"),
                ))
            }
        };
        let geom = ColGeometry {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride: opts.stride,
            padding: opts.padding,
            out_h: oh,
            out_w: ow,
        };
        let (batch, out_c) = (sx[0], sw[0]);
        let mut out = vec![T::zero(); batch * out_c * geom.cols()];
        let mut col = vec![T::zero(); geom.rows() * geom.cols()];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        for b in 0..batch {
            im2col(&xv[b * geom.image_len()..(b + 1) * geom.image_len()], &geom, &mut col);
            let dst = &mut out[b * out_c * geom.cols()..(b + 1) * out_c * geom.cols()];
            T::gemm(out_c, geom.rows(), geom.cols(), T::one(), wv, false, &col, false, T::zero(), dst);
        }
        let value = Tensor::from_parts(vec![batch, out_c, oh, ow], out);
        self.push(Op::Conv2d(geom), vec![x, w], value)
    }

    /// Transposed convolution of `x: [B, Cin, H, W]` with `w: [Cin, Cout, kh, kw]`.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, opts: ConvOptions) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(self.mismatch(
                "conv_transpose2d",
                format!("input {sx:?} incompatible with kernel {sw:?} (expected [B,Cin,H,W] and [Cin,Cout,kh,kw])"),
            ));
        }
        if opts.output_padding >= opts.stride.max(1) && opts.output_padding > 0 {
            return Err(self.invalid(
                "conv_transpose2d",
                format!("output padding {} must be smaller than stride {}", opts.output_padding, opts.stride),
            ));
        }
        let (oh, ow) = match (
            conv_transpose_output_size(sx[2], sw[2], opts.stride, opts.padding, opts.output_padding),
            conv_transpose_output_size(sx[3], sw[3], opts.stride, opts.padding, opts.output_padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(self.mismatch(
                    "conv_transpose2d",
                    format!("kernel {sw:?} with {opts:?} gives an empty output for input {sx:?}"),
                ))
            }
        };
        // the adjoint convolution maps the output grid back onto the input grid
        let geom = ColGeometry {
            channels: sw[1],
            height: oh,
            width: ow,
            kh: sw[2],
            kw: sw[3],
            stride: opts.stride,
            padding: opts.padding,
            out_h: sx[2],
            out_w: sx[3],
        };
        if conv_output_size(oh, sw[2], opts.stride, opts.padding) != Some(sx[2])
            || conv_output_size(ow, sw[3], opts.stride, opts.padding) != Some(sx[3])
        {
            return Err(self.invalid("conv_transpose2d", format!("inconsistent geometry {opts:?}")));
        }
        let (batch, in_c) = (sx[0], sx[1]);
        let in_len = in_c * geom.cols();
        let mut out = vec![T::zero(); batch * geom.image_len()];
        let mut col = vec![T::zero(); geom.rows() * geom.cols()];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        for b in 0..batch {
            T::gemm(geom.rows(), in_c, geom.cols(), T::one(), wv, true, &xv[b * in_len..(b + 1) * in_len], false, T::zero(), &mut col);
            col2im(&col, &geom, &mut out[b * geom.image_len()..(b + 1) * geom.image_len()]);
        }
        let value = Tensor::from_parts(vec![batch, sw[1], oh, ow], out);
        self.push(Op::ConvTranspose2d(geom), vec![x, w], value)
    }

    /// Adds `bias[c]` to every element of channel `c` of `x: [B, C, ..]`.
    pub fn channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let Some((batch, channels, inner)) = channel_layout(self.shape(x)) else {
            return Err(self.mismatch("channel_bias", format!("input {:?} has no channel axis", self.shape(x))));
        };
        if self.shape(bias) != [channels] {
            return Err(self.mismatch(
                "channel_bias",
                format!("bias {:?} does not match {channels} channels", self.shape(bias)),
            ));
        }
        let (xv, bv) = (self.value(x).data(), self.value(bias).data());
        let mut out = xv.to_vec();
        for b in 0..batch {
            for c in 0..channels {
                let start = (b * channels + c) * inner;
                out[start..start + inner].iter_mut().for_each(|v| *v = *v + bv[c]);
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push(Op::ChannelBias, vec![x, bias], value)
    }

    /// Parametric ReLU with one learnable slope per channel of `x: [B, C, ..]`.
    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> Result<NodeId> {
        let Some((batch, channels, inner)) = channel_layout(self.shape(x)) else {
            return Err(self.mismatch("prelu", format!("input {:?} has no channel axis", self.shape(x))));
        };
        if self.shape(slope) != [channels] {
            return Err(self.mismatch(
                "prelu",
                format!("slope {:?} does not match {channels} channels", self.shape(slope)),
            ));
        }
        let (xv, av) = (self.value(x).data(), self.value(slope).data());
        let mut out = xv.to_vec();
        for b in 0..batch {
            for c in 0..channels {
                let start = (b * channels + c) * inner;
                for v in &mut out[start..start + inner] {
                    if *v <= T::zero() {
                        *v = *v * av[c];
                    }
                }
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push(Op::PRelu, vec![x, slope], value)
    }

    /// Per-channel batch normalization of `x: [B, C, ..]` with affine `gamma`, `beta`.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BatchNormMode<'_, T>,
        eps: T,
    ) -> Result<NodeId> {
        let Some((batch, channels, inner)) = channel_layout(self.shape(x)) else {
            return Err(self.mismatch("batch_norm", format!("input {:?} has no channel axis", self.shape(x))));
        };
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(self.mismatch(
                "batch_norm",
                format!(
                    "affine parameters {:?}/{:?} do not match {channels} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.value(x).data();
        let count = batch * inner;
        let (train, mean, var) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                let n = T::from_usize(count).unwrap();
                for c in 0..channels {
                    let mut s = T::zero();
                    for b in 0..batch {
                        let start = (b * channels + c) * inner;
                        s = s + xv[start..start + inner].iter().copied().sum::<T>();
                    }
                    let m = s / n;
                    let mut sq = T::zero();
                    for b in 0..batch {
                        let start = (b * channels + c) * inner;
                        sq = sq + xv[start..start + inner].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                    }
                    mean[c] = m;
                    var[c] = sq / n;
                }
                (true, mean, var)
            }
            BatchNormMode::Eval { running_mean, running_var } => {
                if running_mean.len() != channels || running_var.len() != channels {
                    return Err(self.mismatch(
                        "batch_norm",
                        format!("running statistics do not match {channels} channels"),
                    ));
                }
                (false, running_mean.to_vec(), running_var.to_vec())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for c in 0..channels {
                let start = (b * channels + c) * inner;
                let (scale, shift) = (gv[c] * inv_std[c], bv[c] - gv[c] * inv_std[c] * mean[c]);
                for (o, &v) in out[start..start + inner].iter_mut().zip(&xv[start..start + inner]) {
                    *o = v * scale + shift;
                }
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        let op = Op::BatchNorm {
            train,
            stats: BatchStatistics { mean, var, count },
            inv_std,
        };
        self.push(op, vec![x, gamma, beta], value)
    }

    /// Batch statistics recorded by a training-mode batch norm node.
    pub fn batch_statistics(&self, id: NodeId) -> Option<&BatchStatistics<T>> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { train: true, stats, .. } => Some(stats),
            _ => None,
        }
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap();
        self.push(Op::Mean, vec![x], Tensor::scalar(s))
    }

    /// Mean over every axis but the first: `[B, ..] -> [B]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, width) = self.rows_of(x);
        let n = T::from_usize(width).unwrap();
        let out = self
            .value(x)
            .data()
            .chunks(width)
            .map(|r| r.iter().copied().sum::<T>() / n)
            .collect();
        self.push(Op::MeanRows, vec![x], Tensor::from_parts(vec![rows], out))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.iter().any(|&d| d == 0) {
            return Err(self.mismatch("reshape", format!("cannot reshape {:?} into {shape:?}", self.shape(x))));
        }
        let value = Tensor::from_parts(shape.to_vec(), self.value(x).data().to_vec());
        self.push(Op::Reshape, vec![x], value)
    }

    fn rows_of(&self, x: NodeId) -> (usize, usize) {
        let shape = self.shape(x);
        let rows = shape.first().copied().unwrap_or(1);
        (rows, self.value(x).numel() / rows.max(1))
    }

    /// Euclidean norm of each leading-axis slice: `[B, ..] -> [B]`.
    pub fn l2_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, width) = self.rows_of(x);
        let out = self
            .value(x)
            .data()
            .chunks(width)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        self.push(Op::L2NormRows, vec![x], Tensor::from_parts(vec![rows], out))
    }

    /// Multiplies each leading-axis slice of `x: [B, ..]` by `s[b]`.
    pub fn mul_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (rows, width) = self.rows_of(x);
        if self.shape(s) != [rows] {
            return Err(self.mismatch(
                "mul_rows",
                format!("scale {:?} does not match {rows} rows of {:?}", self.shape(s), self.shape(x)),
            ));
        }
        let sv = self.value(s).data();
        let out = self
            .value(x)
            .data()
            .chunks(width)
            .zip(sv)
            .flat_map(|(r, &k)| r.iter().map(move |&v| v * k))
            .collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push(Op::MulRows, vec![x, s], value)
    }

    /// Valid-mode depthwise filtering of `x: [B, C, H, W]` with the separable
    /// window `taps ⊗ taps`. Produces local (weighted) means.
    pub fn window_filter(&mut self, x: NodeId, taps: &[T]) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let k = taps.len();
        if shape.len() != 4 {
            return Err(self.mismatch("window_filter", format!("expected [B,C,H,W], got {shape:?}")));
        }
        if k == 0 || k > shape[2] || k > shape[3] {
            return Err(self.invalid(
                "window_filter",
                format!("window of {k} taps does not fit a {}x{} image; use a smaller window", shape[2], shape[3]),
            ));
        }
        let (h, w) = (shape[2], shape[3]);
        let (oh, ow) = (h - k + 1, w - k + 1);
        let planes = shape[0] * shape[1];
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); planes * oh * ow];
        let mut tmp = vec![T::zero(); h * ow];
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for i in 0..h {
                for j in 0..ow {
                    tmp[i * ow + j] = (0..k).map(|b| taps[b] * src[i * w + j + b]).sum();
                }
            }
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    dst[i * ow + j] = (0..k).map(|a| taps[a] * tmp[(i + a) * ow + j]).sum();
                }
            }
        }
        let value = Tensor::from_parts(vec![shape[0], shape[1], oh, ow], out);
        self.push(Op::WindowFilter(taps.to_vec()), vec![x], value)
    }

    /// Reparameterized draw `mu + exp(log_var / 2) * eps`, `eps ~ N(0, I)`
    /// from the graph's generator. The gradient reaches `mu` and `log_var`.
    pub fn gaussian_sample(&mut self, mu: NodeId, log_var: NodeId) -> Result<NodeId> {
        let n = self.value(mu).numel();
        let eps: Vec<T> = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                T::from_f64_lossy(e)
            })
            .collect();
        self.gaussian_sample_with(mu, log_var, eps)
    }

    /// [`gaussian_sample`](Self::gaussian_sample) with caller-provided noise.
    pub fn gaussian_sample_with(&mut self, mu: NodeId, log_var: NodeId, eps: Vec<T>) -> Result<NodeId> {
        self.same_shape("gaussian_sample", mu, log_var)?;
        if eps.len() != self.value(mu).numel() {
            return Err(self.mismatch(
                "gaussian_sample",
                format!("noise of length {} for latent {:?}", eps.len(), self.shape(mu)),
            ));
        }
        let half = T::from_f64_lossy(0.5);
        let out = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(log_var).data())
            .zip(&eps)
            .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
            .collect();
        let value = Tensor::from_parts(self.shape(mu).to_vec(), out);
        self.push(Op::GaussianSample(eps), vec![mu, log_var], value)
    }

    /// Noise drawn by a `gaussian_sample` node.
    pub fn sample_noise(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes[id.0].op {
            Op::GaussianSample(eps) => Some(eps),
            _ => None,
        }
    }

    /// Gradient contributions for each input of `id` given upstream `gout`.
    pub(crate) fn vjp(&self, id: NodeId, gout: &[T]) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[id.0];
        let want = |pos: usize| self.wants(id, pos);
        let x = |pos: usize| self.input_value(id, pos).data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![
                want(0).then(|| gout.to_vec()),
                want(1).then(|| gout.to_vec()),
            ],
            Op::Sub => vec![
                want(0).then(|| gout.to_vec()),
                want(1).then(|| gout.iter().map(|&g| -g).collect()),
            ],
            Op::Mul => vec![
                want(0).then(|| gout.iter().zip(x(1)).map(|(&g, &b)| g * b).collect()),
                want(1).then(|| gout.iter().zip(x(0)).map(|(&g, &a)| g * a).collect()),
            ],
            Op::Div => vec![
                want(0).then(|| gout.iter().zip(x(1)).map(|(&g, &b)| g / b).collect()),
                want(1).then(|| {
                    gout.iter()
                        .zip(y)
                        .zip(x(1))
                        .map(|((&g, &q), &b)| -g * q / b)
                        .collect()
                }),
            ],
            Op::Scale(f) => vec![Some(gout.iter().map(|&g| g * *f).collect())],
            Op::AddScalar(_) | Op::Reshape => vec![Some(gout.to_vec())],
            Op::Unary(kind) => vec![Some(
                gout.iter()
                    .zip(x(0))
                    .zip(y)
                    .map(|((&g, &xi), &yi)| g * kind.derivative(xi, yi))
                    .collect(),
            )],
            Op::MatMul => {
                let (sa, sb) = (self.input_value(id, 0).shape(), self.input_value(id, 1).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                vec![
                    want(0).then(|| {
                        let mut da = vec![T::zero(); m * k];
                        T::gemm(m, n, k, T::one(), gout, false, x(1), true, T::zero(), &mut da);
                        da
                    }),
                    want(1).then(|| {
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(k, m, n, T::one(), x(0), true, gout, false, T::zero(), &mut db);
                        db
                    }),
                ]
            }
            Op::Conv2d(geom) => self.conv2d_vjp(id, geom, gout),
            Op::ConvTranspose2d(geom) => self.conv_transpose2d_vjp(id, geom, gout),
            Op::ChannelBias => {
                let (batch, channels, inner) = channel_layout(node.value.shape()).unwrap();
                vec![
                    want(0).then(|| gout.to_vec()),
                    want(1).then(|| {
                        let mut db = vec![T::zero(); channels];
                        for b in 0..batch {
                            for (c, acc) in db.iter_mut().enumerate() {
                                let start = (b * channels + c) * inner;
                                *acc = *acc + gout[start..start + inner].iter().copied().sum::<T>();
                            }
                        }
                        db
                    }),
                ]
            }
            Op::PRelu => {
                let (batch, channels, inner) = channel_layout(node.value.shape()).unwrap();
                let (xv, av) = (x(0), x(1));
                let mut dx = want(0).then(|| vec![T::zero(); xv.len()]);
                let mut da = want(1).then(|| vec![T::zero(); channels]);
                for b in 0..batch {
                    for c in 0..channels {
                        let start = (b * channels + c) * inner;
                        for i in start..start + inner {
                            let positive = xv[i] > T::zero();
                            if let Some(dx) = dx.as_mut() {
                                dx[i] = if positive { gout[i] } else { gout[i] * av[c] };
                            }
                            if let (Some(da), false) = (da.as_mut(), positive) {
                                da[c] = da[c] + gout[i] * xv[i];
                            }
                        }
                    }
                }
                vec![dx, da]
            }
            Op::BatchNorm { train, stats, inv_std } => {
                let (batch, channels, inner) = channel_layout(node.value.shape()).unwrap();
                let (xv, gv) = (x(0), x(1));
                let n = T::from_usize(stats.count).unwrap();
                let mut dx = want(0).then(|| vec![T::zero(); xv.len()]);
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                for c in 0..channels {
                    let (m, is) = (stats.mean[c], inv_std[c]);
                    let (mut sg, mut sgx) = (T::zero(), T::zero());
                    for b in 0..batch {
                        let start = (b * channels + c) * inner;
                        for i in start..start + inner {
                            sg = sg + gout[i];
                            sgx = sgx + gout[i] * (xv[i] - m) * is;
                        }
                    }
                    dbeta[c] = sg;
                    dgamma[c] = sgx;
                    if let Some(dx) = dx.as_mut() {
                        for b in 0..batch {
                            let start = (b * channels + c) * inner;
                            for i in start..start + inner {
                                dx[i] = if *train {
                                    let xhat = (xv[i] - m) * is;
                                    gv[c] * is / n * (n * gout[i] - sg - xhat * sgx)
                                } else {
                                    gout[i] * gv[c] * is
                                };
                            }
                        }
                    }
                }
                vec![dx, want(1).then_some(dgamma), want(2).then_some(dbeta)]
            }
            Op::Sum => vec![Some(vec![gout[0]; self.input_value(id, 0).numel()])],
            Op::Mean => {
                let n = self.input_value(id, 0).numel();
                vec![Some(vec![gout[0] / T::from_usize(n).unwrap(); n])]
            }
            Op::MeanRows => {
                let (_, width) = self.rows_of(node.inputs[0]);
                let n = T::from_usize(width).unwrap();
                vec![Some(gout.iter().flat_map(|&g| std::iter::repeat_n(g / n, width)).collect())]
            }
            Op::L2NormRows => {
                let (_, width) = self.rows_of(node.inputs[0]);
                vec![Some(
                    x(0).chunks(width)
                        .zip(y)
                        .zip(gout)
                        .flat_map(|((r, &norm), &g)| {
                            r.iter().map(move |&v| if norm > T::zero() { g * v / norm } else { T::zero() })
                        })
                        .collect(),
                )]
            }
            Op::MulRows => {
                let (_, width) = self.rows_of(node.inputs[0]);
                let (xv, sv) = (x(0), x(1));
                vec![
                    want(0).then(|| {
                        gout.chunks(width)
                            .zip(sv)
                            .flat_map(|(r, &k)| r.iter().map(move |&g| g * k))
                            .collect()
                    }),
                    want(1).then(|| {
                        gout.chunks(width)
                            .zip(xv.chunks(width))
                            .map(|(g, r)| g.iter().zip(r).map(|(&a, &b)| a * b).sum())
                            .collect()
                    }),
                ]
            }
            Op::WindowFilter(taps) => vec![Some(self.window_filter_vjp(id, taps, gout))],
            Op::GaussianSample(eps) => {
                let half = T::from_f64_lossy(0.5);
                vec![
                    want(0).then(|| gout.to_vec()),
                    want(1).then(|| {
                        gout.iter()
                            .zip(x(1))
                            .zip(eps)
                            .map(|((&g, &lv), &e)| g * half * (half * lv).exp() * e)
                            .collect()
                    }),
                ]
            }
        }
    }

    fn conv2d_vjp(&self, id: NodeId, geom: &ColGeometry, gout: &[T]) -> Vec<Option<Vec<T>>> {
        let (xv, wv) = (self.input_value(id, 0).data(), self.input_value(id, 1).data());
        let out_c = self.input_value(id, 1).shape()[0];
        let batch = self.input_value(id, 0).shape()[0];
        let (want_x, want_w) = (self.wants(id, 0), self.wants(id, 1));
        let mut dx = want_x.then(|| vec![T::zero(); xv.len()]);
        let mut dw = want_w.then(|| vec![T::zero(); wv.len()]);
        let mut col = vec![T::zero(); geom.rows() * geom.cols()];
        let out_len = out_c * geom.cols();
        for b in 0..batch {
            let g = &gout[b * out_len..(b + 1) * out_len];
            if let Some(dw) = dw.as_mut() {
                im2col(&xv[b * geom.image_len()..(b + 1) * geom.image_len()], geom, &mut col);
                T::gemm(out_c, geom.cols(), geom.rows(), T::one(), g, false, &col, true, T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(geom.rows(), out_c, geom.cols(), T::one(), wv, true, g, false, T::zero(), &mut col);
                col2im(&col, geom, &mut dx[b * geom.image_len()..(b + 1) * geom.image_len()]);
            }
        }
        vec![dx, dw]
    }

    fn conv_transpose2d_vjp(&self, id: NodeId, geom: &ColGeometry, gout: &[T]) -> Vec<Option<Vec<T>>> {
        let (xv, wv) = (self.input_value(id, 0).data(), self.input_value(id, 1).data());
        let in_c = self.input_value(id, 0).shape()[1];
        let batch = self.input_value(id, 0).shape()[0];
        let (want_x, want_w) = (self.wants(id, 0), self.wants(id, 1));
        let mut dx = want_x.then(|| vec![T::zero(); xv.len()]);
        let mut dw = want_w.then(|| vec![T::zero(); wv.len()]);
        let mut col = vec![T::zero(); geom.rows() * geom.cols()];
        let in_len = in_c * geom.cols();
        for b in 0..batch {
            im2col(&gout[b * geom.image_len()..(b + 1) * geom.image_len()], geom, &mut col);
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx[b * in_len..(b + 1) * in_len];
                T::gemm(in_c, geom.rows(), geom.cols(), T::one(), wv, false, &col, false, T::zero(), dst);
            }
            if let Some(dw) = dw.as_mut() {
                let xb = &xv[b * in_len..(b + 1) * in_len];
                T::gemm(in_c, geom.cols(), geom.rows(), T::one(), xb, false, &col, true, T::one(), dw);
            }
        }
        vec![dx, dw]
    }

    fn window_filter_vjp(&self, id: NodeId, taps: &[T], gout: &[T]) -> Vec<T> {
        let shape = self.input_value(id, 0).shape();
        let (h, w, k) = (shape[2], shape[3], taps.len());
        let (oh, ow) = (h - k + 1, w - k + 1);
        let planes = shape[0] * shape[1];
        let mut dx = vec![T::zero(); planes * h * w];
        let mut tmp = vec![T::zero(); h * ow];
        for p in 0..planes {
            tmp.fill(T::zero());
            let g = &gout[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                for a in 0..k {
                    for j in 0..ow {
                        tmp[(i + a) * ow + j] = tmp[(i + a) * ow + j] + taps[a] * g[i * ow + j];
                    }
                }
            }
            let dst = &mut dx[p * h * w..(p + 1) * h * w];
            for i in 0..h {
                for j in 0..ow {
                    let t = tmp[i * ow + j];
                    for b in 0..k {
                        dst[i * w + j + b] = dst[i * w + j + b] + taps[b] * t;
                    }
                }
            }
        }
        dx
    }
}
