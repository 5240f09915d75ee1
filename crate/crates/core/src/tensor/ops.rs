//! Forward operations on [`Graph`] and their reverse rules.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::graph::{Node, Op};
use super::kernels::{self, ConvGeom};
use super::{Graph, Result, Scalar, Shape, Tensor, TensorError, Var};

fn same_shape<T: Scalar>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch { op, lhs: a.shape(), rhs: b.shape() })
    }
}

fn scalar_operand<T: Scalar>(op: &'static str, s: &Var<T>) -> Result<T> {
    if s.value.numel() != 1 {
        return Err(TensorError::Invalid { op, msg: format!("expected a one-element operand, got {}", s.shape()) });
    }
    Ok(s.value.data()[0])
}

fn check_bias<T: Scalar>(op: &'static str, b: Option<&Var<T>>, cout: usize) -> Result<()> {
    match b {
        Some(b) if b.value.numel() != cout => {
            Err(TensorError::ChannelMismatch { op, expected: cout, got: b.value.numel() })
        }
        _ => Ok(()),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape(), data)
}

#[inline]
fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad_f64(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// Fold an out-of-range index back into `0..len` by mirrored reflection
/// (edge sample not repeated).
fn reflect_index(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

impl<T: Scalar> Graph<T> {
    /// Direct 2-D cross-correlation. `kernel` is `(Cout, Cin, k, k)`; the
    /// output extent along each spatial axis is `(H + 2p - k) / stride + 1`.
    pub fn conv2d(
        &mut self,
        x: &Var<T>,
        kernel: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<T>> {
        self.conv_impl("conv2d", x, kernel, bias, stride, padding, 1)
    }

    /// Depthwise convolution with one `k x k` plane per channel and same padding.
    pub fn dwconv2d(&mut self, x: &Var<T>, kernel: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let [c, one, k, _] = kernel.shape().dims();
        if c != x.shape().c() || one != 1 {
            return Err(TensorError::ChannelMismatch { op: "dwconv2d", expected: x.shape().c(), got: c });
        }
        self.conv_impl("dwconv2d", x, kernel, bias, 1, (k - 1) / 2, c)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_impl(
        &mut self,
        op: &'static str,
        x: &Var<T>,
        kernel: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<T>> {
        let xs = x.shape();
        let [cout, cin_g, kh, kw] = kernel.shape().dims();
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::Invalid { op, msg: format!("kernel must be square with odd size, got {kh}x{kw}") });
        }
        if stride == 0 {
            return Err(TensorError::Invalid { op, msg: "stride must be positive".into() });
        }
        if cin_g * groups != xs.c() {
            return Err(TensorError::ChannelMismatch { op, expected: cin_g * groups, got: xs.c() });
        }
        check_bias(op, bias, cout)?;
        let (Some(ho), Some(wo)) = (
            kernels::conv_out_extent(xs.h(), kh, stride, padding),
            kernels::conv_out_extent(xs.w(), kh, stride, padding),
        ) else {
            return Err(TensorError::Invalid {
                op,
                msg: format!("input {xs} is smaller than the {kh}x{kh} kernel with padding {padding}"),
            });
        };
        let out_shape = Shape([xs.n(), cout, ho, wo]);
        let geom = ConvGeom { stride, pad: padding, groups };
        let value = kernels::conv_forward(&x.value, &kernel.value, bias.map(|b| &*b.value), geom, out_shape);
        let mut inputs = vec![x.clone(), kernel.clone()];
        inputs.extend(bias.cloned());
        Ok(self.record(Op::Conv { stride, pad: padding, groups }, inputs, value))
    }

    /// Per-pixel linear map across channels; `weight` is `(Cout, Cin, 1, 1)`.
    pub fn pointwise(&mut self, x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let [cout, cin, kh, kw] = weight.shape().dims();
        if kh != 1 || kw != 1 {
            return Err(TensorError::Invalid { op: "pointwise", msg: format!("weight must be (Cout, Cin, 1, 1), got {}", weight.shape()) });
        }
        if cin != x.shape().c() {
            return Err(TensorError::ChannelMismatch { op: "pointwise", expected: cin, got: x.shape().c() });
        }
        check_bias("pointwise", bias, cout)?;
        let value = kernels::pointwise_forward(&x.value, &weight.value, bias.map(|b| &*b.value));
        let mut inputs = vec![x.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        Ok(self.record(Op::Pointwise, inputs, value))
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a, b)?;
        let value = zip_map(&a.value, &b.value, |x, y| x + y);
        Ok(self.record(Op::Add, vec![a.clone(), b.clone()], value))
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("sub", a, b)?;
        let value = zip_map(&a.value, &b.value, |x, y| x - y);
        Ok(self.record(Op::Sub, vec![a.clone(), b.clone()], value))
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", a, b)?;
        let value = zip_map(&a.value, &b.value, |x, y| x * y);
        Ok(self.record(Op::Mul, vec![a.clone(), b.clone()], value))
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, x: &Var<T>, k: T) -> Var<T> {
        let value = x.value.map(|v| v * k);
        self.record(Op::Scale(k), vec![x.clone()], value)
    }

    /// Multiplication by a one-element tensor that may itself be learnable.
    pub fn mul_scalar(&mut self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        let k = scalar_operand("mul_scalar", s)?;
        let value = x.value.map(|v| v * k);
        Ok(self.record(Op::MulScalar, vec![x.clone(), s.clone()], value))
    }

    pub fn gelu(&mut self, x: &Var<T>) -> Var<T> {
        let value = x.value.map(|v| T::lit(gelu_f64(v.as_f64())));
        self.record(Op::Gelu, vec![x.clone()], value)
    }

    pub fn relu(&mut self, x: &Var<T>) -> Var<T> {
        let value = x.value.map(|v| if v > T::zero() { v } else { T::zero() });
        self.record(Op::Relu, vec![x.clone()], value)
    }

    pub fn abs(&mut self, x: &Var<T>) -> Var<T> {
        let value = x.value.map(|v| v.abs());
        self.record(Op::Abs, vec![x.clone()], value)
    }

    /// Softmax along one of the four axes.
    pub fn softmax(&mut self, x: &Var<T>, axis: usize) -> Result<Var<T>> {
        if axis > 3 {
            return Err(TensorError::Invalid { op: "softmax", msg: format!("axis {axis} out of range") });
        }
        let shape = x.shape();
        let (outer, dim, inner) = shape.around(axis);
        let src = x.value.data();
        let mut out = vec![T::zero(); shape.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * dim + k) * inner + i;
                let max = (0..dim).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..dim {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..dim {
                    out[at(k)] /= total;
                }
            }
        }
        Ok(self.record(Op::Softmax { axis }, vec![x.clone()], Tensor::from_parts(shape, out)))
    }

    /// Elementwise `max(x, c)` against a one-element floor. Ties resolve to
    /// `c`, so the gradient at a tie goes to the floor.
    pub fn max_scalar(&mut self, x: &Var<T>, c: &Var<T>) -> Result<Var<T>> {
        let floor = scalar_operand("max_scalar", c)?;
        let value = x.value.map(|v| if v > floor { v } else { floor });
        Ok(self.record(Op::MaxScalar, vec![x.clone(), c.clone()], value))
    }

    /// Mean over each `(h, w)` plane: `(N, C, H, W) -> (N, C, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: &Var<T>) -> Var<T> {
        let s = x.shape();
        let plane = s.plane();
        let denom = T::lit(plane as f64);
        let data = x
            .value
            .data()
            .chunks(plane)
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / denom)
            .collect();
        let value = Tensor::from_parts(Shape([s.n(), s.c(), 1, 1]), data);
        self.record(Op::GlobalAvgPool, vec![x.clone()], value)
    }

    /// Standardizes each pixel across channels, then applies a per-channel
    /// affine map. `scale` and `shift` hold `C` elements.
    pub fn channel_norm(&mut self, x: &Var<T>, scale: &Var<T>, shift: &Var<T>, eps: T) -> Result<Var<T>> {
        let s = x.shape();
        let c = s.c();
        for p in [scale, shift] {
            if p.value.numel() != c {
                return Err(TensorError::ChannelMismatch { op: "channel_norm", expected: c, got: p.value.numel() });
            }
        }
        let plane = s.plane();
        let src = x.value.data();
        let (gamma, beta) = (scale.value.data(), shift.value.data());
        let mut xhat = vec![T::zero(); s.numel()];
        let mut inv_std = vec![T::zero(); s.n() * plane];
        let mut out = vec![T::zero(); s.numel()];
        let cf = T::lit(c as f64);
        for n in 0..s.n() {
            let base = n * c * plane;
            for p in 0..plane {
                let mut mean = T::zero();
                for ch in 0..c {
                    mean += src[base + ch * plane + p];
                }
                mean /= cf;
                let mut var = T::zero();
                for ch in 0..c {
                    let d = src[base + ch * plane + p] - mean;
                    var += d * d;
                }
                var /= cf;
                let is = T::one() / (var + eps).sqrt();
                inv_std[n * plane + p] = is;
                for ch in 0..c {
                    let i = base + ch * plane + p;
                    let xh = (src[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = xh * gamma[ch] + beta[ch];
                }
            }
        }
        let value = Tensor::from_parts(s, out);
        Ok(self.record(Op::ChannelNorm { xhat, inv_std }, vec![x.clone(), scale.clone(), shift.clone()], value))
    }

    /// Divides each pixel's channel vector by its Euclidean norm.
    pub fn l2_normalize_channels(&mut self, x: &Var<T>, eps: T) -> Var<T> {
        let s = x.shape();
        let (c, plane) = (s.c(), s.plane());
        let src = x.value.data();
        let mut inv_norm = vec![T::zero(); s.n() * plane];
        let mut out = vec![T::zero(); s.numel()];
        for n in 0..s.n() {
            let base = n * c * plane;
            for p in 0..plane {
                let mut sq = eps;
                for ch in 0..c {
                    let v = src[base + ch * plane + p];
                    sq += v * v;
                }
                let inv = T::one() / sq.sqrt();
                inv_norm[n * plane + p] = inv;
                for ch in 0..c {
                    let i = base + ch * plane + p;
                    out[i] = src[i] * inv;
                }
            }
        }
        self.record(Op::L2Normalize { inv_norm }, vec![x.clone()], Tensor::from_parts(s, out))
    }

    /// Multiplies each `(n, c)` plane of `x` by `weight[n, c]`; `weight` is `(N, C, 1, 1)`.
    pub fn scale_channels(&mut self, x: &Var<T>, weight: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        let ws = weight.shape();
        if ws.n() != s.n() || ws.c() != s.c() || ws.plane() != 1 {
            return Err(TensorError::ShapeMismatch { op: "scale_channels", lhs: s, rhs: ws });
        }
        let plane = s.plane();
        let wd = weight.value.data();
        let mut out = x.value.data().to_vec();
        for (chunk, &k) in out.chunks_mut(plane).zip(wd) {
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        let value = Tensor::from_parts(s, out);
        Ok(self.record(Op::ScaleChannels, vec![x.clone(), weight.clone()], value))
    }

    /// Multiplies sample `n` by the constant `factors[n]`.
    pub fn scale_samples(&mut self, x: &Var<T>, factors: Vec<T>) -> Result<Var<T>> {
        let s = x.shape();
        if factors.len() != s.n() {
            return Err(TensorError::Invalid {
                op: "scale_samples",
                msg: format!("{} factors for batch of {}", factors.len(), s.n()),
            });
        }
        let per = s.numel() / s.n();
        let mut out = x.value.data().to_vec();
        for (chunk, &k) in out.chunks_mut(per).zip(&factors) {
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        let value = Tensor::from_parts(s, out);
        Ok(self.record(Op::ScaleSamples(factors), vec![x.clone()], value))
    }

    /// Contiguous slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let s = x.shape();
        if axis > 3 || len == 0 || start + len > s.0[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {start}..{} on axis {axis} of {s}", start + len),
            });
        }
        let (outer, dim, inner) = s.around(axis);
        let src = x.value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * dim + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let value = Tensor::from_parts(s.with_axis(axis, len), out);
        Ok(self.record(Op::Narrow { axis, start }, vec![x.clone()], value))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid { op: "concat", msg: "no inputs".into() })?;
        if axis > 3 {
            return Err(TensorError::Invalid { op: "concat", msg: format!("axis {axis} out of range") });
        }
        let base = first.shape();
        let mut total = 0;
        for p in parts {
            let ps = p.shape();
            if (0..4).any(|a| a != axis && ps.0[a] != base.0[a]) {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: base, rhs: ps });
            }
            total += ps.0[axis];
        }
        let out_shape = base.with_axis(axis, total);
        let (outer, _, inner) = out_shape.around(axis);
        let mut out = Vec::with_capacity(out_shape.numel());
        for o in 0..outer {
            for p in parts {
                let d = p.shape().0[axis];
                let from = o * d * inner;
                out.extend_from_slice(&p.value.data()[from..from + d * inner]);
            }
        }
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.record(Op::Concat { axis }, parts.to_vec(), value))
    }

    pub fn reshape(&mut self, x: &Var<T>, dims: [usize; 4]) -> Result<Var<T>> {
        let value = x.value.reshape(dims)?;
        Ok(self.record(Op::Reshape, vec![x.clone()], value))
    }

    /// Rearranges `(N, 4C, H, W)` into `(N, C, 2H, 2W)`; channel `4c + 2i + j`
    /// lands at offset `(i, j)` of each 2x2 output cell.
    pub fn depth_to_space(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if !s.c().is_multiple_of(4) {
            return Err(TensorError::Invalid { op: "depth_to_space", msg: format!("channels {} not divisible by 4", s.c()) });
        }
        let out_shape = Shape([s.n(), s.c() / 4, s.h() * 2, s.w() * 2]);
        let src = x.value.data();
        let mut out = vec![T::zero(); out_shape.numel()];
        for n in 0..s.n() {
            for c in 0..out_shape.c() {
                for i in 0..2 {
                    for j in 0..2 {
                        let ci = c * 4 + i * 2 + j;
                        for h in 0..s.h() {
                            for w in 0..s.w() {
                                out[out_shape.index(n, c, 2 * h + i, 2 * w + j)] = src[s.index(n, ci, h, w)];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.record(Op::DepthToSpace, vec![x.clone()], Tensor::from_parts(out_shape, out)))
    }

    /// Extends the bottom and right edges by mirrored reflection.
    pub fn pad_reflect(&mut self, x: &Var<T>, pad_bottom: usize, pad_right: usize) -> Var<T> {
        if pad_bottom == 0 && pad_right == 0 {
            return x.clone();
        }
        let s = x.shape();
        let out_shape = Shape([s.n(), s.c(), s.h() + pad_bottom, s.w() + pad_right]);
        let src = x.value.data();
        let mut out = Vec::with_capacity(out_shape.numel());
        for n in 0..s.n() {
            for c in 0..s.c() {
                for h in 0..out_shape.h() {
                    let sh = reflect_index(h, s.h());
                    for w in 0..out_shape.w() {
                        out.push(src[s.index(n, c, sh, reflect_index(w, s.w()))]);
                    }
                }
            }
        }
        self.record(Op::PadReflect, vec![x.clone()], Tensor::from_parts(out_shape, out))
    }

    pub fn sum(&mut self, x: &Var<T>) -> Var<T> {
        let value = Tensor::scalar(x.value.sum());
        self.record(Op::Sum, vec![x.clone()], value)
    }

    pub fn mean(&mut self, x: &Var<T>) -> Var<T> {
        let value = Tensor::scalar(x.value.sum() / T::lit(x.value.numel() as f64));
        self.record(Op::Mean, vec![x.clone()], value)
    }

    /// Halves the resolution: 3x3 convolution, stride 2, padding 1.
    pub fn downsample2x(&mut self, x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let s = x.shape();
        if !s.h().is_multiple_of(2) || !s.w().is_multiple_of(2) {
            return Err(TensorError::Invalid { op: "downsample2x", msg: format!("odd spatial extent in {s}") });
        }
        self.conv_impl("downsample2x", x, weight, bias, 2, 1, 1)
    }

    /// Doubles the resolution: pointwise projection, then depth-to-space.
    pub fn upsample2x(&mut self, x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let y = self.pointwise(x, weight, bias)?;
        self.depth_to_space(&y)
    }
}

/// Vector-Jacobian product of one node: gradients for each input, `None`
/// where the input is untracked.
pub(crate) fn vjp<T: Scalar>(node: &Node<T>, gout: &Tensor<T>, need: &[bool]) -> Vec<Option<Tensor<T>>> {
    let inputs = &node.inputs;
    let x = |i: usize| &*inputs[i].value;
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    let g = gout.data();

    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Conv { stride, pad, groups } => {
            let geom = ConvGeom { stride: *stride, pad: *pad, groups: *groups };
            let (dx, dw, db) = kernels::conv_backward(x(0), x(1), gout, geom, [want(0), want(1), want(2)]);
            let db = db.map(|d| Tensor::from_parts(x(2).shape(), d.into_data()));
            vec![dx, dw, db]
        }
        Op::Pointwise => {
            let (dx, dw, db) = kernels::pointwise_backward(x(0), x(1), gout, [want(0), want(1), want(2)]);
            let db = db.map(|d| Tensor::from_parts(x(2).shape(), d.into_data()));
            vec![dx, dw, db]
        }
        Op::Add => vec![want(0).then(|| gout.clone()), want(1).then(|| gout.clone())],
        Op::Sub => vec![want(0).then(|| gout.clone()), want(1).then(|| gout.map(|v| -v))],
        Op::Mul => vec![
            want(0).then(|| zip_map(gout, x(1), |g, b| g * b)),
            want(1).then(|| zip_map(gout, x(0), |g, a| g * a)),
        ],
        Op::Scale(k) => vec![Some(gout.map(|v| v * *k))],
        Op::MulScalar => {
            let k = x(1).data()[0];
            vec![
                want(0).then(|| gout.map(|v| v * k)),
                want(1).then(|| {
                    let s = g.iter().zip(x(0).data()).fold(T::zero(), |a, (&g, &v)| a + g * v);
                    Tensor::from_parts(x(1).shape(), vec![s])
                }),
            ]
        }
        Op::Gelu => vec![Some(zip_map(gout, x(0), |g, v| g * T::lit(gelu_grad_f64(v.as_f64()))))],
        Op::Relu => vec![Some(zip_map(gout, x(0), |g, v| if v > T::zero() { g } else { T::zero() }))],
        Op::Abs => vec![Some(zip_map(gout, x(0), |g, v| {
            if v > T::zero() {
                g
            } else if v < T::zero() {
                -g
            } else {
                T::zero()
            }
        }))],
        Op::Softmax { axis } => {
            let y = node.value.data();
            let shape = node.value.shape();
            let (outer, dim, inner) = shape.around(*axis);
            let mut dx = vec![T::zero(); shape.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * dim + k) * inner + i;
                    let dot = (0..dim).fold(T::zero(), |a, k| a + g[at(k)] * y[at(k)]);
                    for k in 0..dim {
                        dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape, dx))]
        }
        Op::MaxScalar => {
            let floor = x(1).data()[0];
            let src = x(0).data();
            vec![
                want(0).then(|| zip_map(gout, x(0), |g, v| if v > floor { g } else { T::zero() })),
                want(1).then(|| {
                    let s = g.iter().zip(src).fold(T::zero(), |a, (&g, &v)| if v > floor { a } else { a + g });
                    Tensor::from_parts(x(1).shape(), vec![s])
                }),
            ]
        }
        Op::GlobalAvgPool => {
            let s = x(0).shape();
            let plane = s.plane();
            let denom = T::lit(plane as f64);
            let mut dx = Vec::with_capacity(s.numel());
            for &gv in g {
                dx.extend(std::iter::repeat_n(gv / denom, plane));
            }
            vec![Some(Tensor::from_parts(s, dx))]
        }
        Op::ChannelNorm { xhat, inv_std } => {
            let s = x(0).shape();
            let (c, plane) = (s.c(), s.plane());
            let gamma = x(1).data();
            let cf = T::lit(c as f64);
            let mut dx = want(0).then(|| vec![T::zero(); s.numel()]);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for n in 0..s.n() {
                let base = n * c * plane;
                for p in 0..plane {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for ch in 0..c {
                        let i = base + ch * plane + p;
                        let d = g[i] * gamma[ch];
                        mean_d += d;
                        mean_dx += d * xhat[i];
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                    mean_d /= cf;
                    mean_dx /= cf;
                    if let Some(dx) = dx.as_mut() {
                        let is = inv_std[n * plane + p];
                        for ch in 0..c {
                            let i = base + ch * plane + p;
                            dx[i] = is * (g[i] * gamma[ch] - mean_d - xhat[i] * mean_dx);
                        }
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::from_parts(s, d)),
                want(1).then(|| Tensor::from_parts(x(1).shape(), dgamma)),
                want(2).then(|| Tensor::from_parts(x(2).shape(), dbeta)),
            ]
        }
        Op::L2Normalize { inv_norm } => {
            let s = x(0).shape();
            let (c, plane) = (s.c(), s.plane());
            let y = node.value.data();
            let mut dx = vec![T::zero(); s.numel()];
            for n in 0..s.n() {
                let base = n * c * plane;
                for p in 0..plane {
                    let dot = (0..c).fold(T::zero(), |a, ch| a + g[base + ch * plane + p] * y[base + ch * plane + p]);
                    let inv = inv_norm[n * plane + p];
                    for ch in 0..c {
                        let i = base + ch * plane + p;
                        dx[i] = (g[i] - y[i] * dot) * inv;
                    }
                }
            }
            vec![Some(Tensor::from_parts(s, dx))]
        }
        Op::ScaleChannels => {
            let s = x(0).shape();
            let plane = s.plane();
            let w = x(1).data();
            let dx = want(0).then(|| {
                let mut dx = g.to_vec();
                for (chunk, &k) in dx.chunks_mut(plane).zip(w) {
                    chunk.iter_mut().for_each(|v| *v *= k);
                }
                Tensor::from_parts(s, dx)
            });
            let dw = want(1).then(|| {
                let dw = g
                    .chunks(plane)
                    .zip(x(0).data().chunks(plane))
                    .map(|(gc, xc)| gc.iter().zip(xc).fold(T::zero(), |a, (&g, &v)| a + g * v))
                    .collect();
                Tensor::from_parts(x(1).shape(), dw)
            });
            vec![dx, dw]
        }
        Op::ScaleSamples(factors) => {
            let s = x(0).shape();
            let per = s.numel() / s.n();
            let mut dx = g.to_vec();
            for (chunk, &k) in dx.chunks_mut(per).zip(factors) {
                chunk.iter_mut().for_each(|v| *v *= k);
            }
            vec![Some(Tensor::from_parts(s, dx))]
        }
        Op::Narrow { axis, start } => {
            let s = x(0).shape();
            let (outer, dim, inner) = s.around(*axis);
            let len = gout.shape().0[*axis];
            let mut dx = vec![T::zero(); s.numel()];
            for o in 0..outer {
                let to = (o * dim + start) * inner;
                let from = o * len * inner;
                dx[to..to + len * inner].copy_from_slice(&g[from..from + len * inner]);
            }
            vec![Some(Tensor::from_parts(s, dx))]
        }
        Op::Concat { axis } => {
            let out_shape = gout.shape();
            let (outer, total, inner) = out_shape.around(*axis);
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for (k, p) in inputs.iter().enumerate() {
                let ps = p.shape();
                let d = ps.0[*axis];
                if want(k) {
                    let mut dx = Vec::with_capacity(ps.numel());
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        dx.extend_from_slice(&g[from..from + d * inner]);
                    }
                    grads.push(Some(Tensor::from_parts(ps, dx)));
                } else {
                    grads.push(None);
                }
                offset += d;
            }
            grads
        }
        Op::Reshape => vec![Some(Tensor::from_parts(x(0).shape(), g.to_vec()))],
        Op::DepthToSpace => {
            let s = x(0).shape();
            let os = gout.shape();
            let mut dx = vec![T::zero(); s.numel()];
            for n in 0..s.n() {
                for c in 0..os.c() {
                    for i in 0..2 {
                        for j in 0..2 {
                            let ci = c * 4 + i * 2 + j;
                            for h in 0..s.h() {
                                for w in 0..s.w() {
                                    dx[s.index(n, ci, h, w)] = g[os.index(n, c, 2 * h + i, 2 * w + j)];
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(s, dx))]
        }
        Op::PadReflect => {
            let s = x(0).shape();
            let os = gout.shape();
            let mut dx = vec![T::zero(); s.numel()];
            for n in 0..s.n() {
                for c in 0..s.c() {
                    for h in 0..os.h() {
                        let sh = reflect_index(h, s.h());
                        for w in 0..os.w() {
                            dx[s.index(n, c, sh, reflect_index(w, s.w()))] += g[os.index(n, c, h, w)];
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(s, dx))]
        }
        Op::Sum => vec![Some(Tensor::from_parts(x(0).shape(), vec![g[0]; x(0).numel()]))],
        Op::Mean => {
            let n = T::lit(x(0).numel() as f64);
            vec![Some(Tensor::from_parts(x(0).shape(), vec![g[0] / n; x(0).numel()]))]
        }
    }
}
