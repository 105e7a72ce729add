use serde::{Deserialize, Serialize};

use super::{Precision, Result, Tensor, TensorError};

/// Stride, zero padding and dilation of a 3-D convolution, per (D, H, W) axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub dilation: [usize; 3],
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Conv3dSpec {
            stride: [1; 3],
            pad: [0; 3],
            dilation: [1; 3],
        }
    }
}

impl Conv3dSpec {
    pub fn new(stride: [usize; 3], pad: [usize; 3]) -> Self {
        Conv3dSpec {
            stride,
            pad,
            dilation: [1; 3],
        }
    }

    /// Output shape `[N, O, D', H', W']` for an input `[N, C, D, H, W]` and weight `[O, C, kd, kh, kw]`.
    pub fn output_shape(&self, input: &[usize], weight: &[usize]) -> Result<[usize; 5]> {
        if input.len() != 5 {
            return Err(rank_err("conv3d", 5, input));
        }
        if weight.len() != 5 {
            return Err(rank_err("conv3d weight", 5, weight));
        }
        if input[1] != weight[1] {
            return Err(TensorError::AxisMismatch {
                op: "conv3d",
                axis: "input channel (axis 1)".into(),
                expected: weight[1],
                actual: input[1],
            });
        }
        if self.stride.contains(&0) || self.dilation.contains(&0) {
            return Err(TensorError::Invalid {
                op: "conv3d",
                msg: "stride and dilation must be positive".into(),
            });
        }
        let mut out = [input[0], weight[0], 0, 0, 0];
        for a in 0..3 {
            let span = self.dilation[a] * (weight[2 + a] - 1) + 1;
            let padded = input[2 + a] + 2 * self.pad[a];
            if padded < span {
                return Err(TensorError::Invalid {
                    op: "conv3d",
                    msg: format!(
                        "spatial axis {} of extent {} (padded {padded}) is smaller than the kernel span {span}",
                        2 + a,
                        input[2 + a]
                    ),
                });
            }
            out[2 + a] = (padded - span) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

fn rank_err(op: &'static str, expected: usize, shape: &[usize]) -> TensorError {
    TensorError::Rank {
        op,
        expected,
        shape: shape.to_vec(),
    }
}

fn shape5(shape: &[usize]) -> [usize; 5] {
    [shape[0], shape[1], shape[2], shape[3], shape[4]]
}

#[inline]
pub(crate) fn relu1(v: f32) -> f32 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

/// Range `[lo, hi)` of kernel taps that land inside `[0, extent)` for output position `o`.
#[inline]
fn tap_range(o: usize, stride: usize, dil: usize, pad: usize, k: usize, extent: usize) -> (usize, usize) {
    let base = (o * stride) as isize - pad as isize;
    let mut lo = 0usize;
    while lo < k && base + ((lo * dil) as isize) < 0 {
        lo += 1;
    }
    let mut hi = k;
    while hi > lo && base + ((hi - 1) * dil) as isize >= extent as isize {
        hi -= 1;
    }
    (lo, hi)
}

/// Accumulator for dot products: `f64` for F32 tensors, `f32` for F16 tensors.
pub(crate) trait Accum: Copy + Default + std::ops::AddAssign + std::ops::Mul<Output = Self> {
    fn widen(v: f32) -> Self;
    fn narrow(self) -> f32;
}

impl Accum for f64 {
    #[inline(always)]
    fn widen(v: f32) -> Self {
        v as f64
    }
    #[inline(always)]
    fn narrow(self) -> f32 {
        self as f32
    }
}

impl Accum for f32 {
    #[inline(always)]
    fn widen(v: f32) -> Self {
        v
    }
    #[inline(always)]
    fn narrow(self) -> f32 {
        self
    }
}

/// Output positions `[lo, hi)` along one axis for which tap `t` reads inside `[0, extent)`.
#[inline]
fn out_range(t: usize, stride: usize, dil: usize, pad: usize, extent: usize, out_len: usize) -> (usize, usize) {
    let off = t * dil;
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    let hi = if extent + pad > off {
        ((extent + pad - off - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Where a bias joins the sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BiasAt {
    /// Seeds the accumulator, so `Σ x·w + b` is rounded once.
    Accumulator,
    /// Added after rounding, exactly as a separate bias-add node would.
    Epilogue,
}

/// Direct 3-D cross-correlation on raw buffers, with an optional bias and ReLU.
///
/// The sum runs over (channel, kd, kh, kw) in that order in the accumulator
/// type of `precision` (`f64` for F32, `f32` for F16). With [`BiasAt::Epilogue`]
/// every output is `relu?(round(Σ x·w) + bias)`, which keeps fused graph nodes
/// bitwise equal to the unfused chain.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_into(
    x: &[f32],
    xs: [usize; 5],
    w: &[f32],
    ws: [usize; 5],
    bias: Option<(&[f32], BiasAt)>,
    relu: bool,
    spec: &Conv3dSpec,
    precision: Precision,
    out: &mut [f32],
) {
    match precision {
        Precision::F32 => conv3d_acc::<f64>(x, xs, w, ws, bias, relu, spec, out),
        Precision::F16 => conv3d_acc::<f32>(x, xs, w, ws, bias, relu, spec, out),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3d_acc<A: Accum>(
    x: &[f32],
    xs: [usize; 5],
    w: &[f32],
    ws: [usize; 5],
    bias: Option<(&[f32], BiasAt)>,
    relu: bool,
    spec: &Conv3dSpec,
    out: &mut [f32],
) {
    let [n, c, d, h, wd] = xs;
    let [o, _, kd, kh, kw] = ws;
    let os = spec.output_shape(&xs, &ws).expect("conv3d shapes validated by caller");
    let [_, _, od, oh, ow] = os;
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.pad;
    let [dd, dh, dw] = spec.dilation;
    let ksz = kd * kh * kw;
    let plane = h * wd;
    let vol = d * plane;
    let xcols: Vec<(usize, usize)> = (0..kw).map(|t| out_range(t, sw, dw, pw, wd, ow)).collect();
    let yrange: Vec<(usize, usize)> = (0..oh).map(|y| tap_range(y, sh, dh, ph, kh, h)).collect();
    let mut row = vec![A::default(); ow];

    let mut idx = 0;
    for ni in 0..n {
        let xn = &x[ni * c * vol..(ni + 1) * c * vol];
        for oi in 0..o {
            let wo = &w[oi * c * ksz..(oi + 1) * c * ksz];
            let (seed, late) = match bias {
                Some((b, BiasAt::Accumulator)) => (A::widen(b[oi]), None),
                Some((b, BiasAt::Epilogue)) => (A::default(), Some(b[oi])),
                None => (A::default(), None),
            };
            for z in 0..od {
                let (za, zb) = tap_range(z, sd, dd, pd, kd, d);
                for (y, &(ya, yb)) in yrange.iter().enumerate() {
                    row.fill(seed);
                    for ci in 0..c {
                        let xc = &xn[ci * vol..(ci + 1) * vol];
                        let wc = &wo[ci * ksz..(ci + 1) * ksz];
                        for a in za..zb {
                            let iz = z * sd + a * dd - pd;
                            let xz = &xc[iz * plane..(iz + 1) * plane];
                            let wa = &wc[a * kh * kw..(a + 1) * kh * kw];
                            for bb in ya..yb {
                                let iy = y * sh + bb * dh - ph;
                                let xrow = &xz[iy * wd..(iy + 1) * wd];
                                let wrow = &wa[bb * kw..(bb + 1) * kw];
                                for (t, &(x0, x1)) in xcols.iter().enumerate() {
                                    if x0 >= x1 {
                                        continue;
                                    }
                                    let wv = A::widen(wrow[t]);
                                    let start = x0 * sw + t * dw - pw;
                                    let dst = &mut row[x0..x1];
                                    if sw == 1 {
                                        for (r, &v) in dst.iter_mut().zip(&xrow[start..start + (x1 - x0)]) {
                                            *r += A::widen(v) * wv;
                                        }
                                    } else {
                                        for (r, &v) in dst.iter_mut().zip(xrow[start..].iter().step_by(sw)) {
                                            *r += A::widen(v) * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    for &acc in &row {
                        let mut v = acc.narrow();
                        if let Some(b) = late {
                            v += b;
                        }
                        if relu {
                            v = relu1(v);
                        }
                        out[idx] = v;
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// 3-D cross-correlation with zero padding.
///
/// `input` is `[N, C, D, H, W]`, `weight` is `[O, C, kd, kh, kw]`, `bias` is `[O]`.
pub fn conv3d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &Conv3dSpec) -> Result<Tensor> {
    let os = spec.output_shape(input.shape(), weight.shape())?;
    let mut precision = input.precision().join(weight.precision());
    if let Some(b) = bias {
        check_vector("conv3d bias", b, weight.shape()[0])?;
        precision = precision.join(b.precision());
    }
    let mut out = vec![0.0; os.iter().product()];
    conv3d_into(
        input.data(),
        shape5(input.shape()),
        weight.data(),
        shape5(weight.shape()),
        bias.map(|b| (b.data(), BiasAt::Accumulator)),
        false,
        spec,
        precision,
        &mut out,
    );
    Ok(Tensor::from_parts(os.to_vec(), out, precision))
}

fn check_vector(op: &'static str, t: &Tensor, len: usize) -> Result<()> {
    if t.rank() != 1 {
        return Err(rank_err(op, 1, t.shape()));
    }
    if t.shape()[0] != len {
        return Err(TensorError::AxisMismatch {
            op,
            axis: "length".into(),
            expected: len,
            actual: t.shape()[0],
        });
    }
    Ok(())
}

/// Dilated 1-D convolution over time with symmetric "same" padding.
///
/// `input` is `[C, T]`, `weight` is `[O, C, k]` with odd `k`; the output is `[O, T]`.
pub fn conv1d_dilated(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, dilation: usize) -> Result<Tensor> {
    if input.rank() != 2 {
        return Err(rank_err("conv1d_dilated", 2, input.shape()));
    }
    if weight.rank() != 3 {
        return Err(rank_err("conv1d_dilated weight", 3, weight.shape()));
    }
    let (c, t) = (input.shape()[0], input.shape()[1]);
    let (o, wc, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    if wc != c {
        return Err(TensorError::AxisMismatch {
            op: "conv1d_dilated",
            axis: "input channel (axis 0)".into(),
            expected: wc,
            actual: c,
        });
    }
    if k % 2 == 0 {
        return Err(TensorError::Invalid {
            op: "conv1d_dilated",
            msg: format!("kernel size {k} is even; same padding needs an odd kernel"),
        });
    }
    if dilation == 0 {
        return Err(TensorError::Invalid {
            op: "conv1d_dilated",
            msg: "dilation must be positive".into(),
        });
    }
    let mut precision = input.precision().join(weight.precision());
    if let Some(b) = bias {
        check_vector("conv1d_dilated bias", b, o)?;
        precision = precision.join(b.precision());
    }
    let pad = (k - 1) * dilation / 2;
    let x = input.data();
    let w = weight.data();
    let mut out = vec![0.0; o * t];
    for oi in 0..o {
        for ti in 0..t {
            let mut acc = bias.map_or(0.0, |b| b.data()[oi] as f64);
            for ci in 0..c {
                for j in 0..k {
                    let src = ti as isize + (j * dilation) as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    acc += x[ci * t + src as usize] as f64 * w[(oi * c + ci) * k + j] as f64;
                }
            }
            out[oi * t + ti] = acc as f32;
        }
    }
    Ok(Tensor::from_parts(vec![o, t], out, precision))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_into(
    x: &[f32],
    in_dim: usize,
    w: &[f32],
    out_dim: usize,
    bias: Option<(&[f32], BiasAt)>,
    relu: bool,
    precision: Precision,
    out: &mut [f32],
) {
    match precision {
        Precision::F32 => linear_acc::<f64>(x, in_dim, w, out_dim, bias, relu, out),
        Precision::F16 => linear_acc::<f32>(x, in_dim, w, out_dim, bias, relu, out),
    }
}

fn linear_acc<A: Accum>(
    x: &[f32],
    in_dim: usize,
    w: &[f32],
    out_dim: usize,
    bias: Option<(&[f32], BiasAt)>,
    relu: bool,
    out: &mut [f32],
) {
    let rows = x.len() / in_dim;
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = match bias {
                Some((b, BiasAt::Accumulator)) => A::widen(b[o]),
                _ => A::default(),
            };
            for (&a, &b) in xr.iter().zip(wr) {
                acc += A::widen(a) * A::widen(b);
            }
            let mut v = acc.narrow();
            if let Some((b, BiasAt::Epilogue)) = bias {
                v += b[o];
            }
            if relu {
                v = relu1(v);
            }
            out[r * out_dim + o] = v;
        }
    }
}

/// Affine map over the last axis: `input[..., I]`, `weight[O, I]`, `bias[O]` → `[..., O]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if weight.rank() != 2 {
        return Err(rank_err("linear weight", 2, weight.shape()));
    }
    if input.rank() == 0 {
        return Err(rank_err("linear", 1, input.shape()));
    }
    let (o, i) = (weight.shape()[0], weight.shape()[1]);
    let last = *input.shape().last().unwrap();
    if last != i {
        return Err(TensorError::AxisMismatch {
            op: "linear",
            axis: "trailing (input feature)".into(),
            expected: i,
            actual: last,
        });
    }
    let mut precision = input.precision().join(weight.precision());
    if let Some(b) = bias {
        check_vector("linear bias", b, o)?;
        precision = precision.join(b.precision());
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = o;
    let mut out = vec![0.0; shape.iter().product()];
    linear_into(
        input.data(),
        i,
        weight.data(),
        o,
        bias.map(|b| (b.data(), BiasAt::Accumulator)),
        false,
        precision,
        &mut out,
    );
    Ok(Tensor::from_parts(shape, out, precision))
}

/// Splits a shape around `axis` into (outer, extent, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(TensorError::Invalid {
            op,
            msg: format!("axis {axis} out of range for shape {:?}", t.shape()),
        });
    }
    Ok(())
}

/// Numerically stable softmax along `axis`.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", input, axis)?;
    let mut out = input.data().to_vec();
    if out.iter().any(|v| v.is_nan()) {
        log::warn!("softmax input contains NaN; propagating");
    }
    let (outer, n, inner) = axis_split(input.shape(), axis);
    for a in 0..outer {
        for b in 0..inner {
            let at = |j: usize| a * n * inner + j * inner + b;
            softmax_strided(&mut out, n, at);
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out, input.precision()))
}

fn softmax_strided(buf: &mut [f32], n: usize, at: impl Fn(usize) -> usize) {
    let max = (0..n).map(|j| buf[at(j)]).fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f64;
    let mut exps = Vec::with_capacity(n);
    for j in 0..n {
        // The shift is taken in f64: an f32 difference already costs ~1e-6 relative after exp.
        let e = (buf[at(j)] as f64 - max as f64).exp();
        sum += e;
        exps.push(e);
    }
    let nan = (0..n).any(|j| buf[at(j)].is_nan());
    for (j, e) in exps.into_iter().enumerate() {
        buf[at(j)] = if nan { f32::NAN } else { (e / sum) as f32 };
    }
}

/// Softmax over each contiguous row of `width` elements, in place.
pub(crate) fn softmax_rows_in_place(buf: &mut [f32], width: usize) {
    for row in buf.chunks_mut(width) {
        softmax_strided(row, width, |j| j);
    }
}

/// Per-row Euclidean norm of a `[T, D]` matrix.
pub fn l2_magnitude(features: &Tensor) -> Result<Tensor> {
    if features.rank() != 2 {
        return Err(rank_err("l2_magnitude", 2, features.shape()));
    }
    let d = features.shape()[1];
    let out = features
        .data()
        .chunks(d)
        .map(|row| row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt() as f32)
        .collect();
    Ok(Tensor::from_parts(vec![features.shape()[0]], out, features.precision()))
}

/// The `k` largest entries of a 1-D tensor, largest first. Ties go to the lower index.
pub fn topk(values: &Tensor, k: usize) -> Result<(Vec<usize>, Vec<f32>)> {
    if values.rank() != 1 {
        return Err(rank_err("topk", 1, values.shape()));
    }
    let t = values.len();
    if k == 0 || k > t {
        return Err(TensorError::Invalid {
            op: "topk",
            msg: format!("k = {k} outside 1..={t}"),
        });
    }
    let v = values.data();
    let mut order: Vec<usize> = (0..t).collect();
    // NaN sorts last so it is never preferred over a number.
    order.sort_by(|&a, &b| {
        let (x, y) = (v[a], v[b]);
        match (x.is_nan(), y.is_nan()) {
            (true, true) => a.cmp(&b),
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            _ => y.partial_cmp(&x).unwrap().then(a.cmp(&b)),
        }
    });
    order.truncate(k);
    let vals = order.iter().map(|&i| v[i]).collect();
    Ok((order, vals))
}

fn map(input: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::from_parts(
        input.shape().to_vec(),
        input.data().iter().map(|&v| f(v)).collect(),
        input.precision(),
    )
}

pub fn relu(input: &Tensor) -> Tensor {
    map(input, relu1)
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    map(input, |v| (1.0 / (1.0 + (-(v as f64)).exp())) as f32)
}

pub fn mul_scalar(input: &Tensor, s: f32) -> Tensor {
    map(input, |v| v * s)
}

/// Elementwise sum. Shapes must match, or one side must hold a single element.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let precision = a.precision().join(b.precision());
    if a.shape() == b.shape() {
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), out, precision));
    }
    let (big, s) = if b.len() == 1 {
        (a, b.data()[0])
    } else if a.len() == 1 {
        (b, a.data()[0])
    } else {
        return Err(TensorError::Invalid {
            op: "add",
            msg: format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
        });
    };
    let out = big.data().iter().map(|x| x + s).collect();
    Ok(Tensor::from_parts(big.shape().to_vec(), out, precision))
}

/// Adds a per-channel bias along axis 1 (`[N, C, ...]`).
pub fn bias_add(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.rank() < 2 {
        return Err(rank_err("bias_add", 2, input.shape()));
    }
    check_vector("bias_add", bias, input.shape()[1])?;
    let mut out = vec![0.0; input.len()];
    bias_add_into(input.data(), input.shape(), bias.data(), &mut out);
    Ok(Tensor::from_parts(
        input.shape().to_vec(),
        out,
        input.precision().join(bias.precision()),
    ))
}

pub(crate) fn bias_add_into(x: &[f32], shape: &[usize], bias: &[f32], out: &mut [f32]) {
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    for (i, (o, &v)) in out.iter_mut().zip(x).enumerate() {
        *o = v + bias[(i / inner) % c];
    }
}

/// Mean along `axis`; the axis is removed from the shape.
pub fn mean(input: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("mean", input, axis)?;
    let (outer, n, inner) = axis_split(input.shape(), axis);
    let x = input.data();
    let mut out = vec![0.0; outer * inner];
    for a in 0..outer {
        for b in 0..inner {
            let s: f64 = (0..n).map(|j| x[a * n * inner + j * inner + b] as f64).sum();
            out[a * inner + b] = (s / n as f64) as f32;
        }
    }
    let mut shape = input.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, out, input.precision()))
}

pub fn max_pool3d_shape(input: &[usize], kernel: [usize; 3], stride: [usize; 3]) -> Result<[usize; 5]> {
    if input.len() != 5 {
        return Err(rank_err("max_pool3d", 5, input));
    }
    if kernel.contains(&0) || stride.contains(&0) {
        return Err(TensorError::Invalid {
            op: "max_pool3d",
            msg: "kernel and stride must be positive".into(),
        });
    }
    let mut out = [input[0], input[1], 0, 0, 0];
    for a in 0..3 {
        if input[2 + a] < kernel[a] {
            return Err(TensorError::Invalid {
                op: "max_pool3d",
                msg: format!(
                    "axis {} of extent {} is smaller than kernel {}",
                    2 + a,
                    input[2 + a],
                    kernel[a]
                ),
            });
        }
        out[2 + a] = (input[2 + a] - kernel[a]) / stride[a] + 1;
    }
    Ok(out)
}

pub(crate) fn max_pool3d_into(x: &[f32], xs: [usize; 5], kernel: [usize; 3], stride: [usize; 3], out: &mut [f32]) {
    let os = max_pool3d_shape(&xs, kernel, stride).expect("validated by caller");
    let [n, c, d, h, w] = xs;
    let [_, _, od, oh, ow] = os;
    let mut idx = 0;
    for nc in 0..n * c {
        let xb = &x[nc * d * h * w..(nc + 1) * d * h * w];
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut m = f32::NEG_INFINITY;
                    for a in 0..kernel[0] {
                        for b in 0..kernel[1] {
                            let row = ((z * stride[0] + a) * h + y * stride[1] + b) * w;
                            for cc in 0..kernel[2] {
                                let v = xb[row + xx * stride[2] + cc];
                                if v > m || v.is_nan() {
                                    m = v;
                                }
                            }
                        }
                    }
                    out[idx] = m;
                    idx += 1;
                }
            }
        }
    }
}

/// Max pooling without padding; output extents use floor arithmetic.
pub fn max_pool3d(input: &Tensor, kernel: [usize; 3], stride: [usize; 3]) -> Result<Tensor> {
    let os = max_pool3d_shape(input.shape(), kernel, stride)?;
    let mut out = vec![0.0; os.iter().product()];
    max_pool3d_into(input.data(), shape5(input.shape()), kernel, stride, &mut out);
    Ok(Tensor::from_parts(os.to_vec(), out, input.precision()))
}

pub(crate) fn global_avg_pool_into(x: &[f32], nc: usize, out: &mut [f32]) {
    let inner = x.len() / nc;
    for (o, chunk) in out.iter_mut().zip(x.chunks(inner)) {
        *o = (chunk.iter().map(|&v| v as f64).sum::<f64>() / inner as f64) as f32;
    }
}

/// Averages every spatio-temporal position: `[N, C, ...]` → `[N, C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    if input.rank() < 3 {
        return Err(rank_err("global_avg_pool", 3, input.shape()));
    }
    let (n, c) = (input.shape()[0], input.shape()[1]);
    let mut out = vec![0.0; n * c];
    global_avg_pool_into(input.data(), n * c, &mut out);
    Ok(Tensor::from_parts(vec![n, c], out, input.precision()))
}

/// Plain matrix product `[M, K] x [K, N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(rank_err("matmul", 2, a.shape()));
    }
    if b.rank() != 2 {
        return Err(rank_err("matmul", 2, b.shape()));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(TensorError::AxisMismatch {
            op: "matmul",
            axis: "inner".into(),
            expected: k,
            actual: k2,
        });
    }
    let (x, y) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let acc: f64 = (0..k).map(|p| x[i * k + p] as f64 * y[p * n + j] as f64).sum();
            out[i * n + j] = acc as f32;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out, a.precision().join(b.precision())))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(rank_err("transpose", 2, a.shape()));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let x = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out, a.precision()))
}

/// Concatenates tensors along `axis`; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| TensorError::Invalid {
        op: "concat",
        msg: "no inputs".into(),
    })?;
    check_axis("concat", first, axis)?;
    let mut precision = Precision::F32;
    for p in parts {
        precision = precision.join(p.precision());
        let same = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!(
                    "shape {:?} incompatible with {:?} on axis {axis}",
                    p.shape(),
                    first.shape()
                ),
            });
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for a in 0..outer {
        for p in parts {
            let n = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[a * n..(a + 1) * n]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out, precision))
}

/// Weights of an embedded-Gaussian non-local block over `C` channels with `Ci` inner channels.
#[derive(Debug, Clone, Copy)]
pub struct NonLocalWeights<'a> {
    /// `[Ci, C]` each, with `[Ci]` biases.
    pub theta: (&'a [f32], &'a [f32]),
    pub phi: (&'a [f32], &'a [f32]),
    pub g: (&'a [f32], &'a [f32]),
    /// `[C, Ci]` with a `[C]` bias.
    pub out: (&'a [f32], &'a [f32]),
    pub inner: usize,
}

/// `out = x + W_out · (softmax(θᵀφ) gᵀ)ᵀ + b_out` for each batch item of `x = [N, C, P]`.
pub(crate) fn nonlocal_into(x: &[f32], n: usize, c: usize, p: usize, wts: &NonLocalWeights<'_>, out: &mut [f32]) {
    let ci = wts.inner;
    let project = |w: &[f32], b: &[f32], xs: &[f32], rows: usize, cols: usize| -> Vec<f32> {
        // w: [rows, cols], xs: [cols, p] -> [rows, p]
        let mut r = vec![0.0; rows * p];
        for i in 0..rows {
            for q in 0..p {
                let acc: f64 = (0..cols).map(|k| w[i * cols + k] as f64 * xs[k * p + q] as f64).sum();
                r[i * p + q] = acc as f32 + b[i];
            }
        }
        r
    };
    for ni in 0..n {
        let xn = &x[ni * c * p..(ni + 1) * c * p];
        let theta = project(wts.theta.0, wts.theta.1, xn, ci, c);
        let phi = project(wts.phi.0, wts.phi.1, xn, ci, c);
        let g = project(wts.g.0, wts.g.1, xn, ci, c);
        // affinity[p, q] = Σ_i θ[i, p] φ[i, q]
        let mut aff = vec![0.0f32; p * p];
        for a in 0..p {
            for b in 0..p {
                let acc: f64 = (0..ci).map(|i| theta[i * p + a] as f64 * phi[i * p + b] as f64).sum();
                aff[a * p + b] = acc as f32;
            }
        }
        softmax_rows_in_place(&mut aff, p);
        // y[i, a] = Σ_b aff[a, b] g[i, b]
        let mut y = vec![0.0f32; ci * p];
        for i in 0..ci {
            for a in 0..p {
                let acc: f64 = (0..p).map(|b| aff[a * p + b] as f64 * g[i * p + b] as f64).sum();
                y[i * p + a] = acc as f32;
            }
        }
        let z = project(wts.out.0, wts.out.1, &y, c, ci);
        let on = &mut out[ni * c * p..(ni + 1) * c * p];
        for ((o, &xv), &zv) in on.iter_mut().zip(xn).zip(&z) {
            *o = xv + zv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv3d_zero_input_gives_zero() {
        let x = Tensor::zeros(&[1, 2, 3, 4, 4]);
        let w = Tensor::full(&[3, 2, 2, 2, 2], 0.7);
        let b = Tensor::zeros(&[3]);
        let y = conv3d(&x, &w, Some(&b), &Conv3dSpec::default()).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv3d_identity_kernel() {
        let x = Tensor::new(vec![1, 1, 2, 3, 3], (0..18).map(|v| v as f32 - 4.0).collect()).unwrap();
        let w = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
        let y = conv3d(&x, &w, None, &Conv3dSpec::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv3d_names_channel_axis_on_mismatch() {
        let x = Tensor::zeros(&[1, 2, 3, 3, 3]);
        let w = Tensor::zeros(&[1, 3, 1, 1, 1]);
        let err = conv3d(&x, &w, None, &Conv3dSpec::default()).unwrap_err();
        assert!(err.to_string().contains("channel"), "{err}");
    }

    #[test]
    fn conv3d_rejects_kernel_larger_than_input() {
        let x = Tensor::zeros(&[1, 1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 1, 3, 3]);
        assert!(conv3d(&x, &w, None, &Conv3dSpec::default()).is_err());
        let padded = Conv3dSpec::new([1; 3], [0, 1, 1]);
        assert_eq!(conv3d(&x, &w, None, &padded).unwrap().shape(), &[1, 1, 1, 2, 2]);
    }

    #[test]
    fn conv1d_hand_example() {
        let x = t(&[1, 5], &[1., 2., 3., 4., 5.]);
        let w = t(&[1, 1, 3], &[1., 0., 1.]);
        let y = conv1d_dilated(&x, &w, None, 2).unwrap();
        assert_eq!(y.data(), &[3., 4., 6., 2., 3.]);
    }

    #[test]
    fn conv1d_delta_kernel_is_identity() {
        let x = t(&[1, 5], &[1., 2., 3., 4., 5.]);
        let w = t(&[1, 1, 3], &[0., 1., 0.]);
        for dil in 1..5 {
            assert_eq!(conv1d_dilated(&x, &w, None, dil).unwrap().data(), x.data());
        }
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        let x = t(&[1, 5], &[1., 2., 3., 4., 5.]);
        let w = t(&[1, 1, 2], &[1., 1.]);
        assert!(matches!(
            conv1d_dilated(&x, &w, None, 1),
            Err(TensorError::Invalid { .. })
        ));
    }

    #[test]
    fn conv1d_zero_input() {
        let x = Tensor::zeros(&[2, 6]);
        let w = Tensor::full(&[3, 2, 3], 1.5);
        assert!(conv1d_dilated(&x, &w, None, 2)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn linear_examples() {
        let x = t(&[4], &[1., 2., 3., 4.]);
        let w = t(&[1, 4], &[1., 1., 1., 1.]);
        let b = t(&[1], &[1.]);
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[11.]);

        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let x2 = t(&[3, 2], &[1., -2., 3., 4., 0.5, 6.]);
        assert_eq!(linear(&x2, &eye, Some(&Tensor::zeros(&[2]))).unwrap(), x2);

        let zero = Tensor::zeros(&[2, 2]);
        let bias = t(&[2], &[0.25, -3.0]);
        let y = linear(&x2, &zero, Some(&bias)).unwrap();
        assert!(y.data().chunks(2).all(|r| r == [0.25, -3.0]));

        assert!(linear(&x2, &t(&[1, 3], &[1., 1., 1.]), None).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&t(&[2], &[0., 0.]), 0).unwrap().data(), &[0.5, 0.5]);
        assert_eq!(softmax(&t(&[2], &[1000., 1000.]), 0).unwrap().data(), &[0.5, 0.5]);
        let y = softmax(&t(&[2], &[std::f32::consts::LN_2, 0.]), 0).unwrap();
        assert_abs_diff_eq!(y.data()[0], 2.0 / 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(y.data()[1], 1.0 / 3.0, epsilon = 1e-6);
    }

    #[test]
    fn softmax_propagates_nan() {
        let y = softmax(&t(&[3], &[1., f32::NAN, 0.]), 0).unwrap();
        assert!(y.data().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn softmax_along_inner_axis() {
        let y = softmax(&t(&[2, 2], &[0., 0., 5., 5.]), 0).unwrap();
        // columns [0,5] -> each column sums to one
        assert_abs_diff_eq!(y.data()[0] + y.data()[2], 1.0, epsilon = 1e-6);
        assert!(softmax(&y, 2).is_err());
    }

    #[test]
    fn l2_examples() {
        let y = l2_magnitude(&t(&[2, 2], &[3., 4., 0., 0.])).unwrap();
        assert_eq!(y.data(), &[5., 0.]);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk(&t(&[3], &[0.1, 0.9, 0.5]), 2).unwrap().0, vec![1, 2]);
        assert_eq!(topk(&t(&[3], &[1., 1., 0.]), 1).unwrap().0, vec![0]);
        let (idx, vals) = topk(&t(&[4], &[2., 7., -1., 3.]), 4).unwrap();
        assert_eq!(idx, vec![1, 3, 0, 2]);
        assert_eq!(vals, vec![7., 3., 2., -1.]);
        assert!(topk(&t(&[3], &[1., 2., 3.]), 0).is_err());
        assert!(topk(&t(&[3], &[1., 2., 3.]), 4).is_err());
    }

    #[test]
    fn elementwise_suite() {
        assert_eq!(relu(&t(&[2], &[-1., 2.])).data(), &[0., 2.]);
        assert_eq!(mean(&t(&[2], &[2., 4.]), 0).unwrap().data(), &[3.]);
        assert_eq!(mul_scalar(&t(&[2], &[2., 4.]), 0.5).data(), &[1., 2.]);
        assert_eq!(
            add(&t(&[2], &[2., 4.]), &Tensor::scalar(1.0)).unwrap().data(),
            &[3., 5.]
        );
        assert!(add(&t(&[2], &[2., 4.]), &t(&[3], &[1., 1., 1.])).is_err());
        let c = Tensor::full(&[1, 2, 4, 4, 4], 3.25);
        let p = max_pool3d(&c, [2, 2, 2], [2, 2, 2]).unwrap();
        assert_eq!(p.shape(), &[1, 2, 2, 2, 2]);
        assert!(p.data().iter().all(|&v| v == 3.25));
        let g = global_avg_pool(&c).unwrap();
        assert_eq!(g.shape(), &[1, 2]);
        assert_eq!(g.data(), &[3.25, 3.25]);
    }

    #[test]
    fn max_pool_floor_arithmetic() {
        let x = Tensor::new(vec![1, 1, 1, 1, 5], vec![1., 5., 2., 4., 9.]).unwrap();
        let p = max_pool3d(&x, [1, 1, 2], [1, 1, 2]).unwrap();
        assert_eq!(p.data(), &[5., 4.]);
    }

    #[test]
    fn matmul_transpose_concat() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let at = transpose(&a).unwrap();
        assert_eq!(at.data(), &[1., 4., 2., 5., 3., 6.]);
        let p = matmul(&a, &at).unwrap();
        assert_eq!(p.data(), &[14., 32., 32., 77.]);
        let c = concat(&[&a, &a], 1).unwrap();
        assert_eq!(c.shape(), &[2, 6]);
        assert_eq!(&c.data()[..6], &[1., 2., 3., 1., 2., 3.]);
    }

    #[test]
    fn ops_preserve_f16_tag() {
        let x = Tensor::with_precision(vec![1, 3], vec![0.1, 0.2, 0.3], Precision::F16).unwrap();
        let w = t(&[2, 3], &[0.3, 0.1, 0.7, 1.1, -0.4, 0.9]);
        let y = linear(&x, &w, None).unwrap();
        assert_eq!(y.precision(), Precision::F16);
        for &v in y.data() {
            assert_eq!(super::super::half::round_f16(v), v);
        }
        assert_eq!(softmax(&x, 1).unwrap().precision(), Precision::F16);
        assert_eq!(relu(&x).precision(), Precision::F16);
    }
}
