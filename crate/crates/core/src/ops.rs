//! Differentiable operators recorded on a [`Tape`].

use crate::error::{dim_err, Result};
use crate::tape::{BackwardContext, Operation, Tape, Var};
use crate::tensor::{axpy, dot, Tensor};

fn grad_if(needed: bool, f: impl FnOnce() -> Tensor) -> Option<Tensor> {
    needed.then(f)
}

/// Output length of a strided, padded window sweep.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Range of output positions whose tap `k` lands inside `0..input`.
fn valid_range(input: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o * stride + k - pad in [0, input)
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if input + pad > k {
        ((input + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    /// Visits every (input index, kernel index, output index) triple.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let g = *self;
        for co in 0..g.c_out {
            for ci in 0..g.c_in {
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(g.h, g.oh, ky, g.stride, g.pad);
                    for kx in 0..g.kw {
                        let (ox0, ox1) = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let k_idx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let in_row = (ci * g.h + iy) * g.w;
                            let out_row = (co * g.oh + oy) * g.ow;
                            f(k_idx, in_row + ox0 * g.stride + kx - g.pad, out_row + ox0, ox1 - ox0);
                        }
                    }
                }
            }
        }
    }
}

struct Conv2d {
    geom: ConvGeom,
    has_bias: bool,
}

impl Operation for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        let g = self.geom;
        let input = ctx.inputs[0].data();
        let kernel = ctx.inputs[1].data();
        let go = ctx.grad_output.data();
        let s = g.stride;
        let mut gin = ctx.needs_grad[0].then(|| Tensor::zeros(ctx.inputs[0].shape()));
        let mut gk = ctx.needs_grad[1].then(|| Tensor::zeros(ctx.inputs[1].shape()));
        g.for_each_tap(|k_idx, in_start, out_start, n| {
            let gout = &go[out_start..out_start + n];
            if let Some(gin) = gin.as_mut() {
                let w = kernel[k_idx];
                let gi = gin.data_mut();
                for (j, &v) in gout.iter().enumerate() {
                    gi[in_start + j * s] += w * v;
                }
            }
            if let Some(gk) = gk.as_mut() {
                let mut acc = 0.0;
                for (j, &v) in gout.iter().enumerate() {
                    acc += v * input[in_start + j * s];
                }
                gk.data_mut()[k_idx] += acc;
            }
        });
        let mut out = vec![gin, gk];
        if self.has_bias {
            out.push(grad_if(ctx.needs_grad[2], || {
                let plane = g.oh * g.ow;
                Tensor::from_fn(&[g.c_out], |co| go[co * plane..(co + 1) * plane].iter().sum())
            }));
        }
        Ok(out)
    }
}

struct Affine {
    rows: usize,
    n_in: usize,
    n_out: usize,
}

impl Operation for Affine {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        let (r, n, m) = (self.rows, self.n_in, self.n_out);
        let x = ctx.inputs[0].data();
        let w = ctx.inputs[1].data();
        let go = ctx.grad_output.data();
        let gx = grad_if(ctx.needs_grad[0], || {
            let mut gx = Tensor::zeros(ctx.inputs[0].shape());
            let d = gx.data_mut();
            for i in 0..r {
                let row = &mut d[i * n..(i + 1) * n];
                for j in 0..m {
                    let g = go[i * m + j];
                    if g != 0.0 {
                        axpy(g, &w[j * n..(j + 1) * n], row);
                    }
                }
            }
            gx
        });
        let gw = grad_if(ctx.needs_grad[1], || {
            let mut gw = Tensor::zeros(ctx.inputs[1].shape());
            let d = gw.data_mut();
            for i in 0..r {
                let xi = &x[i * n..(i + 1) * n];
                for j in 0..m {
                    let g = go[i * m + j];
                    if g != 0.0 {
                        axpy(g, xi, &mut d[j * n..(j + 1) * n]);
                    }
                }
            }
            gw
        });
        let gb = grad_if(ctx.needs_grad[2], || {
            Tensor::from_fn(&[m], |j| (0..r).map(|i| go[i * m + j]).sum())
        });
        Ok(vec![gx, gw, gb])
    }
}

struct Relu;

impl Operation for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0].data();
        let g = ctx.grad_output.data();
        Ok(vec![Some(Tensor::from_fn(ctx.inputs[0].shape(), |i| {
            if x[i] > 0.0 {
                g[i]
            } else {
                0.0
            }
        }))])
    }
}

struct Sigmoid;

impl Operation for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        let y = ctx.output.data();
        let g = ctx.grad_output.data();
        Ok(vec![Some(Tensor::from_fn(ctx.output.shape(), |i| {
            g[i] * y[i] * (1.0 - y[i])
        }))])
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Softmax {
    width: usize,
}

impl Operation for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        let y = ctx.output.data();
        let g = ctx.grad_output.data();
        let mut out = Tensor::zeros(ctx.output.shape());
        for ((yr, gr), or) in y
            .chunks(self.width)
            .zip(g.chunks(self.width))
            .zip(out.data_mut().chunks_mut(self.width))
        {
            let s = dot(yr, gr);
            for k in 0..self.width {
                or[k] = yr[k] * (gr[k] - s);
            }
        }
        Ok(vec![Some(out)])
    }
}

struct Mul;

impl Operation for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let g = ctx.grad_output.data();
        let shape = ctx.output.shape();
        Ok(vec![
            grad_if(ctx.needs_grad[0], || Tensor::from_fn(shape, |i| g[i] * b[i])),
            grad_if(ctx.needs_grad[1], || Tensor::from_fn(shape, |i| g[i] * a[i])),
        ])
    }
}

struct Add {
    arity: usize,
}

impl Operation for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok((0..self.arity)
            .map(|i| grad_if(ctx.needs_grad[i], || ctx.grad_output.clone()))
            .collect())
    }
}

struct Scale(f64);

impl Operation for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(ctx.grad_output.scale(self.0))])
    }
}

struct Sum;

impl Operation for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(
            ctx.inputs[0].shape(),
            ctx.grad_output.item(),
        ))])
    }
}

struct MaxPool2d {
    argmax: Vec<usize>,
}

impl Operation for MaxPool2d {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        let mut gin = Tensor::zeros(ctx.inputs[0].shape());
        let d = gin.data_mut();
        for (&src, &g) in self.argmax.iter().zip(ctx.grad_output.data()) {
            d[src] += g;
        }
        Ok(vec![Some(gin)])
    }
}

struct Reshape;

impl Operation for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(
            ctx.grad_output.clone().reshaped(ctx.inputs[0].shape())?,
        )])
    }
}

struct Concat {
    outer: usize,
    inner: Vec<usize>,
}

impl Operation for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        let g = ctx.grad_output.data();
        let total: usize = self.inner.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.inner.len());
        for (k, &inner) in self.inner.iter().enumerate() {
            out.push(grad_if(ctx.needs_grad[k], || {
                let mut t = Tensor::zeros(ctx.inputs[k].shape());
                let d = t.data_mut();
                for o in 0..self.outer {
                    let src = o * total + offset;
                    d[o * inner..(o + 1) * inner].copy_from_slice(&g[src..src + inner]);
                }
                t
            }));
            offset += inner;
        }
        Ok(out)
    }
}

struct IndexSelect {
    indices: Vec<usize>,
}

impl Operation for IndexSelect {
    fn name(&self) -> &'static str {
        "index_select"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        let mut gin = Tensor::zeros(ctx.inputs[0].shape());
        let d = gin.data_mut();
        for (&src, &g) in self.indices.iter().zip(ctx.grad_output.data()) {
            d[src] += g;
        }
        Ok(vec![Some(gin)])
    }
}

/// Two-tap linear interpolation weights for one resized axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Taps {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Pixel-center aligned resampling of an axis of length `input` to `output`,
/// clamping at the borders.
pub(crate) fn resize_taps(input: usize, output: usize) -> Vec<Taps> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            let w1 = src - i0 as f64;
            Taps {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

struct ResizeBilinear {
    planes: usize,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
}

impl ResizeBilinear {
    fn taps(&self) -> (Vec<Taps>, Vec<Taps>) {
        (
            resize_taps(self.in_hw.0, self.out_hw.0),
            resize_taps(self.in_hw.1, self.out_hw.1),
        )
    }
}

impl Operation for ResizeBilinear {
    fn name(&self) -> &'static str {
        "resize_bilinear"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Result<Vec<Option<Tensor>>> {
        let (ty, tx) = self.taps();
        let (ih, iw) = self.in_hw;
        let (oh, ow) = self.out_hw;
        let g = ctx.grad_output.data();
        let mut gin = Tensor::zeros(ctx.inputs[0].shape());
        let d = gin.data_mut();
        for p in 0..self.planes {
            let src = &mut d[p * ih * iw..(p + 1) * ih * iw];
            for (y, ty) in ty.iter().enumerate() {
                for (x, tx) in tx.iter().enumerate() {
                    let v = g[(p * oh + y) * ow + x];
                    src[ty.i0 * iw + tx.i0] += ty.w0 * tx.w0 * v;
                    src[ty.i0 * iw + tx.i1] += ty.w0 * tx.w1 * v;
                    src[ty.i1 * iw + tx.i0] += ty.w1 * tx.w0 * v;
                    src[ty.i1 * iw + tx.i1] += ty.w1 * tx.w1 * v;
                }
            }
        }
        Ok(vec![Some(gin)])
    }
}

/// Bilinear resampling of the trailing two axes of `planes` stacked maps.
pub(crate) fn resize_bilinear_data(
    data: &[f64],
    planes: usize,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
) -> Vec<f64> {
    let ty = resize_taps(in_hw.0, out_hw.0);
    let tx = resize_taps(in_hw.1, out_hw.1);
    let (_, iw) = in_hw;
    let mut out = Vec::with_capacity(planes * out_hw.0 * out_hw.1);
    for p in 0..planes {
        let src = &data[p * in_hw.0 * iw..(p + 1) * in_hw.0 * iw];
        for ty in &ty {
            for tx in &tx {
                out.push(
                    ty.w0 * (tx.w0 * src[ty.i0 * iw + tx.i0] + tx.w1 * src[ty.i0 * iw + tx.i1])
                        + ty.w1
                            * (tx.w0 * src[ty.i1 * iw + tx.i0] + tx.w1 * src[ty.i1 * iw + tx.i1]),
                );
            }
        }
    }
    out
}

impl Tape {
    /// 2-D cross-correlation of a `[C_in, H, W]` input with `[C_out, C_in, kh, kw]`
    /// kernels and optional `[C_out]` bias, zero padded.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.value(input).shape(), self.value(kernel).shape());
        if xs.len() != 3 || ks.len() != 4 {
            return dim_err(format!("conv2d expects [C,H,W] and [O,C,kh,kw], got {xs:?} and {ks:?}"));
        }
        if xs[0] != ks[1] {
            return dim_err(format!(
                "conv2d input has {} channels but kernel expects {}",
                xs[0], ks[1]
            ));
        }
        if stride == 0 || ks[2] > xs[1] + 2 * pad || ks[3] > xs[2] + 2 * pad {
            return dim_err(format!(
                "conv2d kernel {ks:?} does not fit input {xs:?} with pad {pad}, stride {stride}"
            ));
        }
        let geom = ConvGeom {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            c_out: ks[0],
            kh: ks[2],
            kw: ks[3],
            oh: conv_out_len(xs[1], ks[2], stride, pad),
            ow: conv_out_len(xs[2], ks[3], stride, pad),
            stride,
            pad,
        };
        let mut out = vec![0.0; geom.c_out * geom.oh * geom.ow];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [geom.c_out] {
                return dim_err(format!("conv2d bias shape {:?}", bv.shape()));
            }
            let plane = geom.oh * geom.ow;
            for (co, &bias) in bv.data().iter().enumerate() {
                out[co * plane..(co + 1) * plane].fill(bias);
            }
        }
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        geom.for_each_tap(|k_idx, in_start, out_start, n| {
            let w = k[k_idx];
            let o = &mut out[out_start..out_start + n];
            if stride == 1 {
                axpy(w, &x[in_start..in_start + n], o);
            } else {
                for (j, ov) in o.iter_mut().enumerate() {
                    *ov += w * x[in_start + j * stride];
                }
            }
        });
        let value = Tensor::new(vec![geom.c_out, geom.oh, geom.ow], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.record(
            value,
            inputs,
            Box::new(Conv2d {
                geom,
                has_bias: bias.is_some(),
            }),
        ))
    }

    /// `weight · input + bias` for an `[n]` vector or each row of an `[R, n]` matrix.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape();
        let bs = self.value(bias).shape();
        let (rows, n_in) = match xs.as_slice() {
            [n] => (1, *n),
            [r, n] => (*r, *n),
            _ => return dim_err(format!("affine input must be rank 1 or 2, got {xs:?}")),
        };
        if ws.len() != 2 || ws[1] != n_in || bs != [ws[0]] {
            return dim_err(format!(
                "affine weight {ws:?} / bias {bs:?} incompatible with input {xs:?}"
            ));
        }
        let n_out = ws[0];
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(rows * n_out);
        for i in 0..rows {
            let xi = &x[i * n_in..(i + 1) * n_in];
            for j in 0..n_out {
                out.push(dot(&w[j * n_in..(j + 1) * n_in], xi) + b[j]);
            }
        }
        let shape = if xs.len() == 1 { vec![n_out] } else { vec![rows, n_out] };
        let value = Tensor::new(shape, out)?;
        Ok(self.record(
            value,
            vec![input, weight, bias],
            Box::new(Affine { rows, n_in, n_out }),
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(0.0));
        self.record(value, vec![input], Box::new(Relu))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(sigmoid);
        self.record(value, vec![input], Box::new(Sigmoid))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let Some(&width) = x.shape().last() else {
            return dim_err("softmax of a scalar");
        };
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(width) {
            softmax_in_place(row);
        }
        Ok(self.record(out, vec![input], Box::new(Softmax { width })))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.check_same_shape(bv)?;
        let value = Tensor::from_fn(av.shape(), |i| av.data()[i] * bv.data()[i]);
        Ok(self.record(value, vec![a, b], Box::new(Mul)))
    }

    /// Elementwise sum of equally shaped operands.
    pub fn add(&mut self, terms: &[Var]) -> Result<Var> {
        let Some(&first) = terms.first() else {
            return dim_err("add of zero terms");
        };
        let mut value = self.value(first).clone();
        for &t in &terms[1..] {
            value.add_assign(self.value(t))?;
        }
        Ok(self.record(
            value,
            terms.to_vec(),
            Box::new(Add { arity: terms.len() }),
        ))
    }

    pub fn scale(&mut self, input: Var, c: f64) -> Var {
        let value = self.value(input).scale(c);
        self.record(value, vec![input], Box::new(Scale(c)))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        self.record(value, vec![input], Box::new(Sum))
    }

    /// Non-overlapping max pooling over the trailing two axes.
    pub fn max_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape();
        if shape.len() < 2 || window == 0 {
            return dim_err(format!("max_pool2d needs [..., H, W], got {shape:?}"));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h % window != 0 || w % window != 0 {
            return dim_err(format!("window {window} does not divide {h}x{w}"));
        }
        let (oh, ow) = (h / window, w / window);
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let data = x.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        let row = base + (oy * window + dy) * w + ox * window;
                        for idx in row..row + window {
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([oh, ow]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.record(value, vec![input], Box::new(MaxPool2d { argmax })))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshaped(shape)?;
        Ok(self.record(value, vec![input], Box::new(Reshape)))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of zero tensors");
        };
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let outer: usize = base[..axis].iter().product();
        let mut inner = Vec::with_capacity(parts.len());
        let mut axis_len = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return dim_err(format!("concat shapes {base:?} and {s:?} disagree"));
            }
            axis_len += s[axis];
            inner.push(s[axis..].iter().product::<usize>());
        }
        let total: usize = inner.iter().sum();
        let mut out = vec![0.0; outer * total];
        let mut offset = 0;
        for (&p, &n) in parts.iter().zip(&inner) {
            let d = self.value(p).data();
            for o in 0..outer {
                out[o * total + offset..o * total + offset + n]
                    .copy_from_slice(&d[o * n..(o + 1) * n]);
            }
            offset += n;
        }
        let mut shape = base;
        shape[axis] = axis_len;
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, parts.to_vec(), Box::new(Concat { outer, inner })))
    }

    /// Gathers flat elements: `out[i] = input[indices[i]]`, shaped as `shape`.
    ///
    /// Covers row selection, permutation and channel replication.
    pub fn index_select(&mut self, input: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let x = self.value(input).data();
        if shape.iter().product::<usize>() != indices.len() {
            return dim_err(format!(
                "{} indices cannot fill shape {shape:?}",
                indices.len()
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return dim_err(format!("index {bad} out of range for {} elements", x.len()));
        }
        let value = Tensor::new(shape.to_vec(), indices.iter().map(|&i| x[i]).collect())?;
        Ok(self.record(value, vec![input], Box::new(IndexSelect { indices })))
    }

    /// Selects whole rows of a `[K, ...]` tensor.
    pub fn select_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.is_empty() {
            return dim_err("select_rows of a scalar");
        }
        let width: usize = shape[1..].iter().product();
        let mut indices = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= shape[0] {
                return dim_err(format!("row {r} out of range for {shape:?}"));
            }
            indices.extend(r * width..(r + 1) * width);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        self.index_select(input, indices, &out_shape)
    }

    /// Bilinear resampling (pixel-center aligned, edge clamped) of the trailing
    /// two axes.
    pub fn resize_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape();
        if shape.len() < 2 || out_h == 0 || out_w == 0 {
            return dim_err(format!("resize needs [..., H, W], got {shape:?}"));
        }
        let in_hw = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let data = resize_bilinear_data(x.data(), planes, in_hw, (out_h, out_w));
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([out_h, out_w]);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.record(
            value,
            vec![input],
            Box::new(ResizeBilinear {
                planes,
                in_hw,
                out_hw: (out_h, out_w),
            }),
        ))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
