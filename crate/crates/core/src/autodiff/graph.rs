use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::kernels::{col2im, im2col, matmul, matmul_a_bt, matmul_at_b, Window};
use super::{Real, Shape, Tensor};
use crate::error::{invalid, Result};
use crate::imaging::{linear_taps, LinearTap};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, padding: usize },
    ConvTranspose2d { x: Var, w: Var, b: Var, stride: usize },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    LogSigmoid { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Abs { x: Var },
    Concat { a: Var, b: Var },
    MaxPool2x { x: Var, argmax: Vec<u32> },
    Sum { x: Var },
    GlobalAvgPool { x: Var },
    Resize { x: Var },
    PadReplicate { x: Var },
    Crop { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(invalid(format!("{op}: shape mismatch {a} vs {b}")));
    }
    Ok(())
}

fn t<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant leaf; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn parameter(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First node holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<Var> {
        self.nodes.iter().position(|n| !n.value.all_finite()).map(Var)
    }

    /// Fingerprint of the piecewise branches taken by this evaluation: the
    /// sign of every LeakyReLU and abs input and every max-pool winner. Two
    /// evaluations with equal fingerprints lie on the same smooth piece.
    pub fn branch_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::LeakyRelu { x, .. } | Op::Abs { x } => {
                    i.hash(&mut h);
                    for v in self.value(*x).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2x { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn check_bias(&self, op: &str, b: Var, channels: usize) -> Result<()> {
        let bs = self.shape(b);
        if bs != Shape::new(1, channels, 1, 1) {
            return Err(invalid(format!(
                "{op}: bias shape {bs} should be (1, {channels}, 1, 1)"
            )));
        }
        Ok(())
    }

    /// Cross-correlation with weights `(c_out, c_in, k, k)` and bias `(1, c_out, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.c != xs.c || ws.h != ws.w {
            return Err(invalid(format!(
                "conv2d: input {xs} incompatible with weight {ws} (needs square kernel over {} channels)",
                xs.c
            )));
        }
        self.check_bias("conv2d", b, ws.n)?;
        let g = Window::new(xs.c, xs.h, xs.w, ws.h, stride, padding).ok_or_else(|| {
            invalid(format!(
                "conv2d: {}x{} input with kernel {} stride {stride} padding {padding} has no output",
                xs.h, xs.w, ws.h
            ))
        })?;
        let out_shape = Shape::new(xs.n, ws.n, g.oh, g.ow);
        let mut out = Tensor::zeros(out_shape);
        let mut cols = vec![T::zero(); g.rows() * g.cols()];
        {
            let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
            for n in 0..xs.n {
                im2col(xv.item(n), &g, &mut cols);
                let o = out.item_mut(n);
                matmul(ws.n, g.rows(), g.cols(), wv.data(), &cols, o, false);
                for (co, plane) in o.chunks_mut(g.cols()).enumerate() {
                    let bias = bv.data()[co];
                    plane.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, padding }, rg))
    }

    /// Transposed convolution without padding; weights `(c_in, c_out, k, k)`.
    /// Output extent is `(h - 1) * stride + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.n != xs.c || ws.h != ws.w || stride == 0 {
            return Err(invalid(format!(
                "conv_transpose2d: input {xs} incompatible with weight {ws} stride {stride}"
            )));
        }
        self.check_bias("conv_transpose2d", b, ws.c)?;
        let k = ws.h;
        let (oh, ow) = ((xs.h - 1) * stride + k, (xs.w - 1) * stride + k);
        let g = Window::new(ws.c, oh, ow, k, stride, 0).expect("valid transposed geometry");
        debug_assert_eq!((g.oh, g.ow), (xs.h, xs.w));
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.c, oh, ow));
        let mut cols = vec![T::zero(); g.rows() * g.cols()];
        {
            let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
            for n in 0..xs.n {
                matmul_at_b(g.rows(), xs.c, g.cols(), wv.data(), xv.item(n), &mut cols, false);
                let o = out.item_mut(n);
                col2im(&cols, &g, o);
                for (co, plane) in o.chunks_mut(oh * ow).enumerate() {
                    let bias = bv.data()[co];
                    plane.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, stride }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = t::<T>(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        let rg = self.rg(&[x]);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    /// `log(sigmoid(x))` evaluated as `min(x, 0) - ln(1 + exp(-|x|))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.min(T::zero()) - (-v.abs()).exp().ln_1p());
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSigmoid { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let out = zip(self.value(a), self.value(b).data(), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).scale(t(factor));
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        let rg = self.rg(&[x]);
        self.push(out, Op::Abs { x }, rg)
    }

    /// Concatenates along channels: `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(invalid(format!("concat_channels: {sa} vs {sb}")));
        }
        let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..sa.n {
            data.extend_from_slice(self.value(a).item(n));
            data.extend_from_slice(self.value(b).item(n));
        }
        let out = Tensor::from_vec(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// 2x2 max pooling with stride 2; ties resolve to the first element in
    /// row-major window order.
    pub fn maxpool2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h % 2 != 0 || s.w % 2 != 0 || s.h == 0 || s.w == 0 {
            return Err(invalid(format!("maxpool2x needs even spatial size, got {s}")));
        }
        let (oh, ow) = (s.h / 2, s.w / 2);
        let shape = Shape::new(s.n, s.c, oh, ow);
        let mut out = Tensor::zeros(shape);
        let mut argmax = vec![0u32; shape.numel()];
        let xv = self.value(x).data();
        for p in 0..s.n * s.c {
            let base = p * s.h * s.w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * s.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    out.data_mut()[o] = xv[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool2x { x, argmax }, rg))
    }

    /// Sum of every element into a `(1, 1, 1, 1)` scalar, accumulated in f64.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(t(total)), Op::Sum { x }, rg)
    }

    /// Spatial mean per channel: `(n, c, h, w) -> (n, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let plane = s.plane();
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| t(p.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
            .collect();
        let out = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::GlobalAvgPool { x }, rg)
    }

    /// Differentiable half-pixel-centred bilinear resize.
    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        if h == 0 || w == 0 {
            return Err(invalid(format!("resize_bilinear to {h}x{w}")));
        }
        let s = self.shape(x);
        let (ty, tx) = (linear_taps(s.h, h), linear_taps(s.w, w));
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
        let mut rows = vec![T::zero(); s.h * w];
        let xv = self.value(x).data();
        for p in 0..s.n * s.c {
            let src = &xv[p * s.plane()..(p + 1) * s.plane()];
            for y in 0..s.h {
                for (ox, tap) in tx.iter().enumerate() {
                    rows[y * w + ox] = lerp(src[y * s.w + tap.lo], src[y * s.w + tap.hi], tap);
                }
            }
            let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
            for (oy, tap) in ty.iter().enumerate() {
                for ox in 0..w {
                    dst[oy * w + ox] = lerp(rows[tap.lo * w + ox], rows[tap.hi * w + ox], tap);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Resize { x }, rg))
    }

    /// Extends the bottom and right edges by repeating the last row/column.
    pub fn pad_replicate(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x);
        if h < s.h || w < s.w {
            return Err(invalid(format!("pad_replicate: {h}x{w} smaller than {s}")));
        }
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
        let xv = self.value(x).data();
        for p in 0..s.n * s.c {
            let src = &xv[p * s.plane()..(p + 1) * s.plane()];
            let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                let sy = y.min(s.h - 1);
                for x in 0..w {
                    dst[y * w + x] = src[sy * s.w + x.min(s.w - 1)];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::PadReplicate { x }, rg))
    }

    /// Keeps the top-left `h x w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x);
        if h > s.h || w > s.w || h == 0 || w == 0 {
            return Err(invalid(format!("crop: {h}x{w} outside {s}")));
        }
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
        let xv = self.value(x).data();
        for p in 0..s.n * s.c {
            for y in 0..h {
                let src = &xv[p * s.plane() + y * s.w..][..w];
                out.data_mut()[p * h * w + y * w..][..w].copy_from_slice(src);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Crop { x }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(invalid(format!("backward needs a scalar loss, got {ls}")));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, contribution: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, padding } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let geo = Window::new(xs.c, xs.h, xs.w, ws.h, *stride, *padding).expect("forward succeeded");
                let (rows, cols_n) = (geo.rows(), geo.cols());
                let mut cols = vec![T::zero(); rows * cols_n];
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let mut dx = need_x.then(|| Tensor::zeros(xs));
                let mut dw = need_w.then(|| Tensor::zeros(ws));
                let mut dcols = vec![T::zero(); rows * cols_n];
                for n in 0..xs.n {
                    let gn = g.item(n);
                    if let Some(dw) = dw.as_mut() {
                        im2col(self.value(*x).item(n), &geo, &mut cols);
                        matmul_a_bt(ws.n, cols_n, rows, gn, &cols, dw.data_mut(), true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        matmul_at_b(rows, ws.n, cols_n, self.value(*w).data(), gn, &mut dcols, false);
                        col2im(&dcols, &geo, dx.item_mut(n));
                    }
                }
                let db = channel_sums(g);
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                self.accumulate(grads, *b, db);
            }
            Op::ConvTranspose2d { x, w, b, stride } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let gs = g.shape();
                let geo = Window::new(ws.c, gs.h, gs.w, ws.h, *stride, 0).expect("forward succeeded");
                let (rows, cols_n) = (geo.rows(), geo.cols());
                let mut dcols = vec![T::zero(); rows * cols_n];
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let mut dx = need_x.then(|| Tensor::zeros(xs));
                let mut dw = need_w.then(|| Tensor::zeros(ws));
                for n in 0..xs.n {
                    im2col(g.item(n), &geo, &mut dcols);
                    if let Some(dx) = dx.as_mut() {
                        matmul(xs.c, rows, cols_n, self.value(*w).data(), &dcols, dx.item_mut(n), false);
                    }
                    if let Some(dw) = dw.as_mut() {
                        matmul_a_bt(xs.c, cols_n, rows, self.value(*x).item(n), &dcols, dw.data_mut(), true);
                    }
                }
                let db = channel_sums(g);
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                self.accumulate(grads, *b, db);
            }
            Op::LeakyRelu { x, slope } => {
                let s = t::<T>(*slope);
                let xv = self.value(*x).data();
                let d = zip(g, xv, |gv, v| if v > T::zero() { gv } else { gv * s });
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid { x } => {
                let d = zip(g, node.value.data(), |gv, y| gv * y * (T::one() - y));
                self.accumulate(grads, *x, d);
            }
            Op::LogSigmoid { x } => {
                let d = zip(g, self.value(*x).data(), |gv, v| gv * sigmoid(-v));
                self.accumulate(grads, *x, d);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let da = zip(g, self.value(*b).data(), |gv, v| gv * v);
                let db = zip(g, self.value(*a).data(), |gv, v| gv * v);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, g.scale(t(*factor)));
            }
            Op::Abs { x } => {
                let d = zip(g, self.value(*x).data(), |gv, v| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (mut da, mut db) = (Tensor::zeros(sa), Tensor::zeros(sb));
                for n in 0..sa.n {
                    let gi = g.item(n);
                    da.item_mut(n).copy_from_slice(&gi[..sa.item()]);
                    db.item_mut(n).copy_from_slice(&gi[sa.item()..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::MaxPool2x { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src as usize] += g.data()[o];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g.value()));
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let inv = t::<T>(1.0 / s.plane() as f64);
                let mut dx = Tensor::zeros(s);
                for (p, chunk) in dx.data_mut().chunks_mut(s.plane()).enumerate() {
                    let v = g.data()[p] * inv;
                    chunk.iter_mut().for_each(|d| *d = v);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Resize { x } => {
                let s = self.shape(*x);
                let gs = g.shape();
                let (h, w) = (gs.h, gs.w);
                let (ty, tx) = (linear_taps(s.h, h), linear_taps(s.w, w));
                let mut dx = Tensor::zeros(s);
                let mut rows = vec![T::zero(); s.h * w];
                for p in 0..s.n * s.c {
                    rows.iter_mut().for_each(|v| *v = T::zero());
                    let gp = &g.data()[p * h * w..(p + 1) * h * w];
                    for (oy, tap) in ty.iter().enumerate() {
                        let f = t::<T>(tap.frac as f64);
                        for ox in 0..w {
                            let gv = gp[oy * w + ox];
                            rows[tap.lo * w + ox] += gv * (T::one() - f);
                            rows[tap.hi * w + ox] += gv * f;
                        }
                    }
                    let dst = &mut dx.data_mut()[p * s.plane()..(p + 1) * s.plane()];
                    for y in 0..s.h {
                        for (ox, tap) in tx.iter().enumerate() {
                            let f = t::<T>(tap.frac as f64);
                            let gv = rows[y * w + ox];
                            dst[y * s.w + tap.lo] += gv * (T::one() - f);
                            dst[y * s.w + tap.hi] += gv * f;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::PadReplicate { x } => {
                let s = self.shape(*x);
                let gs = g.shape();
                let mut dx = Tensor::zeros(s);
                for p in 0..s.n * s.c {
                    let gp = &g.data()[p * gs.plane()..(p + 1) * gs.plane()];
                    let dst = &mut dx.data_mut()[p * s.plane()..(p + 1) * s.plane()];
                    for y in 0..gs.h {
                        let sy = y.min(s.h - 1);
                        for x in 0..gs.w {
                            dst[sy * s.w + x.min(s.w - 1)] += gp[y * gs.w + x];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Crop { x } => {
                let s = self.shape(*x);
                let gs = g.shape();
                let mut dx = Tensor::zeros(s);
                for p in 0..s.n * s.c {
                    for y in 0..gs.h {
                        let src = &g.data()[p * gs.plane() + y * gs.w..][..gs.w];
                        dx.data_mut()[p * s.plane() + y * s.w..][..gs.w].copy_from_slice(src);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn lerp<T: Real>(a: T, b: T, tap: &LinearTap) -> T {
    let f = T::from_f64_lossy(tap.frac as f64);
    a + f * (b - a)
}

fn zip<T: Real>(g: &Tensor<T>, other: &[T], f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(other).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_vec(g.shape(), data).expect("same length")
}

/// Sum over batch and space per channel, shaped like a bias.
fn channel_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let s = g.shape();
    let mut acc = vec![0f64; s.c];
    for n in 0..s.n {
        for (c, plane) in g.item(n).chunks(s.plane()).enumerate() {
            acc[c] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    Tensor::from_vec(Shape::new(1, s.c, 1, 1), acc.into_iter().map(T::from_f64_lossy).collect())
        .expect("bias shape")
}
