//! Differentiable ops on [`Var`].

use crate::graph::Var;
use crate::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast, gemm_into, matmul, Tensor,
};
use std::rc::Rc;

fn unary<'g>(
    x: Var<'g>,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'g> {
    let xv = x.value();
    let out = xv.map(f);
    let yv = Rc::new(out.clone());
    x.graph.custom(
        &[x],
        out,
        Box::new(move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(yv.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(g.shape().to_vec(), data))]
        }),
    )
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary<'g>(a: Var<'g>, b: Var<'g>, op: BinOp) -> Var<'g> {
    let (av, bv) = (a.value(), b.value());
    let out = match op {
        BinOp::Add => av.broadcast_zip(&bv, |x, y| x + y),
        BinOp::Sub => av.broadcast_zip(&bv, |x, y| x - y),
        BinOp::Mul => av.broadcast_zip(&bv, |x, y| x * y),
        BinOp::Div => av.broadcast_zip(&bv, |x, y| x / y),
    };
    a.graph.custom(
        &[a, b],
        out,
        Box::new(move |g, needs| {
            let out_shape = g.shape().to_vec();
            let sa = broadcast_strides(av.shape(), &out_shape);
            let sb = broadcast_strides(bv.shape(), &out_shape);
            let mut ga = needs[0].then(|| vec![0.0; av.numel()]);
            let mut gb = needs[1].then(|| vec![0.0; bv.numel()]);
            let (ad, bd, gd) = (av.data(), bv.data(), g.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
                let go = gd[o];
                let (da, db) = match op {
                    BinOp::Add => (go, go),
                    BinOp::Sub => (go, -go),
                    BinOp::Mul => (go * bd[ib], go * ad[ia]),
                    BinOp::Div => (go / bd[ib], -go * ad[ia] / (bd[ib] * bd[ib])),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += db;
                }
            });
            vec![
                ga.map(|d| Tensor::from_vec(av.shape().to_vec(), d)),
                gb.map(|d| Tensor::from_vec(bv.shape().to_vec(), d)),
            ]
        }),
    )
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'g> Var<'g> {
    pub fn add(self, other: Var<'g>) -> Var<'g> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        binary(self, other, BinOp::Div)
    }

    pub fn neg(self) -> Var<'g> {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(self, k: f64) -> Var<'g> {
        unary(self, move |x| x + k, |_, _| 1.0)
    }

    pub fn mul_scalar(self, k: f64) -> Var<'g> {
        unary(self, move |x| x * k, move |_, _| k)
    }

    /// `k - x`
    pub fn rsub_scalar(self, k: f64) -> Var<'g> {
        unary(self, move |x| k - x, |_, _| -1.0)
    }

    pub fn sqr(self) -> Var<'g> {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'g> {
        unary(self, f64::sqrt, |_, y| 0.5 / y)
    }

    /// Square root whose gradient is taken as 0 at the origin, for norms.
    pub fn safe_sqrt(self) -> Var<'g> {
        unary(self, f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn exp(self) -> Var<'g> {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    /// Subgradient 0 at the origin.
    pub fn abs(self) -> Var<'g> {
        unary(self, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn relu(self) -> Var<'g> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        unary(
            self,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(self) -> Var<'g> {
        unary(self, sigmoid_f64, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'g> {
        unary(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn softplus(self) -> Var<'g> {
        unary(self, softplus_f64, |x, _| sigmoid_f64(x))
    }

    pub fn sum_all(self) -> Var<'g> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        self.graph.custom(
            &[self],
            Tensor::scalar(xv.sum()),
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))]),
        )
    }

    pub fn mean_all(self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(self, axes: &[usize]) -> Var<'g> {
        let xv = self.value();
        let out = xv.sum_axes_keepdim(axes);
        let shape = xv.shape().to_vec();
        self.graph.custom(
            &[self],
            out,
            Box::new(move |g, _| vec![Some(g.expand(&shape))]),
        )
    }

    pub fn mean_axes(self, axes: &[usize]) -> Var<'g> {
        let shape = self.value().shape().to_vec();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).mul_scalar(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let xv = self.value();
        let old = xv.shape().to_vec();
        self.graph.custom(
            &[self],
            xv.reshape(shape.to_vec()),
            Box::new(move |g, _| vec![Some(g.reshape(old.clone()))]),
        )
    }

    /// Broadcasts size-1 dims up to `shape`.
    pub fn expand(self, shape: &[usize]) -> Var<'g> {
        let xv = self.value();
        let old = xv.shape().to_vec();
        assert_eq!(broadcast_shape(&old, shape), shape, "cannot expand {:?} to {:?}", old, shape);
        self.graph.custom(
            &[self],
            xv.expand(shape),
            Box::new(move |g, _| vec![Some(g.sum_to_shape(&old))]),
        )
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        self.graph.custom(
            &[self],
            xv.narrow(axis, start, len),
            Box::new(move |g, _| {
                let mut parts = Vec::new();
                let before = (start > 0).then(|| {
                    let mut s = shape.clone();
                    s[axis] = start;
                    Tensor::zeros(s)
                });
                let after_len = shape[axis] - start - len;
                let after = (after_len > 0).then(|| {
                    let mut s = shape.clone();
                    s[axis] = after_len;
                    Tensor::zeros(s)
                });
                if let Some(b) = before.as_ref() {
                    parts.push(b);
                }
                parts.push(g);
                if let Some(a) = after.as_ref() {
                    parts.push(a);
                }
                vec![Some(Tensor::concat(&parts, axis))]
            }),
        )
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs, axis);
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        parts[0].graph.custom(
            parts,
            out,
            Box::new(move |g, needs| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&len, &need)| {
                        let piece = need.then(|| g.narrow(axis, start, len));
                        start += len;
                        piece
                    })
                    .collect()
            }),
        )
    }

    /// `self (m,k) · other (k,n)`
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let (av, bv) = (self.value(), other.value());
        let out = matmul(&av, false, &bv, false);
        self.graph.custom(
            &[self, other],
            out,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| matmul(g, false, &bv, true)),
                    needs[1].then(|| matmul(&av, true, g, false)),
                ]
            }),
        )
    }

    /// Affine map `x Wᵀ + b` with `x (n,in)`, `W (out,in)`, `b (out)`.
    pub fn linear(self, weight: Var<'g>, bias: Option<Var<'g>>) -> Var<'g> {
        let (xv, wv) = (self.value(), weight.value());
        let out = matmul(&xv, false, &wv, true);
        let y = self.graph.custom(
            &[self, weight],
            out,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| matmul(g, false, &wv, false)),
                    needs[1].then(|| matmul(g, true, &xv, false)),
                ]
            }),
        );
        match bias {
            Some(b) => y.add(b),
            None => y,
        }
    }

    /// Nearest-neighbour ×2 upsampling of a rank-4 tensor.
    pub fn upsample2x(self) -> Var<'g> {
        let xv = self.value();
        let (b, c, h, w) = xv.dims4();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * h2 * w2];
        let xd = xv.data();
        for p in 0..b * c {
            for y in 0..h2 {
                let src = (p * h + y / 2) * w;
                let dst = (p * h2 + y) * w2;
                for x in 0..w2 {
                    out[dst + x] = xd[src + x / 2];
                }
            }
        }
        self.graph.custom(
            &[self],
            Tensor::from_vec(vec![b, c, h2, w2], out),
            Box::new(move |g, _| {
                let gd = g.data();
                let mut gx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    for y in 0..h2 {
                        let dst = (p * h + y / 2) * w;
                        let src = (p * h2 + y) * w2;
                        for x in 0..w2 {
                            gx[dst + x / 2] += gd[src + x];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(vec![b, c, h, w], gx))]
            }),
        )
    }

    /// 2-D cross-correlation, `x (B,Ci,H,W)`, `w (Co,Ci,kh,kw)`, zero padding.
    pub fn conv2d(self, weight: Var<'g>, stride: usize, padding: usize) -> Var<'g> {
        let (xv, wv) = (self.value(), weight.value());
        let geo = ConvGeometry::new(xv.shape(), wv.shape(), stride, padding);
        let out = geo.forward(&xv, &wv);
        self.graph.custom(
            &[self, weight],
            out,
            Box::new(move |g, needs| {
                let (gx, gw) = geo.backward(&xv, &wv, g, needs[0], needs[1]);
                vec![gx, gw]
            }),
        )
    }

    /// Adds a per-channel bias `(C)` to a rank-4 tensor.
    pub fn add_channel_bias(self, bias: Var<'g>) -> Var<'g> {
        let c = bias.value().numel();
        self.add(bias.reshape(&[1, c, 1, 1]))
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be rank 4, got {:?}", x);
        assert_eq!(w.len(), 4, "conv2d weight must be rank 4, got {:?}", w);
        assert_eq!(x[1], w[1], "conv2d channel mismatch: input {:?} weight {:?}", x, w);
        assert!(stride >= 1);
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d kernel larger than input");
        Self {
            batch: x[0],
            cin: x[1],
            h,
            w: wd,
            cout: w[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        }
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let npix = self.ho * self.wo;
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * npix;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let dst = &mut col[row + oy * self.wo..row + (oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let npix = self.ho * self.wo;
        for ci in 0..self.cin {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * npix;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let src = &col[row + oy * self.wo..row + (oy + 1) * self.wo];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &Tensor, w: &Tensor) -> Tensor {
        let (k, npix) = (self.k(), self.ho * self.wo);
        let in_sz = self.cin * self.h * self.w;
        let out_sz = self.cout * npix;
        let mut out = vec![0.0; self.batch * out_sz];
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![0.0; k * npix] };
        for b in 0..self.batch {
            let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
            let cols: &[f64] = if self.is_pointwise() {
                xb
            } else {
                self.im2col(xb, &mut col);
                &col
            };
            gemm_into(
                self.cout,
                k,
                npix,
                w.data(),
                false,
                cols,
                false,
                &mut out[b * out_sz..(b + 1) * out_sz],
                0.0,
            );
        }
        Tensor::from_vec(vec![self.batch, self.cout, self.ho, self.wo], out)
    }

    fn backward(
        &self,
        x: &Tensor,
        w: &Tensor,
        g: &Tensor,
        need_x: bool,
        need_w: bool,
    ) -> (Option<Tensor>, Option<Tensor>) {
        let (k, npix) = (self.k(), self.ho * self.wo);
        let in_sz = self.cin * self.h * self.w;
        let out_sz = self.cout * npix;
        let mut gw = need_w.then(|| vec![0.0; self.cout * k]);
        let mut gx = need_x.then(|| vec![0.0; self.batch * in_sz]);
        let mut col = vec![0.0; if self.is_pointwise() { 0 } else { k * npix }];
        let mut dcol = vec![0.0; if need_x && !self.is_pointwise() { k * npix } else { 0 }];
        for b in 0..self.batch {
            let gb = &g.data()[b * out_sz..(b + 1) * out_sz];
            if let Some(gw) = gw.as_mut() {
                let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
                let cols: &[f64] = if self.is_pointwise() {
                    xb
                } else {
                    self.im2col(xb, &mut col);
                    &col
                };
                // dW += G_b · colᵀ
                gemm_into(self.cout, npix, k, gb, false, cols, true, gw, 1.0);
            }
            if let Some(gx) = gx.as_mut() {
                let gxb = &mut gx[b * in_sz..(b + 1) * in_sz];
                if self.is_pointwise() {
                    gemm_into(k, self.cout, npix, w.data(), true, gb, false, gxb, 0.0);
                } else {
                    gemm_into(k, self.cout, npix, w.data(), true, gb, false, &mut dcol, 0.0);
                    self.col2im(&dcol, gxb);
                }
            }
        }
        (
            gx.map(|d| Tensor::from_vec(x.shape().to_vec(), d)),
            gw.map(|d| Tensor::from_vec(w.shape().to_vec(), d)),
        )
    }
}
