//! Dense row-major `f64` tensors and the kernels the graph ops are built from.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "shape {:?} needs {} elements, got {}",
            shape,
            n,
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { shape, data }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `(batch, channels, height, width)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.rank(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.rank(), 2, "expected rank-2 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at4(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        let (_, cs, hs, ws) = self.dims4();
        self.data[((b * cs + c) * hs + h) * ws + w]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Tensor {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn into_reshape(self, shape: impl Into<Vec<usize>>) -> Tensor {
        Tensor::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise binary op with numpy-style broadcasting.
    pub fn broadcast_zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        if self.shape == other.shape {
            return self.zip_map(other, f);
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape);
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut out = vec![0.0; out_shape.iter().product()];
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
            out[o] = f(self.data[ia], other.data[ib]);
        });
        Tensor::from_vec(out_shape, out)
    }

    /// Sums a broadcast result back down to `target` shape.
    pub fn sum_to_shape(&self, target: &[usize]) -> Tensor {
        if self.shape == target {
            return self.clone();
        }
        let st = broadcast_strides(target, &self.shape);
        let zero = vec![0; self.shape.len()];
        let mut out = vec![0.0; target.iter().product()];
        for_each_broadcast(&self.shape, &st, &zero, |o, it, _| {
            out[it] += self.data[o];
        });
        Tensor::from_vec(target.to_vec(), out)
    }

    /// Repeats size-1 dims up to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        assert_eq!(
            broadcast_shape(&self.shape, shape),
            shape,
            "cannot expand {:?} to {:?}",
            self.shape,
            shape
        );
        let s = broadcast_strides(&self.shape, shape);
        let zero = vec![0; shape.len()];
        let mut out = vec![0.0; shape.iter().product()];
        for_each_broadcast(shape, &s, &zero, |o, i, _| out[o] = self.data[i]);
        Tensor::from_vec(shape.to_vec(), out)
    }

    /// Sums over `axes`, keeping them as size-1 dims.
    pub fn sum_axes_keepdim(&self, axes: &[usize]) -> Tensor {
        let mut target = self.shape.clone();
        for &a in axes {
            assert!(a < target.len(), "axis {} out of range for {:?}", a, self.shape);
            target[a] = 1;
        }
        self.sum_to_shape(&target)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        assert!(axis < self.rank(), "narrow axis out of range");
        assert!(start + len <= self.shape[axis], "narrow range out of bounds");
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let d = self.shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner;
            out.extend_from_slice(&self.data[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::from_vec(shape, out)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape();
        assert!(axis < first.len(), "concat axis out of range");
        for p in parts {
            assert_eq!(p.rank(), first.len(), "concat rank mismatch");
            for (k, (&a, &b)) in p.shape().iter().zip(first).enumerate() {
                assert!(k == axis || a == b, "concat shape mismatch {:?} vs {:?}", p.shape(), first);
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let d = p.shape()[axis];
                out.extend_from_slice(&p.data[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        Tensor::from_vec(shape, out)
    }

    /// Mirrors a rank-4 tensor along its width axis.
    pub fn flip_w(&self) -> Tensor {
        let (b, c, h, w) = self.dims4();
        let mut out = vec![0.0; self.numel()];
        for row in 0..b * c * h {
            for x in 0..w {
                out[row * w + x] = self.data[row * w + (w - 1 - x)];
            }
        }
        Tensor::from_vec(self.shape.clone(), out)
    }

    /// Mirrors a rank-4 tensor along its height axis.
    pub fn flip_h(&self) -> Tensor {
        let (b, c, h, w) = self.dims4();
        let mut out = vec![0.0; self.numel()];
        for plane in 0..b * c {
            for y in 0..h {
                let src = (plane * h + (h - 1 - y)) * w;
                let dst = (plane * h + y) * w;
                out[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Tensor::from_vec(self.shape.clone(), out)
    }

    /// Rotates each plane of a square rank-4 tensor by 90 degrees counter-clockwise.
    pub fn rot90(&self) -> Tensor {
        let (b, c, h, w) = self.dims4();
        assert_eq!(h, w, "rot90 needs square planes");
        let mut out = vec![0.0; self.numel()];
        for plane in 0..b * c {
            let base = plane * h * w;
            for y in 0..h {
                for x in 0..w {
                    out[base + (w - 1 - x) * h + y] = self.data[base + y * w + x];
                }
            }
        }
        Tensor::from_vec(self.shape.clone(), out)
    }

    /// Selects batch entry `index` keeping a size-1 batch axis.
    pub fn batch_item(&self, index: usize) -> Tensor {
        self.narrow(0, index, 1)
    }
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            panic!("shapes {:?} and {:?} do not broadcast", a, b);
        };
    }
    out
}

/// Strides of `shape` laid against `out` (right-aligned), with 0 on broadcast dims.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    assert!(shape.len() <= n, "cannot broadcast {:?} into {:?}", shape, out);
    let mut strides = vec![0; n];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + n - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        if shape[i] != 1 {
            assert_eq!(shape[i], out[oi], "cannot broadcast {:?} into {:?}", shape, out);
        }
        acc *= shape[i];
    }
    strides
}

/// Walks every index of `out_shape`, calling `f(flat_out, flat_a, flat_b)`.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = out_shape.len();
    if n == 0 {
        f(0, 0, 0);
        return;
    }
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let inner = out_shape[n - 1];
    let (ia_step, ib_step) = (sa[n - 1], sb[n - 1]);
    let mut idx = vec![0usize; n - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0;
    loop {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // odometer over the outer dims
        let mut d = n - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base_a -= sa[d] * idx[d];
            base_b -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// `C = op(A) · op(B)` for row-major matrices, optionally transposed.
pub fn matmul(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Tensor {
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
    let mut out = vec![0.0; m * n];
    gemm_into(m, k, n, &a.data, trans_a, &b.data, trans_b, &mut out, 0.0);
    Tensor::from_vec(vec![m, n], out)
}

/// `c = beta·c + op(a)·op(b)` on raw row-major buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    // (row stride, col stride) of op(X) over a row-major X
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe in-bounds views of the buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_add_rows() {
        let a = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::from_vec(vec![3], vec![10., 20., 30.]);
        let c = a.broadcast_zip(&b, |x, y| x + y);
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
        let back = c.sum_to_shape(&[3]);
        assert_eq!(back.data(), &[25., 47., 69.]);
    }

    #[test]
    fn channel_broadcast_and_reduce() {
        let a = Tensor::from_vec(vec![1, 2, 2, 2], (0..8).map(f64::from).collect());
        let s = a.sum_axes_keepdim(&[2, 3]);
        assert_eq!(s.shape(), &[1, 2, 1, 1]);
        assert_eq!(s.data(), &[6., 22.]);
        let e = s.expand(&[1, 2, 2, 2]);
        assert_eq!(e.data(), &[6., 6., 6., 6., 22., 22., 22., 22.]);
    }

    #[test]
    fn matmul_transposes() {
        let a = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::from_vec(vec![3, 2], vec![1., 0., 0., 1., 1., 1.]);
        assert_eq!(matmul(&a, false, &b, false).data(), &[4., 5., 10., 11.]);
        let at = Tensor::from_vec(vec![3, 2], vec![1., 4., 2., 5., 3., 6.]);
        assert_eq!(matmul(&at, true, &b, false).data(), &[4., 5., 10., 11.]);
        let bt = Tensor::from_vec(vec![2, 3], vec![1., 0., 1., 0., 1., 1.]);
        assert_eq!(matmul(&a, false, &bt, true).data(), &[4., 5., 10., 11.]);
    }

    #[test]
    fn narrow_concat_inverse() {
        let a = Tensor::from_vec(vec![2, 3, 2], (0..12).map(f64::from).collect());
        let l = a.narrow(1, 0, 1);
        let r = a.narrow(1, 1, 2);
        assert_eq!(Tensor::concat(&[&l, &r], 1), a);
    }

    #[test]
    fn flips_and_rotation() {
        let a = Tensor::from_vec(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]);
        assert_eq!(a.flip_w().data(), &[2., 1., 4., 3.]);
        assert_eq!(a.flip_h().data(), &[3., 4., 1., 2.]);
        assert_eq!(a.rot90().data(), &[2., 4., 1., 3.]);
        assert_eq!(a.rot90().rot90().rot90().rot90(), a);
    }
}
