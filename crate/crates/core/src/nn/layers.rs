//! Layer kernels and their adjoints.

use rand::{Rng, RngCore};

use super::{FeatureMap, Scalar};
use crate::error::{Error, Result};
use crate::volume::Dims;

/// Kernel `c_out x c_in x k x k x k` and bias `c_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        Self { c_in, c_out, k, weight: vec![T::ZERO; c_out * c_in * k * k * k], bias: vec![T::ZERO; c_out] }
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, x: &FeatureMap<T>, op: &'static str) -> Result<()> {
        if self.k.is_multiple_of(2) {
            return Err(Error::InvalidArgument { op, msg: format!("kernel size {} is not odd", self.k) });
        }
        if x.channels() != self.c_in {
            return Err(Error::ShapeMismatch {
                op,
                msg: format!("input has {} channels, kernel expects {}", x.channels(), self.c_in),
            });
        }
        if self.weight.len() != self.c_out * self.fan_in() || self.bias.len() != self.c_out {
            return Err(Error::ShapeMismatch { op, msg: "kernel or bias length does not match its shape".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub grad_x: Option<FeatureMap<T>>,
    pub grad_weight: Vec<T>,
    pub grad_bias: Vec<T>,
}

/// Column-buffer budget (elements) for one slab of [`im2col`].
const COL_BUDGET: usize = 1 << 20;

/// Number of x-planes per slab so the unfolded block stays cache-sized.
fn slab_planes(kk: usize, d: Dims) -> usize {
    (COL_BUDGET / (kk * d.ny * d.nz).max(1)).clamp(1, d.nx)
}

/// Unfolds x-planes `x0..x1` of one sample (`c_in x S`) into `col`
/// (`c_in k^3 x L`, `L = (x1 - x0) ny nz`) for a zero-padded "same"
/// correlation.
fn im2col<T: Scalar>(x: &[T], c_in: usize, d: Dims, k: usize, x0: usize, x1: usize, col: &mut [T]) {
    let [nx, ny, nz] = d.as_array();
    let s = d.len();
    let l = (x1 - x0) * ny * nz;
    let pad = (k / 2) as isize;
    let mut row = 0;
    for c in 0..c_in {
        let src = &x[c * s..(c + 1) * s];
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let dst = &mut col[row * l..(row + 1) * l];
                    let (ox, oy, oz) = (kx as isize - pad, ky as isize - pad, kz as isize - pad);
                    let z_lo = (-oz).max(0) as usize;
                    let z_hi = (nz as isize - oz).min(nz as isize).max(0) as usize;
                    for x_ in x0..x1 {
                        let sx = x_ as isize + ox;
                        for y_ in 0..ny {
                            let sy = y_ as isize + oy;
                            let o = ((x_ - x0) * ny + y_) * nz;
                            let line = &mut dst[o..o + nz];
                            if sx < 0 || sx >= nx as isize || sy < 0 || sy >= ny as isize || z_lo >= z_hi {
                                line.fill(T::ZERO);
                                continue;
                            }
                            let si = (sx as usize * ny + sy as usize) * nz;
                            line[..z_lo].fill(T::ZERO);
                            line[z_hi..].fill(T::ZERO);
                            let zs = (z_lo as isize + oz) as usize;
                            line[z_lo..z_hi].copy_from_slice(&src[si + zs..si + zs + (z_hi - z_lo)]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the slab `col` back into `x`.
fn col2im<T: Scalar>(col: &[T], c_in: usize, d: Dims, k: usize, x0: usize, x1: usize, x: &mut [T]) {
    let [nx, ny, nz] = d.as_array();
    let s = d.len();
    let l = (x1 - x0) * ny * nz;
    let pad = (k / 2) as isize;
    let mut row = 0;
    for c in 0..c_in {
        let dst = &mut x[c * s..(c + 1) * s];
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let src = &col[row * l..(row + 1) * l];
                    let (ox, oy, oz) = (kx as isize - pad, ky as isize - pad, kz as isize - pad);
                    let z_lo = (-oz).max(0) as usize;
                    let z_hi = (nz as isize - oz).min(nz as isize).max(0) as usize;
                    for x_ in x0..x1 {
                        let sx = x_ as isize + ox;
                        if sx < 0 || sx >= nx as isize {
                            continue;
                        }
                        for y_ in 0..ny {
                            let sy = y_ as isize + oy;
                            if sy < 0 || sy >= ny as isize || z_lo >= z_hi {
                                continue;
                            }
                            let o = ((x_ - x0) * ny + y_) * nz;
                            let si = (sx as usize * ny + sy as usize) * nz;
                            let zs = (z_lo as isize + oz) as usize;
                            let n = z_hi - z_lo;
                            for (d_, &v) in dst[si + zs..si + zs + n].iter_mut().zip(&src[o + z_lo..o + z_hi]) {
                                *d_ += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Stride-1 zero-padded cross-correlation plus bias; spatial dims preserved.
pub fn conv3d_forward<T: Scalar>(x: &FeatureMap<T>, p: &ConvParams<T>) -> Result<FeatureMap<T>> {
    conv3d_forward_ws(x, p, &mut Vec::new())
}

pub(crate) fn conv3d_forward_ws<T: Scalar>(x: &FeatureMap<T>, p: &ConvParams<T>, col: &mut Vec<T>) -> Result<FeatureMap<T>> {
    p.check(x, "conv3d_forward")?;
    let d = x.dims();
    let s = d.len();
    let plane = d.ny * d.nz;
    let kk = p.fan_in();
    let step = slab_planes(kk, d);
    col.resize(kk * step * plane, T::ZERO);
    let mut out = FeatureMap::zeros(x.batch(), p.c_out, d);
    for b in 0..x.batch() {
        let o = out.sample_mut(b);
        for x0 in (0..d.nx).step_by(step) {
            let x1 = (x0 + step).min(d.nx);
            let l = (x1 - x0) * plane;
            im2col(x.sample(b), p.c_in, d, p.k, x0, x1, col);
            // o[:, x0 plane ..] = W col, rows strided by S
            gemm_strided(p.c_out, l, kk, (&p.weight, 0, kk, 1), (col, 0, l, 1), (o, x0 * plane, s), false);
        }
        for (c, &bias) in p.bias.iter().enumerate() {
            o[c * s..(c + 1) * s].iter_mut().for_each(|v| *v += bias);
        }
    }
    Ok(out)
}

/// Gradients of [`conv3d_forward`] with respect to input, kernel and bias.
pub fn conv3d_backward<T: Scalar>(x: &FeatureMap<T>, p: &ConvParams<T>, grad_out: &FeatureMap<T>) -> Result<ConvGrads<T>> {
    conv3d_backward_ws(x, p, grad_out, true, true, &mut Vec::new())
}

pub(crate) fn conv3d_backward_ws<T: Scalar>(
    x: &FeatureMap<T>,
    p: &ConvParams<T>,
    grad_out: &FeatureMap<T>,
    need_input: bool,
    need_params: bool,
    col: &mut Vec<T>,
) -> Result<ConvGrads<T>> {
    p.check(x, "conv3d_backward")?;
    let d = x.dims();
    if grad_out.dims() != d || grad_out.channels() != p.c_out || grad_out.batch() != x.batch() {
        return Err(Error::ShapeMismatch { op: "conv3d_backward", msg: "grad_out shape does not match output".into() });
    }
    let s = d.len();
    let plane = d.ny * d.nz;
    let kk = p.fan_in();
    let step = slab_planes(kk, d);
    col.resize(kk * step * plane, T::ZERO);
    let mut grad_weight = vec![T::ZERO; p.weight.len()];
    let mut grad_bias = vec![T::ZERO; p.c_out];
    let mut grad_x = need_input.then(|| FeatureMap::zeros(x.batch(), p.c_in, d));
    for b in 0..x.batch() {
        let go = grad_out.sample(b);
        if need_params {
            for (c, gb) in grad_bias.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for v in &go[c * s..(c + 1) * s] {
                    acc += v.to_f64();
                }
                *gb += T::from_f64(acc);
            }
        }
        for x0 in (0..d.nx).step_by(step) {
            let x1 = (x0 + step).min(d.nx);
            let l = (x1 - x0) * plane;
            let g = (go, x0 * plane, s, 1);
            if need_params {
                im2col(x.sample(b), p.c_in, d, p.k, x0, x1, col);
                // dW += g col^T
                gemm_strided(p.c_out, kk, l, g, (col, 0, 1, l), (&mut grad_weight, 0, kk), true);
            }
            if let Some(gx) = grad_x.as_mut() {
                // col = W^T g
                gemm_strided(kk, l, p.c_out, (&p.weight, 0, 1, kk), g, (col, 0, l), false);
                col2im(col, p.c_in, d, p.k, x0, x1, gx.sample_mut(b));
            }
        }
    }
    Ok(ConvGrads { grad_x, grad_weight, grad_bias })
}

/// Single-row or rank-one products, which blocked gemm kernels handle at a
/// fraction of their throughput.
#[allow(clippy::type_complexity)]
fn gemm_thin<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: (&[T], usize, usize, usize),
    b: (&[T], usize, usize, usize),
    c: (&mut [T], usize, usize),
    accumulate: bool,
) {
    let at = |i: usize, p: usize| a.0[a.1 + i * a.2 + p * a.3];
    for i in 0..m {
        let row = &mut c.0[c.1 + i * c.2..c.1 + i * c.2 + n];
        if !accumulate {
            row.fill(T::ZERO);
        }
        if b.3 == 1 {
            // axpy over contiguous rows of b
            for p in 0..k {
                let w = at(i, p);
                let br = &b.0[b.1 + p * b.2..b.1 + p * b.2 + n];
                row.iter_mut().zip(br).for_each(|(cv, &bv)| *cv += w * bv);
            }
        } else if a.3 == 1 && b.2 == 1 {
            // dot products of contiguous runs, eight partial sums
            let ar = &a.0[a.1 + i * a.2..a.1 + i * a.2 + k];
            for (j, cv) in row.iter_mut().enumerate() {
                let bc = &b.0[b.1 + j * b.3..b.1 + j * b.3 + k];
                let mut acc = [T::ZERO; 8];
                let (ac, bcc) = (ar.chunks_exact(8), bc.chunks_exact(8));
                let tail: T = ac.remainder().iter().zip(bcc.remainder()).fold(T::ZERO, |t, (&x, &y)| t + x * y);
                for (x, y) in ac.zip(bcc) {
                    for l in 0..8 {
                        acc[l] += x[l] * y[l];
                    }
                }
                *cv += acc.iter().fold(tail, |t, &v| t + v);
            }
        } else {
            for (j, cv) in row.iter_mut().enumerate() {
                let mut acc = T::ZERO;
                for p in 0..k {
                    acc += at(i, p) * b.0[b.1 + p * b.2 + j * b.3];
                }
                *cv += acc;
            }
        }
    }
}

/// `c = a b (+ c)` on strided views: `a` is `m x k` given as (buffer,
/// offset, row stride, column stride), `b` is `k x n` likewise, and `c` is
/// (buffer, offset, row stride) with unit column stride.
#[allow(clippy::type_complexity)]
fn gemm_strided<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: (&[T], usize, usize, usize),
    b: (&[T], usize, usize, usize),
    c: (&mut [T], usize, usize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |off: usize, rows: usize, rs: usize, cols: usize, cs: usize| off + (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(a.1, m, a.2, k, a.3) < a.0.len(), "gemm_strided: a out of bounds");
        assert!(last(b.1, k, b.2, n, b.3) < b.0.len(), "gemm_strided: b out of bounds");
    }
    assert!(last(c.1, m, c.2, n, 1) < c.0.len(), "gemm_strided: c out of bounds");
    if m == 1 || k == 1 {
        return gemm_thin(m, n, k, a, b, c, accumulate);
    }
    let beta = if accumulate { T::ONE } else { T::ZERO };
    // SAFETY: every index reached with these strides is bounds-checked
    // above, and `c` is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.0.as_ptr().add(a.1),
            a.2 as isize,
            a.3 as isize,
            b.0.as_ptr().add(b.1),
            b.2 as isize,
            b.3 as isize,
            beta,
            c.0.as_mut_ptr().add(c.1),
            c.2 as isize,
            1,
        );
    }
}

pub fn relu_forward<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(|&v| if v > T::ZERO { v } else { T::ZERO })
}

/// `y` is the forward output; gradient passes where `y > 0`.
pub fn relu_backward<T: Scalar>(y: &FeatureMap<T>, grad: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    y.same_shape(grad, "relu_backward")?;
    let mut g = grad.clone();
    for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
        if yv <= T::ZERO {
            *gv = T::ZERO;
        }
    }
    Ok(g)
}

/// Non-overlapping 2x2x2 max; also returns the winning offset (`4 dx + 2 dy
/// + dz`) of each cell, first index on ties.
pub fn maxpool2_forward<T: Scalar>(x: &FeatureMap<T>) -> Result<(FeatureMap<T>, Vec<u8>)> {
    let d = x.dims();
    if !d.is_even() {
        return Err(Error::OddDims { op: "maxpool2", dims: d });
    }
    let h = Dims::new(d.nx / 2, d.ny / 2, d.nz / 2);
    let mut out = FeatureMap::zeros(x.batch(), x.channels(), h);
    let mut arg = vec![0u8; out.data().len()];
    let mut i = 0;
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let src = x.plane(b, c);
            for px in 0..h.nx {
                for py in 0..h.ny {
                    for pz in 0..h.nz {
                        let mut best = src[d.index(2 * px, 2 * py, 2 * pz)];
                        let mut which = 0u8;
                        for off in 1..8u8 {
                            let (a, bb, cc) = ((off >> 2) as usize, ((off >> 1) & 1) as usize, (off & 1) as usize);
                            let v = src[d.index(2 * px + a, 2 * py + bb, 2 * pz + cc)];
                            if v > best {
                                best = v;
                                which = off;
                            }
                        }
                        out.data_mut()[i] = best;
                        arg[i] = which;
                        i += 1;
                    }
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward<T: Scalar>(grad_out: &FeatureMap<T>, arg: &[u8], input_dims: Dims) -> Result<FeatureMap<T>> {
    let h = grad_out.dims();
    if input_dims != Dims::new(2 * h.nx, 2 * h.ny, 2 * h.nz) || arg.len() != grad_out.data().len() {
        return Err(Error::ShapeMismatch { op: "maxpool2_backward", msg: "pooled shape does not match input".into() });
    }
    let mut g = FeatureMap::zeros(grad_out.batch(), grad_out.channels(), input_dims);
    let s = input_dims.len();
    let mut i = 0;
    for bc in 0..grad_out.batch() * grad_out.channels() {
        let dst = &mut g.data_mut()[bc * s..(bc + 1) * s];
        for px in 0..h.nx {
            for py in 0..h.ny {
                for pz in 0..h.nz {
                    let off = arg[i];
                    let (a, b, c) = ((off >> 2) as usize, ((off >> 1) & 1) as usize, (off & 1) as usize);
                    dst[input_dims.index(2 * px + a, 2 * py + b, 2 * pz + c)] += grad_out.data()[i];
                    i += 1;
                }
            }
        }
    }
    Ok(g)
}

/// Nearest-neighbour doubling of every spatial axis.
pub fn upsample2_forward<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let d = x.dims();
    let u = Dims::new(2 * d.nx, 2 * d.ny, 2 * d.nz);
    let mut out = FeatureMap::zeros(x.batch(), x.channels(), u);
    let s = u.len();
    for bc in 0..x.batch() * x.channels() {
        let src = &x.data()[bc * d.len()..(bc + 1) * d.len()];
        let dst = &mut out.data_mut()[bc * s..(bc + 1) * s];
        for ux in 0..u.nx {
            for uy in 0..u.ny {
                for uz in 0..u.nz {
                    dst[u.index(ux, uy, uz)] = src[d.index(ux / 2, uy / 2, uz / 2)];
                }
            }
        }
    }
    out
}

/// Sums the eight replicated positions.
pub fn upsample2_backward<T: Scalar>(grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let u = grad_out.dims();
    if !u.is_even() {
        return Err(Error::OddDims { op: "upsample2_backward", dims: u });
    }
    let d = Dims::new(u.nx / 2, u.ny / 2, u.nz / 2);
    let mut g = FeatureMap::zeros(grad_out.batch(), grad_out.channels(), d);
    for bc in 0..grad_out.batch() * grad_out.channels() {
        let src = &grad_out.data()[bc * u.len()..(bc + 1) * u.len()];
        let dst = &mut g.data_mut()[bc * d.len()..(bc + 1) * d.len()];
        for ux in 0..u.nx {
            for uy in 0..u.ny {
                for uz in 0..u.nz {
                    dst[d.index(ux / 2, uy / 2, uz / 2)] += src[u.index(ux, uy, uz)];
                }
            }
        }
    }
    Ok(g)
}

/// Inverted dropout. With an rng (training) each value is zeroed with
/// probability `p` and survivors are scaled by `1 / (1 - p)`; the per-value
/// factors are returned for the backward pass. Without an rng, or with
/// `p == 0`, this is the identity.
pub fn dropout_forward<T: Scalar>(
    x: &FeatureMap<T>,
    p: f64,
    rng: Option<&mut dyn RngCore>,
) -> Result<(FeatureMap<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument { op: "dropout", msg: format!("rate must be in [0, 1), got {p}") });
    }
    let Some(rng) = rng.filter(|_| p > 0.0) else {
        return Ok((x.clone(), None));
    };
    let keep = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.data().len())
        .map(|_| if rng.random::<f64>() < p { T::ZERO } else { keep })
        .collect();
    let mut out = x.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok((out, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(grad: &FeatureMap<T>, mask: Option<&[T]>) -> FeatureMap<T> {
    match mask {
        None => grad.clone(),
        Some(m) => {
            let mut g = grad.clone();
            for (v, &f) in g.data_mut().iter_mut().zip(m) {
                *v *= f;
            }
            g
        }
    }
}
