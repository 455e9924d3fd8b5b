use std::f64::consts::PI;

use super::{Dims, RealVolume};
use crate::error::{Error, Result};

/// Orthonormal DCT-II basis value `c_k(n)` for length `len`.
fn basis(len: usize, k: usize, n: usize) -> f64 {
    let alpha = if k == 0 {
        (1.0 / len as f64).sqrt()
    } else {
        (2.0 / len as f64).sqrt()
    };
    alpha * (PI * k as f64 * (2 * n + 1) as f64 / (2 * len) as f64).cos()
}

/// The 1D map "DCT-II, keep the lowest `n_out` coefficients, inverse DCT at
/// length `n_out`, scale by `sqrt(n_out / n_in)`", as a row-major
/// `n_out x n_in` matrix.
pub fn resample_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let scale = (n_out as f64 / n_in as f64).sqrt();
    let mut m = vec![0.0; n_out * n_in];
    for o in 0..n_out {
        for i in 0..n_in {
            let acc: f64 = (0..n_out).map(|k| basis(n_out, k, o) * basis(n_in, k, i)).sum();
            m[o * n_in + i] = scale * acc;
        }
    }
    m
}

/// Low-pass resampling in the cosine domain. Separable, so it is applied one
/// axis at a time.
pub fn dct_resample(vol: &RealVolume, target: Dims) -> Result<RealVolume> {
    let src = vol.dims();
    src.require_even("dct_resample")?;
    target.require_even("dct_resample")?;
    if (0..3).any(|a| target.as_array()[a] > src.as_array()[a]) {
        return Err(Error::TargetTooLarge {
            source_dims: src,
            target,
        });
    }
    let mut cur: Vec<f64> = vol.data().iter().map(|&v| v as f64).collect();
    let mut cur_dims = src.as_array();
    for axis in 0..3 {
        let n_in = cur_dims[axis];
        let n_out = target.as_array()[axis];
        if n_in == n_out {
            continue;
        }
        let mat = resample_matrix(n_in, n_out);
        let mut next_dims = cur_dims;
        next_dims[axis] = n_out;
        cur = apply_axis(&cur, cur_dims, axis, &mat, n_out);
        cur_dims = next_dims;
    }
    RealVolume::new(target, cur.into_iter().map(|v| v as f32).collect())
}

fn apply_axis(data: &[f64], dims: [usize; 3], axis: usize, mat: &[f64], n_out: usize) -> Vec<f64> {
    let n_in = dims[axis];
    let stride: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut out = vec![0.0; outer * n_out * stride];
    for o in 0..outer {
        let src = &data[o * n_in * stride..(o + 1) * n_in * stride];
        let dst = &mut out[o * n_out * stride..(o + 1) * n_out * stride];
        for (r, row) in mat.chunks_exact(n_in).enumerate() {
            let d = &mut dst[r * stride..(r + 1) * stride];
            for (i, &w) in row.iter().enumerate() {
                let s = &src[i * stride..(i + 1) * stride];
                for (a, &b) in d.iter_mut().zip(s) {
                    *a += w * b;
                }
            }
        }
    }
    out
}
