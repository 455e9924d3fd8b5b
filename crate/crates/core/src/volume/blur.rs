use super::{Dims, RealVolume};

/// Normalized discrete Gaussian truncated at `ceil(4 sigma)` voxels.
/// `sigma == 0` yields the unit kernel `[1.0]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= total);
    k
}

/// Separable Gaussian blur with zero padding outside the grid.
pub fn gaussian_blur(vol: &RealVolume, sigma: f64) -> RealVolume {
    let data: Vec<f64> = vol.data().iter().map(|&v| v as f64).collect();
    let out = gaussian_blur_f64(&data, vol.dims(), sigma);
    RealVolume::new(vol.dims(), out.into_iter().map(|v| v as f32).collect())
        .expect("blur preserves length")
}

pub fn gaussian_blur_f64(data: &[f64], dims: Dims, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return data.to_vec();
    }
    let radius = (kernel.len() / 2) as isize;
    let n = dims.as_array();
    let mut cur = data.to_vec();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..3 {
        let len = n[axis] as isize;
        let stride: usize = n[axis + 1..].iter().product();
        let outer: usize = n[..axis].iter().product();
        next.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..outer {
            let base = o * n[axis] * stride;
            for i in 0..len {
                let dst = base + i as usize * stride;
                for (t, &w) in kernel.iter().enumerate() {
                    let j = i + t as isize - radius;
                    if j < 0 || j >= len {
                        continue;
                    }
                    let src = base + j as usize * stride;
                    for s in 0..stride {
                        next[dst + s] += w * cur[src + s];
                    }
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_is_normalized() {
        for sigma in [0.5, 1.0, 3.0] {
            let k = gaussian_kernel(sigma);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(k.len() % 2, 1);
        }
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
    }

    #[test]
    fn matches_direct_convolution() {
        let d = Dims::cube(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = RealVolume::from_fn(d, |_, _, _| rng.random_range(0.0..1.0));
        let sigma = 1.0;
        let fast = gaussian_blur(&v, sigma);
        let k = gaussian_kernel(sigma);
        let r = (k.len() / 2) as isize;
        let n = 8isize;
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    let mut acc = 0.0;
                    for a in -r..=r {
                        for b in -r..=r {
                            for c in -r..=r {
                                let (i, j, l) = (x + a, y + b, z + c);
                                if (0..n).contains(&i) && (0..n).contains(&j) && (0..n).contains(&l) {
                                    let w = k[(a + r) as usize] * k[(b + r) as usize] * k[(c + r) as usize];
                                    acc += w * *v.at(i as usize, j as usize, l as usize) as f64;
                                }
                            }
                        }
                    }
                    let got = *fast.at(x as usize, y as usize, z as usize) as f64;
                    assert!((got - acc).abs() <= 1e-5, "{got} vs {acc}");
                }
            }
        }
    }
}
