//! 3D convolutional encoder with shape and phase decoders, hand-written
//! reverse-mode gradients, and the staged trainer.
//!
//! Layers are generic over [`Scalar`] so that every backward pass can be
//! checked against finite differences in `f64`; training and inference use
//! `f32`.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};
use crate::volume::{Dims, RealVolume};

pub mod io;
pub mod layers;
pub mod network;
pub mod train;

pub use layers::{
    conv3d_backward, conv3d_forward, dropout_backward, dropout_forward, maxpool2_backward, maxpool2_forward,
    relu_backward, relu_forward, upsample2_backward, upsample2_forward, ConvGrads, ConvParams,
};
pub use network::{forward_pass, physics_loss, Group, LossTerms, Mode, NetworkConfig, NetworkWeights, Prediction};
pub use train::{predict, sample_gradient, train, EpochMetrics, StageSpec, TrainConfig, TrainReport, STAGES};

pub trait Scalar:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;

    /// `c = alpha * a b + beta * c` with explicit strides, as in
    /// `matrixmultiply::{s,d}gemm`.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` views, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self,
        c: *mut Self, rsc: isize, csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            unsafe fn gemm(
                m: usize, k: usize, n: usize,
                alpha: Self,
                a: *const Self, rsa: isize, csa: isize,
                b: *const Self, rsb: isize, csb: isize,
                beta: Self,
                c: *mut Self, rsc: isize, csc: isize,
            ) {
                unsafe { $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Activations laid out as (batch, channel, x, y, z), z fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    batch: usize,
    channels: usize,
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(batch: usize, channels: usize, dims: Dims) -> Self {
        Self { batch, channels, dims, data: vec![T::ZERO; batch * channels * dims.len()] }
    }

    pub fn new(batch: usize, channels: usize, dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != batch * channels * dims.len() {
            return Err(Error::ShapeMismatch {
                op: "FeatureMap::new",
                msg: format!("{} values for {batch}x{channels}x{dims}", data.len()),
            });
        }
        Ok(Self { batch, channels, dims, data })
    }

    /// One-channel, one-batch map from a volume.
    pub fn from_volume(v: &RealVolume) -> Self {
        Self {
            batch: 1,
            channels: 1,
            dims: v.dims(),
            data: v.data().iter().map(|&x| T::from_f64(x as f64)).collect(),
        }
    }

    /// Volume of channel `c` in batch entry `b`.
    pub fn to_volume(&self, b: usize, c: usize) -> RealVolume {
        let s = self.dims.len();
        let off = (b * self.channels + c) * s;
        RealVolume::new(self.dims, self.data[off..off + s].iter().map(|v| v.to_f64() as f32).collect())
            .expect("slice length matches dims")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl FnMut(&T) -> T) -> Self {
        Self { batch: self.batch, channels: self.channels, dims: self.dims, data: self.data.iter().map(f).collect() }
    }

    pub(crate) fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if (self.batch, self.channels, self.dims) != (other.batch, other.channels, other.dims) {
            return Err(Error::ShapeMismatch {
                op,
                msg: format!(
                    "{}x{}x{} vs {}x{}x{}",
                    self.batch, self.channels, self.dims, other.batch, other.channels, other.dims
                ),
            });
        }
        Ok(())
    }

    /// Contiguous (x, y, z) block of one batch entry and channel.
    pub(crate) fn plane(&self, b: usize, c: usize) -> &[T] {
        let s = self.dims.len();
        let off = (b * self.channels + c) * s;
        &self.data[off..off + s]
    }

    /// All channels of one batch entry.
    pub(crate) fn sample(&self, b: usize) -> &[T] {
        let s = self.channels * self.dims.len();
        &self.data[b * s..(b + 1) * s]
    }

    pub(crate) fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let s = self.channels * self.dims.len();
        &mut self.data[b * s..(b + 1) * s]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_map_round_trip() {
        let v = RealVolume::from_fn(Dims::cube(4), |x, y, z| (x + 2 * y + 3 * z) as f32);
        let f = FeatureMap::<f32>::from_volume(&v);
        assert_eq!(f.to_volume(0, 0), v);
        assert!(FeatureMap::<f32>::new(1, 2, Dims::cube(2), vec![0.0; 15]).is_err());
    }
}
