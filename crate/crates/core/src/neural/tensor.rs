//! Dense tensors of up to 5 axes, generic over element precision.
//!
//! Training runs in f32; gradient checking runs the identical code in f64.
//! Spatial axes use the same x-fastest order as [`crate::volume::Volume3D`]:
//! for a 5-axis tensor `(batch, channel, x, y, z)` the linear index is
//! `x + X*(y + Y*(z + Z*(c + C*b)))`.

use crate::error::{Error, Result};

/// Element type of the network engine: f32 for training storage, f64 for
/// gradient-check mode.
pub trait Scalar:
    Copy
    + Default
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::iter::Sum
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            #[inline]
            fn to_f32(self) -> f32 {
                self as f32
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 5 {
            return Err(Error::Shape(format!("rank must be 1..=5, got {}", dims.len())));
        }
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![S::ZERO; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Casts every element; used to move between training and check precision
    /// and to serialize checkpoints as f32.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The five logical axes `(batch, channel, x, y, z)`; shorter tensors
    /// refuse. Used by the volumetric ops.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        if self.dims.len() != 5 {
            return Err(Error::Shape(format!(
                "expected 5-axis tensor (batch, channel, x, y, z), got {:?}",
                self.dims
            )));
        }
        Ok([self.dims[0], self.dims[1], self.dims[2], self.dims[3], self.dims[4]])
    }

    /// Rows/cols of a 2-axis tensor.
    pub fn dims2(&self) -> Result<[usize; 2]> {
        if self.dims.len() != 2 {
            return Err(Error::Shape(format!("expected 2-axis tensor, got {:?}", self.dims)));
        }
        Ok([self.dims[0], self.dims[1]])
    }
}

impl<S: Scalar> Tensor<S> {
    /// Uniform samples in `(-limit, limit)` from the given generator.
    pub fn uniform(dims: Vec<usize>, limit: f64, rng: &mut impl rand::Rng) -> Self {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(rng.gen_range(-limit..limit)))
            .collect();
        Self { dims, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checks() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![1; 6], vec![0.0]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.dims2().unwrap(), [2, 3]);
        assert!(t.dims5().is_err());
    }

    #[test]
    fn cast_round_trip() {
        let t = Tensor::<f64>::new(vec![3], vec![1.5, -2.25, 0.125]).unwrap();
        let f: Tensor<f32> = t.cast();
        let back: Tensor<f64> = f.cast();
        assert_eq!(t, back);
    }
}
