//! Dense NCHW tensors generic over the training scalar.
//!
//! Training runs in `f32`; gradient checking re-runs the same graph in `f64`
//! ("shadow mode"), so kernels are generic over [`Real`].

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
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
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            fn to_f32(self) -> f32 {
                self as f32
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// A dense rank-4 tensor `(batch, channels, height, width)` with an optional
/// gradient of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real> {
    pub dims: [usize; 4],
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        let numel = dims.iter().product();
        Self {
            dims,
            data: vec![T::ZERO; numel],
            grad: None,
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "dims {dims:?} do not match data length {}",
            data.len()
        );
        Self {
            dims,
            data,
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec([1, 1, 1, 1], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn plane(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    /// Value copy without the gradient.
    pub fn detached(&self) -> Self {
        Self {
            dims: self.dims,
            data: self.data.clone(),
            grad: None,
        }
    }

    pub fn convert<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64()))
                .collect(),
            grad: None,
        }
    }
}
