//! Dense latent tensors with the fixed `(C, T, h, w)` axis convention.

use ndarray::{Array4, Zip};
use rand::Rng;

use crate::error::{KvLockError, Result};
use crate::rng::normal_array;
use crate::scalar::Real;

/// `(channels, frames, height, width)`.
pub type Shape4 = (usize, usize, usize, usize);

/// Real-valued latent video `z ∈ ℝ^{C×T×h×w}`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent4D<T> {
    data: Array4<T>,
}

impl<T: Real> Latent4D<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self {
            data: Array4::zeros(shape),
        }
    }

    pub fn filled(shape: Shape4, value: T) -> Self {
        Self {
            data: Array4::from_elem(shape, value),
        }
    }

    pub fn from_array(data: Array4<T>) -> Self {
        // Standard layout is what `as_slice` and the file formats rely on.
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().to_owned()
        };
        Self { data }
    }

    pub fn from_vec(shape: Shape4, values: Vec<T>) -> Result<Self> {
        let expected = shape.0 * shape.1 * shape.2 * shape.3;
        if values.len() != expected {
            return Err(KvLockError::Shape(format!(
                "{} values for shape {:?} ({} expected)",
                values.len(),
                shape,
                expected
            )));
        }
        Ok(Self {
            data: Array4::from_shape_vec(shape, values).expect("length checked"),
        })
    }

    pub fn randn<R: Rng + ?Sized>(shape: Shape4, rng: &mut R) -> Self {
        Self {
            data: normal_array(shape, rng),
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.data.dim()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn array(&self) -> &Array4<T> {
        &self.data
    }

    pub fn array_mut(&mut self) -> &mut Array4<T> {
        &mut self.data
    }

    pub fn into_array(self) -> Array4<T> {
        self.data
    }

    pub fn as_slice(&self) -> &[T] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        self.data.as_slice_mut().expect("standard layout")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(KvLockError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.mapv(f),
        }
    }

    /// Elementwise `f(self, other)`; shapes must match.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other, "zip")?;
        let mut out = self.data.clone();
        Zip::from(&mut out)
            .and(&other.data)
            .for_each(|a, &b| *a = f(*a, b));
        Ok(Self { data: out })
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.ensure_same_shape(other, "inner product")?;
        Ok(self
            .as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn norm_sq(&self) -> T {
        self.as_slice().iter().map(|&v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.ensure_same_shape(other, "difference")?;
        Ok(self
            .as_slice()
            .iter()
            .zip(other.as_slice())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn cast<U: Real>(&self) -> Latent4D<U> {
        Latent4D {
            data: self.data.mapv(|v| U::lit(v.as_f64())),
        }
    }
}

impl<T: Real> AsRef<[T]> for Latent4D<T> {
    fn as_ref(&self) -> &[T] {
        self.as_slice()
    }
}
