//! Dense row-major `f64` tensors and the range-tagged image batch type.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Contiguous row-major array. Image batches use NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn try_new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} does not match {} elements",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Zero-mean Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} elements", self.data.len());
        self.data[0]
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape);
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
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Slice of sample `i` along the leading axis.
    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.data.len() / self.shape[0];
        &self.data[i * per..(i + 1) * per]
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Tensor {
        assert!(!items.is_empty());
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            assert_eq!(t.shape, inner, "stack of mismatched shapes");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor { shape, data }
    }

    /// Channel `c` of sample `n` as an `h*w` slice.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let (_, ch, h, w) = self.dims4();
        let off = (n * ch + c) * h * w;
        &self.data[off..off + h * w]
    }
}

/// Declared closed value interval of an image batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueRange {
    /// `[0, 1]`, the storage convention.
    Unit,
    /// `[-1, 1]`, the network I/O convention.
    Signed,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
        }
    }
}

/// An `N×C×H×W` batch whose elements are guaranteed to lie in `range`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor,
    range: ValueRange,
}

impl ImageTensor {
    pub fn new(data: Tensor, range: ValueRange) -> Result<Self> {
        if data.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "image tensor must be NCHW, got {:?}",
                data.shape()
            )));
        }
        let (n, c, _, _) = data.dims4();
        if n == 0 {
            return Err(Error::Shape("image tensor needs N >= 1".into()));
        }
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("image tensor needs C in {{1, 3}}, got {c}")));
        }
        let (lo, hi) = range.bounds();
        if let Some(v) = data.data().iter().find(|v| !(**v >= lo && **v <= hi)) {
            return Err(Error::Domain(format!("value {v} outside {range:?} range [{lo}, {hi}]")));
        }
        Ok(ImageTensor { data, range })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dims4()
    }

    /// Affine map `2v - 1` from `[0,1]` to `[-1,1]`.
    pub fn to_signed(&self) -> ImageTensor {
        match self.range {
            ValueRange::Signed => self.clone(),
            ValueRange::Unit => ImageTensor {
                data: self.data.map(|v| 2.0 * v - 1.0),
                range: ValueRange::Signed,
            },
        }
    }

    /// Affine map `(v + 1) / 2` from `[-1,1]` to `[0,1]`, clamped against rounding.
    pub fn to_unit(&self) -> ImageTensor {
        match self.range {
            ValueRange::Unit => self.clone(),
            ValueRange::Signed => ImageTensor {
                data: self.data.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)),
                range: ValueRange::Unit,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_tensor_rejects_out_of_range() {
        let t = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 1.5]);
        assert!(ImageTensor::new(t, ValueRange::Unit).is_err());
    }

    #[test]
    fn image_tensor_rejects_two_channels() {
        let t = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(matches!(ImageTensor::new(t, ValueRange::Unit), Err(Error::Shape(_))));
    }

    #[test]
    fn half_maps_to_zero() {
        let t = Tensor::full(&[1, 1, 2, 2], 0.5);
        let img = ImageTensor::new(t, ValueRange::Unit).unwrap().to_signed();
        assert!(img.tensor().data().iter().all(|&v| v == 0.0));
        assert_eq!(img.range(), ValueRange::Signed);
    }

    #[test]
    fn stack_prepends_axis() {
        let a = Tensor::full(&[1, 2, 2], 1.0);
        let b = Tensor::full(&[1, 2, 2], 2.0);
        let s = Tensor::stack(&[&a, &b]);
        assert_eq!(s.shape(), &[2, 1, 2, 2]);
        assert_eq!(s.sample(1), &[2.0; 4]);
    }
}
