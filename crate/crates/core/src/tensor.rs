//! Dense row-major tensors.
//!
//! Feature maps are rank-4 `(batch, channels, height, width)`; convolution
//! weights are rank-4 `(out, in, k, k)`; biases are rank-1; reduced losses
//! are rank-1 with a single element.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor construction", &[n], &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform_range<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(batch, channels, height, width)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape("rank-4 tensor", &[0, 0, 0, 0], &self.shape)),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1, "item() on a tensor of {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, context: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, context)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(context, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len()).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    /// Converts between precisions.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Element at `(b, c, y, x)` of a rank-4 tensor.
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        let [_, cs, hs, ws] = self.shape4();
        self.data[((b * cs + c) * hs + y) * ws + x]
    }

    pub fn at_mut(&mut self, b: usize, c: usize, y: usize, x: usize) -> &mut T {
        let [_, cs, hs, ws] = self.shape4();
        &mut self.data[((b * cs + c) * hs + y) * ws + x]
    }

    fn shape4(&self) -> [usize; 4] {
        match *self.shape.as_slice() {
            [b, c, h, w] => [b, c, h, w],
            _ => panic!("expected rank-4 tensor, got {:?}", self.shape),
        }
    }

    /// Contiguous slice holding batch item `b`.
    pub fn batch_item(&self, b: usize) -> &[T] {
        let per: usize = self.shape[1..].iter().product();
        &self.data[b * per..(b + 1) * per]
    }

    /// Copies batch item `b` into a tensor of batch size one.
    pub fn select_batch(&self, b: usize) -> Self {
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.batch_item(b).to_vec(),
        }
    }

    /// Stacks tensors of identical shape along the batch axis.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::config("batch", "cannot stack an empty batch"))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::with_capacity(first.len() * items.len());
        for item in items {
            first.expect_same_shape(item, "batch stacking")?;
            data.extend_from_slice(&item.data);
        }
        shape[0] = items.iter().map(|t| t.shape[0]).sum();
        Ok(Tensor { shape, data })
    }

    /// Spatial window `[y0, y0+h) x [x0, x0+w)` of every batch item and channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let (b, c, hs, ws) = self.dims4()?;
        if y0 + h > hs || x0 + w > ws {
            return Err(Error::shape("crop window", &[hs, ws], &[y0 + h, x0 + w]));
        }
        let mut out = Vec::with_capacity(b * c * h * w);
        for plane in self.data.chunks_exact(hs * ws) {
            for y in y0..y0 + h {
                out.extend_from_slice(&plane[y * ws + x0..y * ws + x0 + w]);
            }
        }
        Tensor::from_vec(&[b, c, h, w], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn crop_extracts_window() {
        let t = Tensor::<f64>::from_fn(&[1, 2, 4, 4], |i| i as f64);
        let c = t.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.shape(), &[1, 2, 2, 2]);
        assert_eq!(c.data(), &[6.0, 7.0, 10.0, 11.0, 22.0, 23.0, 26.0, 27.0]);
        assert!(t.crop(3, 3, 2, 2).is_err());
    }

    #[test]
    fn stack_and_select_are_inverse() {
        let a = Tensor::<f32>::full(&[1, 1, 2, 2], 1.0);
        let b = Tensor::<f32>::full(&[1, 1, 2, 2], 2.0);
        let s = Tensor::stack_batch(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2, 2]);
        assert_eq!(s.select_batch(0), a);
        assert_eq!(s.select_batch(1), b);
    }
}
