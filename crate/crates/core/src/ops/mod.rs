//! Differentiable tensor operations.
//!
//! Network blocks and losses are written once against the [`Ops`] trait and
//! evaluated by one of two backends: [`Eager`] computes values directly and
//! keeps nothing, [`Tape`] records every operation so that reverse-mode
//! gradients can be computed afterwards.

mod conv;
mod eager;
pub mod gradcheck;
mod tape;

pub use eager::Eager;
pub use tape::{Gradients, Tape, Var};

use crate::error::Result;
use crate::losses::LossConfig;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub(crate) use conv::{conv2d_backward, conv2d_forward};

pub trait Ops<T: Real> {
    type Value: Clone;

    /// Network input or target: a value the caller does not optimize.
    fn input(&mut self, value: Tensor<T>) -> Self::Value;

    /// A trainable parameter. The tape keys parameters by address, so the
    /// same tensor registered twice yields the same value handle.
    fn param(&mut self, value: &Tensor<T>) -> Self::Value;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    fn conv2d(
        &mut self,
        x: &Self::Value,
        weight: &Self::Value,
        bias: Option<&Self::Value>,
        dilation: usize,
    ) -> Result<Self::Value>;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    /// Elementwise sum of two or more equally shaped values.
    fn sum(&mut self, terms: &[Self::Value]) -> Result<Self::Value>;

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn relu(&mut self, a: &Self::Value) -> Self::Value;

    fn sigmoid(&mut self, a: &Self::Value) -> Self::Value;

    fn concat_channels(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;

    fn mse(&mut self, s: &Self::Value, y: &Self::Value) -> Result<Self::Value>;

    fn edge(&mut self, s: &Self::Value, y: &Self::Value, cfg: &LossConfig) -> Result<Self::Value>;

    fn ssim(&mut self, s: &Self::Value, y: &Self::Value, cfg: &LossConfig) -> Result<Self::Value>;

    /// `bias + Σ weight_i * term_i` over single-element values.
    fn affine(&mut self, terms: &[(Self::Value, T)], bias: T) -> Result<Self::Value>;

    fn scalar(&self, v: &Self::Value) -> T {
        self.value(v).item()
    }
}

pub(crate) mod elementwise {
    use crate::error::{Error, Result};
    use crate::scalar::Real;
    use crate::tensor::Tensor;

    pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn sum<T: Real>(terms: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::config("sum", "no terms to sum"))?;
        let mut out = (*first).clone();
        for t in rest {
            out.expect_same_shape(t, "elementwise sum")?;
            out.add_assign(t);
        }
        Ok(out)
    }

    pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("concat", "no tensors to concatenate"))?;
        let (b, _, h, w) = first.dims4()?;
        let mut channels = 0;
        for p in parts {
            let (pb, pc, ph, pw) = p.dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::shape("channel concat", &[b, h, w], &[pb, ph, pw]));
            }
            channels += pc;
        }
        let mut data = Vec::with_capacity(b * channels * h * w);
        for bi in 0..b {
            for p in parts {
                data.extend_from_slice(p.batch_item(bi));
            }
        }
        Tensor::from_vec(&[b, channels, h, w], data)
    }

    /// Splits a channel-concatenated gradient back into per-part gradients.
    pub fn split_channels<T: Real>(grad: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
        let (b, _, h, w) = grad.dims4().expect("rank-4 gradient");
        let plane = h * w;
        let mut outs: Vec<Vec<T>> = channels
            .iter()
            .map(|c| Vec::with_capacity(b * c * plane))
            .collect();
        for bi in 0..b {
            let item = grad.batch_item(bi);
            let mut offset = 0;
            for (out, &c) in outs.iter_mut().zip(channels) {
                out.extend_from_slice(&item[offset * plane..(offset + c) * plane]);
                offset += c;
            }
        }
        outs.into_iter()
            .zip(channels)
            .map(|(data, &c)| Tensor::from_vec(&[b, c, h, w], data).expect("split shape"))
            .collect()
    }

    pub fn affine<T: Real>(terms: &[(&Tensor<T>, T)], bias: T) -> Result<Tensor<T>> {
        let mut acc = bias;
        for (t, w) in terms {
            if t.len() != 1 {
                return Err(Error::shape("affine combination term", &[1], t.shape()));
            }
            acc += *w * t.item();
        }
        Ok(Tensor::scalar(acc))
    }
}
