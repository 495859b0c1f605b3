use super::{conv2d_forward, elementwise, Ops};
use crate::error::Result;
use crate::losses::{self, LossConfig};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Direct evaluation without gradient bookkeeping. Intermediate values are
/// dropped as soon as the caller drops them.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Real> Ops<T> for Eager {
    type Value = Tensor<T>;

    fn input(&mut self, value: Tensor<T>) -> Tensor<T> {
        value
    }

    fn param(&mut self, value: &Tensor<T>) -> Tensor<T> {
        value.clone()
    }

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn conv2d(
        &mut self,
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        dilation: usize,
    ) -> Result<Tensor<T>> {
        conv2d_forward(x, weight, bias, dilation)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.zip_map(b, "elementwise add", |p, q| p + q)
    }

    fn sum(&mut self, terms: &[Tensor<T>]) -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = terms.iter().collect();
        elementwise::sum(&refs)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.zip_map(b, "elementwise product", |p, q| p * q)
    }

    fn relu(&mut self, a: &Tensor<T>) -> Tensor<T> {
        elementwise::relu(a)
    }

    fn sigmoid(&mut self, a: &Tensor<T>) -> Tensor<T> {
        elementwise::sigmoid(a)
    }

    fn concat_channels(&mut self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        elementwise::concat_channels(&refs)
    }

    fn mse(&mut self, s: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        losses::kernels::mse(s, y).map(Tensor::scalar)
    }

    fn edge(&mut self, s: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
        losses::kernels::edge(s, y, cfg).map(Tensor::scalar)
    }

    fn ssim(&mut self, s: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
        losses::kernels::ssim(s, y, cfg).map(Tensor::scalar)
    }

    fn affine(&mut self, terms: &[(Tensor<T>, T)], bias: T) -> Result<Tensor<T>> {
        let refs: Vec<(&Tensor<T>, T)> = terms.iter().map(|(t, w)| (t, *w)).collect();
        elementwise::affine(&refs, bias)
    }
}
