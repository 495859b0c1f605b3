use std::collections::HashMap;

use super::{conv2d_backward, conv2d_forward, elementwise, Ops};
use crate::error::Result;
use crate::losses::{self, LossConfig};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: usize,
    },
    Add(Var, Var),
    Sum(Vec<Var>),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Mse(Var, Var),
    Edge(Var, Var, LossConfig),
    Ssim(Var, Var, LossConfig),
    Affine(Vec<(Var, T)>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
    inputs_need_grad: bool,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            inputs_need_grad: false,
        }
    }

    /// Tape on which values passed to [`Ops::input`] also receive gradients.
    pub fn with_input_grads() -> Self {
        Tape {
            inputs_need_grad: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn any_needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.needs(v))
    }

    /// Reverse pass from a single-element value.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |v: Var, contribution: Tensor<T>| {
                if !self.needs(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv {
                    x,
                    weight,
                    bias,
                    dilation,
                } => {
                    let cg = conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[weight.0].value,
                        bias.is_some(),
                        *dilation,
                        &g,
                        (
                            self.needs(*x),
                            self.needs(*weight),
                            bias.is_some_and(|b| self.needs(b)),
                        ),
                    )
                    .expect("shapes validated on the forward pass");
                    if let Some(dx) = cg.input {
                        send(*x, dx);
                    }
                    if let Some(dw) = cg.weight {
                        send(*weight, dw);
                    }
                    if let (Some(b), Some(db)) = (bias, cg.bias) {
                        send(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sum(terms) => {
                    for t in terms {
                        send(*t, g.clone());
                    }
                }
                Op::Mul(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    if self.needs(*a) {
                        send(*a, g.zip_map(vb, "mul grad", |p, q| p * q).unwrap());
                    }
                    if self.needs(*b) {
                        send(*b, g.zip_map(va, "mul grad", |p, q| p * q).unwrap());
                    }
                }
                Op::Relu(a) => {
                    let out = &node.value;
                    send(
                        *a,
                        g.zip_map(out, "relu grad", |gv, o| {
                            if o > T::zero() {
                                gv
                            } else {
                                T::zero()
                            }
                        })
                        .unwrap(),
                    );
                }
                Op::Sigmoid(a) => {
                    let out = &node.value;
                    send(
                        *a,
                        g.zip_map(out, "sigmoid grad", |gv, o| gv * o * (T::one() - o))
                            .unwrap(),
                    );
                }
                Op::Concat(parts) => {
                    let channels: Vec<usize> = parts
                        .iter()
                        .map(|p| self.nodes[p.0].value.shape()[1])
                        .collect();
                    for (p, pg) in parts
                        .iter()
                        .zip(elementwise::split_channels(&g, &channels))
                    {
                        send(*p, pg);
                    }
                }
                Op::Mse(s, y) => {
                    let (gs, gy) = losses::kernels::mse_grad(
                        &self.nodes[s.0].value,
                        &self.nodes[y.0].value,
                        g.item(),
                    );
                    send(*s, gs);
                    send(*y, gy);
                }
                Op::Edge(s, y, cfg) => {
                    let (gs, gy) = losses::kernels::edge_grad(
                        &self.nodes[s.0].value,
                        &self.nodes[y.0].value,
                        cfg,
                        g.item(),
                    );
                    send(*s, gs);
                    send(*y, gy);
                }
                Op::Ssim(s, y, cfg) => {
                    let want_y = self.needs(*y);
                    let (gs, gy) = losses::kernels::ssim_grad(
                        &self.nodes[s.0].value,
                        &self.nodes[y.0].value,
                        cfg,
                        g.item(),
                        want_y,
                    );
                    send(*s, gs);
                    if let Some(gy) = gy {
                        send(*y, gy);
                    }
                }
                Op::Affine(terms) => {
                    for (t, w) in terms {
                        send(*t, Tensor::scalar(g.item() * *w));
                    }
                }
            }
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }
}

/// Result of [`Tape::backward`]. Gradients are retained for leaves only.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<usize, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter tensor previously registered through
    /// [`Ops::param`]. `None` when the parameter did not influence the loss.
    pub fn of_param(&self, param: &Tensor<T>) -> Option<&Tensor<T>> {
        self.params
            .get(&(param as *const Tensor<T> as usize))
            .and_then(|&v| self.of(v))
    }
}

impl<T: Real> Ops<T> for Tape<T> {
    type Value = Var;

    fn input(&mut self, value: Tensor<T>) -> Var {
        let needs = self.inputs_need_grad;
        self.push(value, Op::Leaf, needs)
    }

    fn param(&mut self, value: &Tensor<T>) -> Var {
        let key = value as *const Tensor<T> as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(key, v);
        v
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn conv2d(
        &mut self,
        x: &Var,
        weight: &Var,
        bias: Option<&Var>,
        dilation: usize,
    ) -> Result<Var> {
        let out = conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[weight.0].value,
            bias.map(|b| &self.nodes[b.0].value),
            dilation,
        )?;
        let mut deps = vec![*x, *weight];
        deps.extend(bias.copied());
        let needs = self.any_needs(&deps);
        Ok(self.push(
            out,
            Op::Conv {
                x: *x,
                weight: *weight,
                bias: bias.copied(),
                dilation,
            },
            needs,
        ))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, "elementwise add", |p, q| p + q)?;
        let needs = self.any_needs(&[*a, *b]);
        Ok(self.push(out, Op::Add(*a, *b), needs))
    }

    fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = terms.iter().map(|t| &self.nodes[t.0].value).collect();
        let out = elementwise::sum(&refs)?;
        let needs = self.any_needs(terms);
        Ok(self.push(out, Op::Sum(terms.to_vec()), needs))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, "elementwise product", |p, q| p * q)?;
        let needs = self.any_needs(&[*a, *b]);
        Ok(self.push(out, Op::Mul(*a, *b), needs))
    }

    fn relu(&mut self, a: &Var) -> Var {
        let out = elementwise::relu(&self.nodes[a.0].value);
        let needs = self.needs(*a);
        self.push(out, Op::Relu(*a), needs)
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        let out = elementwise::sigmoid(&self.nodes[a.0].value);
        let needs = self.needs(*a);
        self.push(out, Op::Sigmoid(*a), needs)
    }

    fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|t| &self.nodes[t.0].value).collect();
        let out = elementwise::concat_channels(&refs)?;
        let needs = self.any_needs(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), needs))
    }

    fn mse(&mut self, s: &Var, y: &Var) -> Result<Var> {
        let v = losses::kernels::mse(&self.nodes[s.0].value, &self.nodes[y.0].value)?;
        let needs = self.any_needs(&[*s, *y]);
        Ok(self.push(Tensor::scalar(v), Op::Mse(*s, *y), needs))
    }

    fn edge(&mut self, s: &Var, y: &Var, cfg: &LossConfig) -> Result<Var> {
        let v = losses::kernels::edge(&self.nodes[s.0].value, &self.nodes[y.0].value, cfg)?;
        let needs = self.any_needs(&[*s, *y]);
        Ok(self.push(Tensor::scalar(v), Op::Edge(*s, *y, cfg.clone()), needs))
    }

    fn ssim(&mut self, s: &Var, y: &Var, cfg: &LossConfig) -> Result<Var> {
        let v = losses::kernels::ssim(&self.nodes[s.0].value, &self.nodes[y.0].value, cfg)?;
        let needs = self.any_needs(&[*s, *y]);
        Ok(self.push(Tensor::scalar(v), Op::Ssim(*s, *y, cfg.clone()), needs))
    }

    fn affine(&mut self, terms: &[(Var, T)], bias: T) -> Result<Var> {
        let refs: Vec<(&Tensor<T>, T)> = terms
            .iter()
            .map(|(t, w)| (&self.nodes[t.0].value, *w))
            .collect();
        let out = elementwise::affine(&refs, bias)?;
        let vars: Vec<Var> = terms.iter().map(|(t, _)| *t).collect();
        let needs = self.any_needs(&vars);
        Ok(self.push(out, Op::Affine(terms.to_vec()), needs))
    }
}
