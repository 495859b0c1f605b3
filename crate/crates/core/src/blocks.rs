//! Building blocks of both sub-networks.
//!
//! Every forward function is generic over [`Ops`], so the same code runs
//! eagerly for inference and on a [`Tape`](crate::ops::Tape) for training.
//! All convolutions are stride 1 with zero "same" padding, so every block
//! preserves the spatial size of its input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::Ops;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Dilation schedule of the three ResBlocks inside a DDRB, two convs each.
pub const DDRB_DILATIONS: [usize; 6] = [1, 1, 2, 2, 5, 5];

/// Dilations of the three parallel PDRB branches.
pub const PDRB_DILATIONS: [usize; 3] = [1, 2, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(kernel: usize, dilation: usize, in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            kernel,
            dilation,
            in_channels,
            out_channels,
            has_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::config("conv.kernel", format!("kernel {} is not odd", self.kernel)));
        }
        if self.dilation == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("conv", format!("degenerate spec {self:?}")));
        }
        Ok(())
    }

    /// Zero padding on each side that keeps the spatial size unchanged.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + if self.has_bias { self.out_channels } else { 0 }
    }

    /// Multiply-accumulates per output pixel.
    pub fn macs_per_pixel(&self) -> usize {
        self.weight_count()
    }
}

/// Weights `[out, in, k, k]` and optional bias `[out]` of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Real> ConvLayer<T> {
    pub fn zeros(spec: ConvSpec) -> Self {
        ConvLayer {
            spec,
            weight: Tensor::zeros(&spec.weight_shape()),
            bias: spec.has_bias.then(|| Tensor::zeros(&[spec.out_channels])),
        }
    }

    /// Fan-in scaled uniform weights, bound `sqrt(1 / (in * k^2))`; zero bias.
    pub fn init<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Self {
        let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
        ConvLayer {
            spec,
            weight: Tensor::uniform(&spec.weight_shape(), (1.0 / fan_in).sqrt(), rng),
            bias: spec.has_bias.then(|| Tensor::zeros(&[spec.out_channels])),
        }
    }

    /// Checks stored tensor shapes against the spec.
    pub fn check(&self, name: &str) -> Result<()> {
        if self.weight.shape() != self.spec.weight_shape() {
            return Err(Error::config(
                name,
                format!(
                    "weight shape {:?} does not match spec {:?}",
                    self.weight.shape(),
                    self.spec.weight_shape()
                ),
            ));
        }
        match (&self.bias, self.spec.has_bias) {
            (Some(b), true) if b.shape() == [self.spec.out_channels] => Ok(()),
            (None, false) => Ok(()),
            _ => Err(Error::config(name, "bias does not match spec")),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn forward<O: Ops<T>>(&self, ops: &mut O, x: &O::Value, name: &str) -> Result<O::Value> {
        let channels = ops.value(x).shape().get(1).copied().unwrap_or(0);
        if channels != self.spec.in_channels {
            return Err(Error::config(
                name,
                format!(
                    "layer expects {} input channels, got {channels}",
                    self.spec.in_channels
                ),
            ));
        }
        self.check(name)?;
        let w = ops.param(&self.weight);
        let b = self.bias.as_ref().map(|b| ops.param(b));
        ops.conv2d(x, &w, b.as_ref(), self.spec.dilation)
            .map_err(|e| Error::config(name, e.to_string()))
    }
}

/// Visits `(name, layer)` pairs in a fixed order.
pub trait LayerVisitor<T> {
    fn visit_layers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a ConvLayer<T>));

    fn visit_layers_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut ConvLayer<T>),
    );

    fn layers(&self) -> Vec<(String, &ConvLayer<T>)> {
        let mut out = Vec::new();
        self.visit_layers("", &mut |n, l| out.push((n, l)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_layers("", &mut |_, l| n += l.param_count());
        n
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T> LayerVisitor<T> for ConvLayer<T> {
    fn visit_layers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a ConvLayer<T>)) {
        f(prefix.to_string(), self)
    }

    fn visit_layers_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut ConvLayer<T>),
    ) {
        f(prefix.to_string(), self)
    }
}

/// `ReLU(conv2(ReLU(conv1(x))) + x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlockParams<T> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
}

impl<T: Real> ResBlockParams<T> {
    pub fn new(
        channels: usize,
        dilations: (usize, usize),
        make: &mut dyn FnMut(ConvSpec) -> ConvLayer<T>,
    ) -> Self {
        ResBlockParams {
            conv1: make(ConvSpec::new(3, dilations.0, channels, channels)),
            conv2: make(ConvSpec::new(3, dilations.1, channels, channels)),
        }
    }

    pub fn dilations(&self) -> (usize, usize) {
        (self.conv1.spec.dilation, self.conv2.spec.dilation)
    }
}

impl<T> LayerVisitor<T> for ResBlockParams<T> {
    fn visit_layers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a ConvLayer<T>)) {
        f(join(prefix, "conv1"), &self.conv1);
        f(join(prefix, "conv2"), &self.conv2);
    }

    fn visit_layers_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut ConvLayer<T>),
    ) {
        f(join(prefix, "conv1"), &mut self.conv1);
        f(join(prefix, "conv2"), &mut self.conv2);
    }
}

pub fn res_block_forward<T: Real, O: Ops<T>>(
    ops: &mut O,
    x: &O::Value,
    p: &ResBlockParams<T>,
) -> Result<O::Value> {
    let h = p.conv1.forward(ops, x, "res_block.conv1")?;
    let h = ops.relu(&h);
    let h = p.conv2.forward(ops, &h, "res_block.conv2")?;
    let h = ops.add(&h, x)?;
    Ok(ops.relu(&h))
}

/// How the three ResBlocks of a [`DdrbParams`] are wired together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Plain chain: each ResBlock consumes the previous output.
    Chain,
    /// ResBlock k consumes the sum of the block input and every earlier
    /// ResBlock output.
    DenseSum,
}

/// Three ResBlocks with a shared aggregation rule. With dense summation and
/// the [`DDRB_DILATIONS`] schedule this is the dilated dense residual block;
/// the same container also holds the chained and undilated variants.
#[derive(Clone, Debug, PartialEq)]
pub struct DdrbParams<T> {
    pub blocks: Vec<ResBlockParams<T>>,
    pub aggregation: Aggregation,
}

impl<T: Real> DdrbParams<T> {
    pub fn new(
        channels: usize,
        dilations: [usize; 6],
        aggregation: Aggregation,
        make: &mut dyn FnMut(ConvSpec) -> ConvLayer<T>,
    ) -> Self {
        DdrbParams {
            blocks: dilations
                .chunks_exact(2)
                .map(|d| ResBlockParams::new(channels, (d[0], d[1]), make))
                .collect(),
            aggregation,
        }
    }

    /// Standard DDRB: dense summation, dilations `[1,1,2,2,5,5]`.
    pub fn dilated_dense(channels: usize, make: &mut dyn FnMut(ConvSpec) -> ConvLayer<T>) -> Self {
        Self::new(channels, DDRB_DILATIONS, Aggregation::DenseSum, make)
    }
}

impl<T> LayerVisitor<T> for DdrbParams<T> {
    fn visit_layers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a ConvLayer<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_layers(&join(prefix, &format!("rb{}", i + 1)), f);
        }
    }

    fn visit_layers_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut ConvLayer<T>),
    ) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_layers_mut(&join(prefix, &format!("rb{}", i + 1)), f);
        }
    }
}

pub fn ddrb_forward<T: Real, O: Ops<T>>(
    ops: &mut O,
    x: &O::Value,
    p: &DdrbParams<T>,
) -> Result<O::Value> {
    let mut outputs: Vec<O::Value> = Vec::with_capacity(p.blocks.len());
    let mut current = x.clone();
    for block in &p.blocks {
        let input = match p.aggregation {
            Aggregation::Chain => current.clone(),
            Aggregation::DenseSum if outputs.is_empty() => x.clone(),
            Aggregation::DenseSum => {
                let mut terms = Vec::with_capacity(outputs.len() + 1);
                terms.push(x.clone());
                terms.extend(outputs.iter().cloned());
                ops.sum(&terms)?
            }
        };
        current = res_block_forward(ops, &input, block)?;
        outputs.push(current.clone());
    }
    Ok(current)
}

/// Parallel dilated branches (3×3, dilations 1/2/5), concatenated and fused
/// back to the block width by a 1×1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PdrbParams<T> {
    pub branches: Vec<ConvLayer<T>>,
    pub fuse: ConvLayer<T>,
}

impl<T: Real> PdrbParams<T> {
    pub fn new(channels: usize, make: &mut dyn FnMut(ConvSpec) -> ConvLayer<T>) -> Self {
        PdrbParams {
            branches: PDRB_DILATIONS
                .iter()
                .map(|&d| make(ConvSpec::new(3, d, channels, channels)))
                .collect(),
            fuse: make(ConvSpec::new(
                1,
                1,
                channels * PDRB_DILATIONS.len(),
                channels,
            )),
        }
    }
}

impl<T> LayerVisitor<T> for PdrbParams<T> {
    fn visit_layers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a ConvLayer<T>)) {
        for (i, b) in self.branches.iter().enumerate() {
            f(join(prefix, &format!("branch{}", i + 1)), b);
        }
        f(join(prefix, "fuse"), &self.fuse);
    }

    fn visit_layers_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut ConvLayer<T>),
    ) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            f(join(prefix, &format!("branch{}", i + 1)), b);
        }
        f(join(prefix, "fuse"), &mut self.fuse);
    }
}

pub fn pdrb_forward<T: Real, O: Ops<T>>(
    ops: &mut O,
    x: &O::Value,
    p: &PdrbParams<T>,
) -> Result<O::Value> {
    let branches = p
        .branches
        .iter()
        .enumerate()
        .map(|(i, b)| b.forward(ops, x, &format!("pdrb.branch{}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    let cat = ops.concat_channels(&branches)?;
    let fused = p.fuse.forward(ops, &cat, "pdrb.fuse")?;
    Ok(ops.relu(&fused))
}

/// Pixel-wise attention: `map = expand(ReLU(squeeze(y)))`, output `map ⊙ y`.
/// `squash` applies a logistic function to the map (off by default).
#[derive(Clone, Debug, PartialEq)]
pub struct PabParams<T> {
    pub squeeze: ConvLayer<T>,
    pub expand: ConvLayer<T>,
    pub squash: bool,
}

impl<T: Real> PabParams<T> {
    pub fn new(
        channels: usize,
        squash: bool,
        make: &mut dyn FnMut(ConvSpec) -> ConvLayer<T>,
    ) -> Self {
        PabParams {
            squeeze: make(ConvSpec::new(3, 1, channels, 1)),
            expand: make(ConvSpec::new(3, 1, 1, channels)),
            squash,
        }
    }
}

impl<T> LayerVisitor<T> for PabParams<T> {
    fn visit_layers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a ConvLayer<T>)) {
        f(join(prefix, "squeeze"), &self.squeeze);
        f(join(prefix, "expand"), &self.expand);
    }

    fn visit_layers_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut ConvLayer<T>),
    ) {
        f(join(prefix, "squeeze"), &mut self.squeeze);
        f(join(prefix, "expand"), &mut self.expand);
    }
}

pub fn pab_forward<T: Real, O: Ops<T>>(
    ops: &mut O,
    y: &O::Value,
    p: &PabParams<T>,
) -> Result<O::Value> {
    let h = p.squeeze.forward(ops, y, "pab.squeeze")?;
    let h = ops.relu(&h);
    let mut map = p.expand.forward(ops, &h, "pab.expand")?;
    if p.squash {
        map = ops.sigmoid(&map);
    }
    ops.mul(&map, y)
}

/// `ReLU(PAB(PDRB(x)) + x)`. Without a PDRB this degrades to a residual
/// pixel-attention block `ReLU(PAB(x) + x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErpabParams<T> {
    pub pdrb: Option<PdrbParams<T>>,
    pub pab: PabParams<T>,
}

impl<T: Real> ErpabParams<T> {
    pub fn new(
        channels: usize,
        with_pdrb: bool,
        squash: bool,
        make: &mut dyn FnMut(ConvSpec) -> ConvLayer<T>,
    ) -> Self {
        ErpabParams {
            pdrb: with_pdrb.then(|| PdrbParams::new(channels, make)),
            pab: PabParams::new(channels, squash, make),
        }
    }
}

impl<T> LayerVisitor<T> for ErpabParams<T> {
    fn visit_layers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a ConvLayer<T>)) {
        if let Some(pdrb) = &self.pdrb {
            pdrb.visit_layers(&join(prefix, "pdrb"), f);
        }
        self.pab.visit_layers(&join(prefix, "pab"), f);
    }

    fn visit_layers_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut ConvLayer<T>),
    ) {
        if let Some(pdrb) = &mut self.pdrb {
            pdrb.visit_layers_mut(&join(prefix, "pdrb"), f);
        }
        self.pab.visit_layers_mut(&join(prefix, "pab"), f);
    }
}

pub fn erpab_forward<T: Real, O: Ops<T>>(
    ops: &mut O,
    x: &O::Value,
    p: &ErpabParams<T>,
) -> Result<O::Value> {
    let attended = match &p.pdrb {
        Some(pdrb) => {
            let y = pdrb_forward(ops, x, pdrb)?;
            pab_forward(ops, &y, &p.pab)?
        }
        None => pab_forward(ops, x, &p.pab)?,
    };
    let h = ops.add(&attended, x)?;
    Ok(ops.relu(&h))
}
