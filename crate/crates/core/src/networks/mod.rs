//! The two sub-networks and their composition.
//!
//! The rain-streak removal stage maps the rainy image `x` to a coarse result
//! `s_c` (input conv, `lambda` DDRBs, output conv, global skip). The detail
//! reconstruction stage refines `s_c` into `s` the same way with `mu` ERPABs.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, read_checkpoint, save_checkpoint,
    write_checkpoint, CheckpointContents, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    ddrb_forward, erpab_forward, Aggregation, ConvLayer, ConvSpec, DdrbParams, ErpabParams,
    LayerVisitor, DDRB_DILATIONS,
};
use crate::error::{Error, Result};
use crate::ops::{Eager, Ops};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Block layout of the network. The default is the full two-stage model;
/// the others are the architecture ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Chained ResBlocks, no dilation, no detail stage.
    Rb,
    /// Dense residual blocks without dilation, no detail stage.
    Drb,
    /// Dilated dense residual blocks, no detail stage.
    Ddrb,
    /// DDRB stage followed by a detail stage of residual pixel-attention
    /// blocks (no parallel dilated branches).
    DdrbPab,
    /// DDRB stage followed by a detail stage of ERPABs.
    #[default]
    DdrbErpab,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::Rb,
        Architecture::Drb,
        Architecture::Ddrb,
        Architecture::DdrbPab,
        Architecture::DdrbErpab,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Rb => "rb",
            Architecture::Drb => "drb",
            Architecture::Ddrb => "ddrb",
            Architecture::DdrbPab => "ddrb_pab",
            Architecture::DdrbErpab => "ddrb_erpab",
        }
    }

    pub fn aggregation(self) -> Aggregation {
        match self {
            Architecture::Rb => Aggregation::Chain,
            _ => Aggregation::DenseSum,
        }
    }

    pub fn dilations(self) -> [usize; 6] {
        match self {
            Architecture::Rb | Architecture::Drb => [1; 6],
            _ => DDRB_DILATIONS,
        }
    }

    pub fn has_detail_stage(self) -> bool {
        matches!(self, Architecture::DdrbPab | Architecture::DdrbErpab)
    }

    pub fn detail_uses_pdrb(self) -> bool {
        self == Architecture::DdrbErpab
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config("network.architecture", format!("unknown `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of DDRBs in the rain-streak removal stage.
    pub lambda_ddrb: usize,
    /// Number of ERPABs in the detail reconstruction stage.
    pub mu_erpab: usize,
    pub channels: usize,
    pub input_channels: usize,
    pub architecture: Architecture,
    /// Logistic squash on the pixel-attention map.
    pub pab_sigmoid: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            lambda_ddrb: 10,
            mu_erpab: 3,
            channels: 32,
            input_channels: 3,
            architecture: Architecture::DdrbErpab,
            pab_sigmoid: false,
        }
    }
}

impl NetworkConfig {
    pub fn new(lambda_ddrb: usize, mu_erpab: usize, channels: usize) -> Self {
        NetworkConfig {
            lambda_ddrb,
            mu_erpab,
            channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_ddrb == 0 {
            return Err(Error::config("network.lambda_ddrb", "must be >= 1"));
        }
        if self.architecture.has_detail_stage() && self.mu_erpab == 0 {
            return Err(Error::config("network.mu_erpab", "must be >= 1"));
        }
        if self.channels == 0 {
            return Err(Error::config("network.channels", "must be >= 1"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("network.input_channels", "must be >= 1"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("network", e.to_string()))
    }

    fn head_spec(&self) -> ConvSpec {
        ConvSpec::new(3, 1, self.input_channels, self.channels)
    }

    fn tail_spec(&self) -> ConvSpec {
        ConvSpec::new(3, 1, self.channels, self.input_channels)
    }
}

/// One stage: input conv, a sequence of blocks, output conv, global skip.
#[derive(Clone, Debug, PartialEq)]
pub struct StageParams<T, B> {
    pub head: ConvLayer<T>,
    pub blocks: Vec<B>,
    pub tail: ConvLayer<T>,
}

pub type R2NetParams<T> = StageParams<T, DdrbParams<T>>;
pub type DrNetParams<T> = StageParams<T, ErpabParams<T>>;

impl<T, B: LayerVisitor<T>> LayerVisitor<T> for StageParams<T, B> {
    fn visit_layers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a ConvLayer<T>)) {
        f(format!("{prefix}.head"), &self.head);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_layers(&format!("{prefix}.block{}", i + 1), f);
        }
        f(format!("{prefix}.tail"), &self.tail);
    }

    fn visit_layers_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut ConvLayer<T>),
    ) {
        f(format!("{prefix}.head"), &mut self.head);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_layers_mut(&format!("{prefix}.block{}", i + 1), f);
        }
        f(format!("{prefix}.tail"), &mut self.tail);
    }
}

/// Parameters of the full two-stage network. `drnet` is absent for the
/// single-stage ablation architectures.
#[derive(Clone, Debug, PartialEq)]
pub struct DpeNetParams<T> {
    pub r2net: R2NetParams<T>,
    pub drnet: Option<DrNetParams<T>>,
}

impl<T> LayerVisitor<T> for DpeNetParams<T> {
    fn visit_layers<'a>(&'a self, _prefix: &str, f: &mut dyn FnMut(String, &'a ConvLayer<T>)) {
        self.r2net.visit_layers("r2net", f);
        if let Some(d) = &self.drnet {
            d.visit_layers("drnet", f);
        }
    }

    fn visit_layers_mut<'a>(
        &'a mut self,
        _prefix: &str,
        f: &mut dyn FnMut(String, &'a mut ConvLayer<T>),
    ) {
        self.r2net.visit_layers_mut("r2net", f);
        if let Some(d) = &mut self.drnet {
            d.visit_layers_mut("drnet", f);
        }
    }
}

impl<T: Real> DpeNetParams<T> {
    /// Builds every layer of `config` in a fixed order using `make`.
    pub fn build(config: &NetworkConfig, make: &mut dyn FnMut(ConvSpec) -> ConvLayer<T>) -> Self {
        let arch = config.architecture;
        let c = config.channels;
        let r2net = StageParams {
            head: make(config.head_spec()),
            blocks: (0..config.lambda_ddrb)
                .map(|_| DdrbParams::new(c, arch.dilations(), arch.aggregation(), make))
                .collect(),
            tail: make(config.tail_spec()),
        };
        let drnet = arch.has_detail_stage().then(|| StageParams {
            head: make(config.head_spec()),
            blocks: (0..config.mu_erpab)
                .map(|_| ErpabParams::new(c, arch.detail_uses_pdrb(), config.pab_sigmoid, make))
                .collect(),
            tail: make(config.tail_spec()),
        });
        DpeNetParams { r2net, drnet }
    }

    pub fn zeros(config: &NetworkConfig) -> Self {
        Self::build(config, &mut ConvLayer::zeros)
    }

    /// `(name, tensor)` pairs: `<layer>.weight` then `<layer>.bias`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_layers("", &mut |name, layer| {
            out.push((format!("{name}.weight"), &layer.weight));
            if let Some(b) = &layer.bias {
                out.push((format!("{name}.bias"), b));
            }
        });
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_layers_mut("", &mut |name, layer| {
            out.push((format!("{name}.weight"), &mut layer.weight));
            if let Some(b) = &mut layer.bias {
                out.push((format!("{name}.bias"), b));
            }
        });
        out
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self, config: &NetworkConfig) -> DpeNetParams<U> {
        let mut out = DpeNetParams::<U>::zeros(config);
        for ((_, dst), (_, src)) in out.named_tensors_mut().into_iter().zip(self.named_tensors()) {
            *dst = src.cast();
        }
        out
    }

    /// Eager `(s_c, s)` for one batch.
    pub fn infer(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut ops = Eager;
        dpenet_forward(&mut ops, &x.clone(), self)
    }
}

/// Fan-in scaled uniform weights and zero biases, deterministic per seed.
pub fn init_params<T: Real>(config: &NetworkConfig, seed: u64) -> DpeNetParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DpeNetParams::build(config, &mut |spec| ConvLayer::init(spec, &mut rng))
}

fn stage_forward<T: Real, O: Ops<T>, B>(
    ops: &mut O,
    x: &O::Value,
    stage: &StageParams<T, B>,
    name: &str,
    block: impl Fn(&mut O, &O::Value, &B) -> Result<O::Value>,
) -> Result<O::Value> {
    let channels = ops.value(x).shape().get(1).copied().unwrap_or(0);
    if channels != stage.head.spec.in_channels {
        return Err(Error::config(
            format!("{name}.input"),
            format!(
                "expected {} input channels, got {channels}",
                stage.head.spec.in_channels
            ),
        ));
    }
    let mut h = stage.head.forward(ops, x, &format!("{name}.head"))?;
    for b in &stage.blocks {
        h = block(ops, &h, b)?;
    }
    let out = stage.tail.forward(ops, &h, &format!("{name}.tail"))?;
    ops.add(&out, x)
}

/// Coarse deraining: `s_c = tail(DDRB^λ(head(x))) + x`.
pub fn r2net_forward<T: Real, O: Ops<T>>(
    ops: &mut O,
    x: &O::Value,
    p: &R2NetParams<T>,
) -> Result<O::Value> {
    stage_forward(ops, x, p, "r2net", |ops, h, b| ddrb_forward(ops, h, b))
}

/// Detail reconstruction: `s = tail(ERPAB^μ(head(s_c))) + s_c`.
pub fn drnet_forward<T: Real, O: Ops<T>>(
    ops: &mut O,
    s_c: &O::Value,
    p: &DrNetParams<T>,
) -> Result<O::Value> {
    stage_forward(ops, s_c, p, "drnet", |ops, h, b| erpab_forward(ops, h, b))
}

/// Both stage outputs `(s_c, s)`. Without a detail stage `s == s_c`.
pub fn dpenet_forward<T: Real, O: Ops<T>>(
    ops: &mut O,
    x: &O::Value,
    p: &DpeNetParams<T>,
) -> Result<(O::Value, O::Value)> {
    let s_c = r2net_forward(ops, x, &p.r2net)?;
    let s = match &p.drnet {
        Some(d) => drnet_forward(ops, &s_c, d)?,
        None => s_c.clone(),
    };
    Ok((s_c, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = NetworkConfig::new(2, 1, 8);
        let a = init_params::<f32>(&cfg, 7);
        let b = init_params::<f32>(&cfg, 7);
        let c = init_params::<f32>(&cfg, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_respects_fan_in_bound_and_zero_bias() {
        let cfg = NetworkConfig::new(1, 1, 8);
        let p = init_params::<f64>(&cfg, 1);
        for (_, layer) in p.layers() {
            let fan_in = (layer.spec.in_channels * layer.spec.kernel.pow(2)) as f64;
            assert!(layer.weight.max_abs() <= (1.0 / fan_in).sqrt());
            assert!(layer.bias.as_ref().unwrap().data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn zero_network_is_identity() {
        let cfg = NetworkConfig::new(2, 2, 4);
        let p = DpeNetParams::<f64>::zeros(&cfg);
        let x = Tensor::from_fn(&[1, 3, 12, 12], |i| (i % 7) as f64 / 7.0);
        let (sc, s) = p.infer(&x).unwrap();
        assert_eq!(sc, x);
        assert_eq!(s, x);
    }

    #[test]
    fn single_stage_architectures_have_no_detail_stage() {
        for arch in [Architecture::Rb, Architecture::Drb, Architecture::Ddrb] {
            let cfg = NetworkConfig {
                architecture: arch,
                ..NetworkConfig::new(1, 1, 4)
            };
            let p = DpeNetParams::<f32>::zeros(&cfg);
            assert!(p.drnet.is_none());
        }
    }

    #[test]
    fn wrong_input_channels_is_a_config_error() {
        let cfg = NetworkConfig::new(1, 1, 4);
        let p = DpeNetParams::<f32>::zeros(&cfg);
        let x = Tensor::zeros(&[1, 1, 12, 12]);
        assert!(matches!(p.infer(&x), Err(Error::Config { .. })));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = NetworkConfig {
            architecture: Architecture::DdrbPab,
            pab_sigmoid: true,
            ..NetworkConfig::new(5, 1, 16)
        };
        assert_eq!(NetworkConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(NetworkConfig::new(0, 3, 32).validate().is_err());
    }

    #[test]
    fn tensor_names_are_unique() {
        let p = DpeNetParams::<f32>::zeros(&NetworkConfig::new(2, 2, 4));
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names[0], "r2net.head.weight");
        assert!(names.contains(&"drnet.block2.pdrb.fuse.bias".to_string()));
    }
}
