//! Static analysis of convolution stacks: receptive fields, gridding,
//! parameter counts and FLOP estimates.
//!
//! A [`GraphSpec`] for a whole network is obtained by tracing the real
//! forward functions with [`GraphTracer`], an [`Ops`] backend that records
//! operations instead of computing them.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::blocks::ConvSpec;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::networks::{dpenet_forward, DpeNetParams, NetworkConfig};
use crate::ops::Ops;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NodeKind {
    Input,
    Conv { spec: ConvSpec },
    Add,
    Concat,
    Mul,
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub kind: NodeKind,
    pub inputs: Vec<usize>,
    pub channels: usize,
    /// Layer name for convolutions, empty otherwise.
    pub label: String,
}

/// Dataflow graph of a convolution network, nodes in topological order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub nodes: Vec<GraphNode>,
}

impl GraphSpec {
    /// Plain chain of convolutions; channel counts must line up.
    pub fn serial(input_channels: usize, convs: &[ConvSpec]) -> Result<Self> {
        let mut nodes = vec![GraphNode {
            kind: NodeKind::Input,
            inputs: vec![],
            channels: input_channels,
            label: "input".into(),
        }];
        for (i, spec) in convs.iter().enumerate() {
            spec.validate()?;
            let prev = nodes.last().unwrap().channels;
            if spec.in_channels != prev {
                return Err(Error::config(
                    format!("graph.conv{}", i + 1),
                    format!("expects {} input channels, previous layer gives {prev}", spec.in_channels),
                ));
            }
            nodes.push(GraphNode {
                kind: NodeKind::Conv { spec: *spec },
                inputs: vec![nodes.len() - 1],
                channels: spec.out_channels,
                label: format!("conv{}", i + 1),
            });
        }
        Ok(GraphSpec { nodes })
    }

    /// Chain of `kernel`×`kernel` convolutions with the given dilations.
    pub fn dilated_stack(channels: usize, kernel: usize, dilations: &[usize]) -> Result<Self> {
        let convs: Vec<ConvSpec> = dilations
            .iter()
            .map(|&d| ConvSpec::new(kernel, d, channels, channels))
            .collect();
        Self::serial(channels, &convs)
    }

    /// Traces the forward pass of `config`.
    pub fn from_config(config: &NetworkConfig) -> Result<Self> {
        let params = DpeNetParams::<f32>::zeros(config);
        let mut tracer = GraphTracer::new(&params);
        let x = tracer.input(Tensor::zeros(&[1, config.input_channels, 1, 1]));
        dpenet_forward(&mut tracer, &x, &params)?;
        Ok(tracer.finish())
    }

    pub fn convs(&self) -> impl Iterator<Item = (&GraphNode, &ConvSpec)> {
        self.nodes.iter().filter_map(|n| match &n.kind {
            NodeKind::Conv { spec } => Some((n, spec)),
            _ => None,
        })
    }
}

/// Receptive field (side length) after each convolution, in graph order.
/// Merge nodes take the maximum over their inputs.
pub fn receptive_field(graph: &GraphSpec) -> Result<Vec<usize>> {
    let mut rf = vec![0usize; graph.nodes.len()];
    let mut out = Vec::new();
    for (i, node) in graph.nodes.iter().enumerate() {
        let incoming = node.inputs.iter().map(|&j| rf[j]).max();
        rf[i] = match &node.kind {
            NodeKind::Input => 1,
            NodeKind::Conv { spec } => {
                if spec.kernel % 2 == 0 {
                    return Err(Error::config(
                        node.label.clone(),
                        "receptive field needs an odd square kernel",
                    ));
                }
                let r = incoming.unwrap_or(1) + (spec.kernel - 1) * spec.dilation;
                out.push(r);
                r
            }
            _ => incoming.unwrap_or(1),
        };
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Gridding {
    /// The reachable offsets form the contiguous interval `[-reach, reach]`.
    Ok { reach: i64 },
    /// Offsets inside the covered span that no path reaches.
    Holes { reach: i64, holes: Vec<i64> },
}

impl Gridding {
    pub fn is_ok(&self) -> bool {
        matches!(self, Gridding::Ok { .. })
    }
}

/// One-axis offsets reachable from a single output position through a
/// chain of `kernel`-wide convolutions with the given dilations.
pub fn reachable_offsets(dilations: &[usize], kernel: usize) -> BTreeSet<i64> {
    let half = (kernel / 2) as i64;
    let mut set = BTreeSet::from([0i64]);
    for &d in dilations {
        set = set
            .iter()
            .flat_map(|&s| (-half..=half).map(move |t| s + t * d as i64))
            .collect();
    }
    set
}

/// Checks that a dilated stack covers its span without gaps. Kernels are
/// square, so one axis decides both.
pub fn check_gridding(dilations: &[usize], kernel: usize) -> Gridding {
    let set = reachable_offsets(dilations, kernel);
    let reach = *set.last().unwrap_or(&0);
    let holes: Vec<i64> = (-reach..=reach).filter(|o| !set.contains(o)).collect();
    if holes.is_empty() {
        Gridding::Ok { reach }
    } else {
        Gridding::Holes { reach, holes }
    }
}

/// Exact trainable scalar count for `config`.
pub fn count_params(config: &NetworkConfig) -> usize {
    GraphSpec::from_config(config)
        .map(|g| g.convs().map(|(_, s)| s.param_count()).sum())
        .expect("zero-parameter network always traces")
}

/// Parameter counts grouped by block type (`head`, `ddrb`, `erpab`, ...).
pub fn param_breakdown(config: &NetworkConfig) -> Result<BTreeMap<String, usize>> {
    let graph = GraphSpec::from_config(config)?;
    let mut out = BTreeMap::new();
    for (node, spec) in graph.convs() {
        *out.entry(block_group(&node.label)).or_insert(0) += spec.param_count();
    }
    Ok(out)
}

fn block_group(label: &str) -> String {
    let parts: Vec<&str> = label.split('.').collect();
    match parts.as_slice() {
        [stage, "head" | "tail", ..] => format!("{stage}.io"),
        ["r2net", _, ..] => "r2net.blocks".into(),
        ["drnet", _, sub, ..] => format!("drnet.{sub}"),
        _ => label.to_string(),
    }
}

/// How a multiply-accumulate is counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// One operation per multiply-accumulate.
    #[default]
    MacAsOne,
    /// A multiply and an add per multiply-accumulate.
    TwoPerMac,
}

impl FlopConvention {
    pub fn ops_per_mac(self) -> u64 {
        match self {
            FlopConvention::MacAsOne => 1,
            FlopConvention::TwoPerMac => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub height: usize,
    pub width: usize,
    pub convention: FlopConvention,
    /// Multiply-accumulates of all convolutions.
    pub conv_macs: u64,
    /// `conv_macs` under `convention`; the headline figure.
    pub conv_flops: u64,
    pub bias_adds: u64,
    pub elementwise_adds: u64,
    pub elementwise_muls: u64,
    pub activations: u64,
}

impl FlopReport {
    /// Convolutions plus every itemized elementwise operation.
    pub fn total_with_elementwise(&self) -> u64 {
        self.conv_flops
            + self.bias_adds
            + self.elementwise_adds
            + self.elementwise_muls
            + self.activations
    }
}

pub fn flop_report(graph: &GraphSpec, height: usize, width: usize, convention: FlopConvention) -> FlopReport {
    let pixels = (height * width) as u64;
    let mut r = FlopReport {
        height,
        width,
        convention,
        conv_macs: 0,
        conv_flops: 0,
        bias_adds: 0,
        elementwise_adds: 0,
        elementwise_muls: 0,
        activations: 0,
    };
    for node in &graph.nodes {
        let c = node.channels as u64 * pixels;
        match &node.kind {
            NodeKind::Conv { spec } => {
                r.conv_macs += spec.macs_per_pixel() as u64 * pixels;
                if spec.has_bias {
                    r.bias_adds += c;
                }
            }
            NodeKind::Add => r.elementwise_adds += (node.inputs.len() as u64 - 1) * c,
            NodeKind::Mul => r.elementwise_muls += c,
            NodeKind::Relu | NodeKind::Sigmoid => r.activations += c,
            NodeKind::Input | NodeKind::Concat => {}
        }
    }
    r.conv_flops = r.conv_macs * convention.ops_per_mac();
    r
}

/// Convolution FLOPs of one `height`×`width` forward pass.
pub fn estimate_flops(
    config: &NetworkConfig,
    height: usize,
    width: usize,
    convention: FlopConvention,
) -> Result<FlopReport> {
    if height == 0 || width == 0 {
        return Err(Error::config("analysis.input_size", "height and width must be >= 1"));
    }
    Ok(flop_report(&GraphSpec::from_config(config)?, height, width, convention))
}

/// [`Ops`] backend that records the dataflow graph. Values carry
/// placeholder tensors of shape `[1, C, 1, 1]` so channel checks in the
/// forward code still apply.
pub struct GraphTracer<T> {
    graph: GraphSpec,
    values: Vec<(Option<usize>, Tensor<T>)>,
    param_names: HashMap<usize, String>,
    param_values: HashMap<usize, usize>,
    value_names: HashMap<usize, String>,
}

impl<T: Real> GraphTracer<T> {
    pub fn new(params: &DpeNetParams<T>) -> Self {
        let param_names = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (t as *const Tensor<T> as usize, n))
            .collect();
        GraphTracer {
            graph: GraphSpec::default(),
            values: Vec::new(),
            param_names,
            param_values: HashMap::new(),
            value_names: HashMap::new(),
        }
    }

    pub fn finish(self) -> GraphSpec {
        self.graph
    }

    fn node_of(&self, v: usize) -> Result<usize> {
        self.values[v]
            .0
            .ok_or_else(|| Error::config("trace", "parameter used as an activation"))
    }

    fn channels(&self, v: usize) -> usize {
        self.values[v].1.shape().get(1).copied().unwrap_or(0)
    }

    fn push(&mut self, kind: NodeKind, inputs: &[usize], channels: usize, label: String) -> Result<usize> {
        let inputs = inputs
            .iter()
            .map(|&v| self.node_of(v))
            .collect::<Result<Vec<_>>>()?;
        self.graph.nodes.push(GraphNode {
            kind,
            inputs,
            channels,
            label,
        });
        self.values
            .push((Some(self.graph.nodes.len() - 1), Tensor::zeros(&[1, channels, 1, 1])));
        Ok(self.values.len() - 1)
    }

    fn merge(&mut self, kind: NodeKind, inputs: &[usize]) -> Result<usize> {
        let c = self.channels(inputs[0]);
        if inputs.iter().any(|&v| self.channels(v) != c) {
            return Err(Error::config("trace", "merged values differ in channel count"));
        }
        self.push(kind, inputs, c, String::new())
    }

    fn untraceable(what: &str) -> Error {
        Error::config("trace", format!("{what} is not part of the network graph"))
    }
}

impl<T: Real> Ops<T> for GraphTracer<T> {
    type Value = usize;

    fn input(&mut self, value: Tensor<T>) -> usize {
        let c = value.shape().get(1).copied().unwrap_or(0);
        self.push(NodeKind::Input, &[], c, "input".into())
            .expect("input has no dependencies")
    }

    fn param(&mut self, value: &Tensor<T>) -> usize {
        let key = value as *const Tensor<T> as usize;
        if let Some(&v) = self.param_values.get(&key) {
            return v;
        }
        self.values.push((None, Tensor::zeros(value.shape())));
        let v = self.values.len() - 1;
        self.param_values.insert(key, v);
        if let Some(name) = self.param_names.get(&key).cloned() {
            self.value_names.insert(v, name);
        }
        v
    }

    fn value<'a>(&'a self, v: &'a usize) -> &'a Tensor<T> {
        &self.values[*v].1
    }

    fn conv2d(&mut self, x: &usize, weight: &usize, bias: Option<&usize>, dilation: usize) -> Result<usize> {
        let (out, inp, k, _) = self.values[*weight].1.dims4()?;
        if inp != self.channels(*x) {
            return Err(Error::shape("conv2d input channels", &[inp], &[self.channels(*x)]));
        }
        let spec = ConvSpec {
            kernel: k,
            dilation,
            in_channels: inp,
            out_channels: out,
            has_bias: bias.is_some(),
        };
        let label = self
            .value_names
            .get(weight)
            .map(|n| n.trim_end_matches(".weight").to_string())
            .unwrap_or_default();
        self.push(NodeKind::Conv { spec }, &[*x], out, label)
    }

    fn add(&mut self, a: &usize, b: &usize) -> Result<usize> {
        self.merge(NodeKind::Add, &[*a, *b])
    }

    fn sum(&mut self, terms: &[usize]) -> Result<usize> {
        self.merge(NodeKind::Add, terms)
    }

    fn mul(&mut self, a: &usize, b: &usize) -> Result<usize> {
        self.merge(NodeKind::Mul, &[*a, *b])
    }

    fn relu(&mut self, a: &usize) -> usize {
        let c = self.channels(*a);
        self.push(NodeKind::Relu, &[*a], c, String::new())
            .expect("activation input is traced")
    }

    fn sigmoid(&mut self, a: &usize) -> usize {
        let c = self.channels(*a);
        self.push(NodeKind::Sigmoid, &[*a], c, String::new())
            .expect("activation input is traced")
    }

    fn concat_channels(&mut self, parts: &[usize]) -> Result<usize> {
        let c = parts.iter().map(|&p| self.channels(p)).sum();
        self.push(NodeKind::Concat, parts, c, String::new())
    }

    fn mse(&mut self, _: &usize, _: &usize) -> Result<usize> {
        Err(Self::untraceable("mse"))
    }

    fn edge(&mut self, _: &usize, _: &usize, _: &LossConfig) -> Result<usize> {
        Err(Self::untraceable("edge loss"))
    }

    fn ssim(&mut self, _: &usize, _: &usize, _: &LossConfig) -> Result<usize> {
        Err(Self::untraceable("ssim"))
    }

    fn affine(&mut self, _: &[(usize, T)], _: T) -> Result<usize> {
        Err(Self::untraceable("affine"))
    }
}

/// Everything the `analyze` command reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub network: NetworkConfig,
    pub drb_receptive_field: Vec<usize>,
    pub ddrb_receptive_field: Vec<usize>,
    pub network_receptive_field: usize,
    pub ddrb_gridding: Gridding,
    pub total_params: usize,
    pub param_breakdown: BTreeMap<String, usize>,
    pub flops: FlopReport,
}

pub fn analyze(config: &NetworkConfig, height: usize, width: usize, convention: FlopConvention) -> Result<AnalysisReport> {
    let graph = GraphSpec::from_config(config)?;
    let drb = GraphSpec::dilated_stack(config.channels, 3, &[1; 6])?;
    let ddrb = GraphSpec::dilated_stack(config.channels, 3, &crate::blocks::DDRB_DILATIONS)?;
    if height == 0 || width == 0 {
        return Err(Error::config("analysis.input_size", "height and width must be >= 1"));
    }
    Ok(AnalysisReport {
        network: config.clone(),
        drb_receptive_field: receptive_field(&drb)?,
        ddrb_receptive_field: receptive_field(&ddrb)?,
        network_receptive_field: receptive_field(&graph)?.into_iter().max().unwrap_or(1),
        ddrb_gridding: check_gridding(&crate::blocks::DDRB_DILATIONS, 3),
        total_params: graph.convs().map(|(_, s)| s.param_count()).sum(),
        param_breakdown: param_breakdown(config)?,
        flops: flop_report(&graph, height, width, convention),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pointwise_conv_has_unit_field() {
        let g = GraphSpec::serial(4, &[ConvSpec::new(1, 1, 4, 4)]).unwrap();
        assert_eq!(receptive_field(&g).unwrap(), vec![1]);
    }

    #[test]
    fn serial_rejects_broken_channel_chain() {
        let err = GraphSpec::serial(3, &[ConvSpec::new(3, 1, 3, 8), ConvSpec::new(3, 1, 4, 8)]);
        assert!(err.is_err());
    }

    #[test]
    fn single_layer_offsets() {
        let set = reachable_offsets(&[3], 3);
        assert_eq!(set.into_iter().collect::<Vec<_>>(), vec![-3, 0, 3]);
        assert!(check_gridding(&[1], 3).is_ok());
    }

    #[test]
    fn traced_graph_labels_convs() {
        let g = GraphSpec::from_config(&NetworkConfig::new(1, 1, 4)).unwrap();
        let labels: Vec<&str> = g.convs().map(|(n, _)| n.label.as_str()).collect();
        assert_eq!(labels.first(), Some(&"r2net.head"));
        assert!(labels.contains(&"drnet.block1.pdrb.fuse"));
        assert_eq!(labels.last(), Some(&"drnet.tail"));
    }

    #[test]
    fn three_by_three_conv_flops() {
        let g = GraphSpec::serial(32, &[ConvSpec::new(3, 1, 32, 32)]).unwrap();
        let r = flop_report(&g, 4, 4, FlopConvention::TwoPerMac);
        assert_eq!(r.conv_flops, 294_912);
        assert_eq!(flop_report(&g, 4, 4, FlopConvention::MacAsOne).conv_flops, 147_456);
    }
}
