//! Reverse-mode gradients checked against central finite differences.
//!
//! Coordinates whose `±h` perturbation flips the sign of any ReLU input are
//! skipped: the difference quotient straddles a kink there and does not
//! estimate either one-sided derivative.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{elementwise, Eager, Ops, Tape};
use crate::blocks::{
    ddrb_forward, erpab_forward, pab_forward, pdrb_forward, res_block_forward, ConvLayer, ConvSpec, DdrbParams,
    ErpabParams, LayerVisitor, PabParams, PdrbParams, ResBlockParams,
};
use crate::error::Result;
use crate::losses::{loss_terms, EdgeOperator, LossConfig, LossKind};
use crate::networks::{dpenet_forward, DpeNetParams, NetworkConfig};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// A scalar function of some input tensors and some parameters.
pub trait Objective {
    /// Evaluates the scalar objective. `inputs` are registered by the caller.
    fn eval<O: Ops<f64>>(&self, ops: &mut O, inputs: &[O::Value]) -> Result<O::Value>;

    fn params(&self) -> Vec<&Tensor<f64>>;

    fn params_mut(&mut self) -> Vec<&mut Tensor<f64>>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Coordinates sampled per tensor; tensors this small are checked fully.
    pub max_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            floor: 1e-4,
            max_per_tensor: 48,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor, index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
    pub skipped_at_kinks: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst.or(self.worst.take());
        }
        self.checked += other.checked;
        self.skipped_at_kinks += other.skipped_at_kinks;
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Eager backend that records the sign of every ReLU input.
#[derive(Default)]
pub struct KinkRecorder {
    pub signs: Vec<bool>,
}

impl<T: Real> Ops<T> for KinkRecorder {
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

    fn conv2d(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, d: usize) -> Result<Tensor<T>> {
        Eager.conv2d(x, w, b, d)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        Eager.add(a, b)
    }

    fn sum(&mut self, terms: &[Tensor<T>]) -> Result<Tensor<T>> {
        Eager.sum(terms)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        Eager.mul(a, b)
    }

    fn relu(&mut self, a: &Tensor<T>) -> Tensor<T> {
        self.signs.extend(a.data().iter().map(|&v| v > T::zero()));
        elementwise::relu(a)
    }

    fn sigmoid(&mut self, a: &Tensor<T>) -> Tensor<T> {
        Eager.sigmoid(a)
    }

    fn concat_channels(&mut self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        Eager.concat_channels(parts)
    }

    fn mse(&mut self, s: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        Eager.mse(s, y)
    }

    fn edge(&mut self, s: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
        Eager.edge(s, y, cfg)
    }

    fn ssim(&mut self, s: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
        Eager.ssim(s, y, cfg)
    }

    fn affine(&mut self, terms: &[(Tensor<T>, T)], bias: T) -> Result<Tensor<T>> {
        Eager.affine(terms, bias)
    }
}

fn eval_recorded<F: Objective>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<bool>)> {
    let mut rec = KinkRecorder::default();
    let vals: Vec<Tensor<f64>> = inputs.iter().map(|t| rec.input(t.clone())).collect();
    let out = f.eval(&mut rec, &vals)?;
    Ok((out.item(), rec.signs))
}

/// Compares reverse-mode gradients of `f` with respect to every input and
/// parameter against central differences.
pub fn check_gradients<F: Objective>(
    f: &mut F,
    inputs: &mut [Tensor<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut tape = Tape::with_input_grads();
    let vars: Vec<_> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    let grads = tape.backward(out);
    let input_grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs.iter())
        .map(|(v, t)| grads.of(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let param_grads: Vec<Tensor<f64>> = f
        .params()
        .into_iter()
        .map(|p| grads.of_param(p).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(tape);

    let (_, base_signs) = eval_recorded(f, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let h = cfg.step;

    let pick = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if len <= cfg.max_per_tensor {
            (0..len).collect()
        } else {
            let mut idx = sample(rng, len, cfg.max_per_tensor).into_vec();
            idx.sort_unstable();
            idx
        }
    };

    for t in 0..inputs.len() {
        for i in pick(inputs[t].len(), &mut rng) {
            let orig = inputs[t].data()[i];
            inputs[t].data_mut()[i] = orig + h;
            let (lp, sp) = eval_recorded(f, inputs)?;
            inputs[t].data_mut()[i] = orig - h;
            let (lm, sm) = eval_recorded(f, inputs)?;
            inputs[t].data_mut()[i] = orig;
            record(&mut report, &format!("input{t}"), i, input_grads[t].data()[i], (lp, sp), (lm, sm), &base_signs, cfg);
        }
    }
    let n_params = param_grads.len();
    for p in 0..n_params {
        let len = param_grads[p].len();
        for i in pick(len, &mut rng) {
            let orig = f.params()[p].data()[i];
            f.params_mut()[p].data_mut()[i] = orig + h;
            let (lp, sp) = eval_recorded(f, inputs)?;
            f.params_mut()[p].data_mut()[i] = orig - h;
            let (lm, sm) = eval_recorded(f, inputs)?;
            f.params_mut()[p].data_mut()[i] = orig;
            record(&mut report, &format!("param{p}"), i, param_grads[p].data()[i], (lp, sp), (lm, sm), &base_signs, cfg);
        }
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn record(
    report: &mut GradCheckReport,
    name: &str,
    index: usize,
    analytic: f64,
    plus: (f64, Vec<bool>),
    minus: (f64, Vec<bool>),
    base: &[bool],
    cfg: &GradCheckConfig,
) {
    if plus.1 != base || minus.1 != base {
        report.skipped_at_kinks += 1;
        return;
    }
    let numeric = (plus.0 - minus.0) / (2.0 * cfg.step);
    let err = relative_error(analytic, numeric, cfg.floor);
    report.checked += 1;
    if err > report.max_rel_error || report.worst.is_none() {
        report.max_rel_error = report.max_rel_error.max(err);
        report.worst = Some((name.to_string(), index, analytic, numeric));
    }
}

/// A block, network or loss under test. Blocks are reduced to a scalar by
/// `mse(output, target)` with `inputs = [x, target]`; losses take
/// `inputs = [s, y]`.
#[derive(Clone, Debug)]
pub enum Subject {
    Conv(ConvLayer<f64>),
    ResBlock(ResBlockParams<f64>),
    Ddrb(DdrbParams<f64>),
    Pdrb(PdrbParams<f64>),
    Pab(PabParams<f64>),
    Erpab(ErpabParams<f64>),
    Network(DpeNetParams<f64>),
    Loss(LossKind, LossConfig),
}

impl Subject {
    fn visitor(&self) -> Option<&dyn LayerVisitor<f64>> {
        Some(match self {
            Subject::Conv(p) => p,
            Subject::ResBlock(p) => p,
            Subject::Ddrb(p) => p,
            Subject::Pdrb(p) => p,
            Subject::Pab(p) => p,
            Subject::Erpab(p) => p,
            Subject::Network(p) => p,
            Subject::Loss(..) => return None,
        })
    }

    fn visitor_mut(&mut self) -> Option<&mut dyn LayerVisitor<f64>> {
        Some(match self {
            Subject::Conv(p) => p,
            Subject::ResBlock(p) => p,
            Subject::Ddrb(p) => p,
            Subject::Pdrb(p) => p,
            Subject::Pab(p) => p,
            Subject::Erpab(p) => p,
            Subject::Network(p) => p,
            Subject::Loss(..) => return None,
        })
    }
}

impl Objective for Subject {
    fn eval<O: Ops<f64>>(&self, ops: &mut O, inputs: &[O::Value]) -> Result<O::Value> {
        let (x, target) = (&inputs[0], &inputs[1]);
        let out = match self {
            Subject::Conv(p) => p.forward(ops, x, "conv")?,
            Subject::ResBlock(p) => res_block_forward(ops, x, p)?,
            Subject::Ddrb(p) => ddrb_forward(ops, x, p)?,
            Subject::Pdrb(p) => pdrb_forward(ops, x, p)?,
            Subject::Pab(p) => pab_forward(ops, x, p)?,
            Subject::Erpab(p) => erpab_forward(ops, x, p)?,
            Subject::Network(p) => {
                // Both outputs contribute so both stages are exercised.
                let (s_c, s) = dpenet_forward(ops, x, p)?;
                let a = ops.mse(&s_c, target)?;
                let b = ops.mse(&s, target)?;
                return ops.affine(&[(a, 1.0), (b, 1.0)], 0.0);
            }
            Subject::Loss(kind, cfg) => {
                let terms = loss_terms(ops, *kind, x, target, cfg)?;
                let bias = terms.iter().map(|t| t.offset).sum();
                let weighted: Vec<_> = terms.into_iter().map(|t| (t.value, t.weight)).collect();
                return ops.affine(&weighted, bias);
            }
        };
        ops.mse(&out, target)
    }

    fn params(&self) -> Vec<&Tensor<f64>> {
        let mut out = Vec::new();
        if let Some(v) = self.visitor() {
            v.visit_layers("", &mut |_, l| {
                out.push(&l.weight);
                out.extend(l.bias.as_ref());
            });
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut out = Vec::new();
        if let Some(v) = self.visitor_mut() {
            v.visit_layers_mut("", &mut |_, l| {
                let ConvLayer { weight, bias, .. } = l;
                out.push(weight);
                out.extend(bias.as_mut());
            });
        }
        out
    }
}

fn random_layers(seed: u64) -> impl FnMut(ConvSpec) -> ConvLayer<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move |spec| {
        let mut layer = ConvLayer::init(spec, &mut rng);
        if let Some(b) = &mut layer.bias {
            *b = Tensor::uniform(b.shape(), 0.1, &mut rng);
        }
        layer
    }
}

/// The subject's own output plus small noise. Keeping the residual small
/// keeps the objective, and with it the rounding error of the difference
/// quotient, small relative to the gradients being checked.
fn near_target(subject: &Subject, x: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut ops = Eager;
    let out = match subject {
        Subject::Conv(p) => p.forward(&mut ops, x, "conv"),
        Subject::ResBlock(p) => res_block_forward(&mut ops, x, p),
        Subject::Ddrb(p) => ddrb_forward(&mut ops, x, p),
        Subject::Pdrb(p) => pdrb_forward(&mut ops, x, p),
        Subject::Pab(p) => pab_forward(&mut ops, x, p),
        Subject::Erpab(p) => erpab_forward(&mut ops, x, p),
        Subject::Network(p) => dpenet_forward(&mut ops, x, p).map(|(_, s)| s),
        Subject::Loss(..) => Ok(x.clone()),
    }
    .expect("suite subjects are well formed");
    let noise = Tensor::uniform(out.shape(), 0.05, rng);
    out.zip_map(&noise, "near_target", |a, b| a + b).expect("same shape")
}

/// Every block, the composed network and every loss, with parameters and
/// inputs drawn from `seed`.
pub fn standard_subjects(seed: u64) -> Vec<(String, Subject, Vec<Tensor<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let mut make = random_layers(seed);
    let ch = 3;
    let mut out: Vec<(String, Subject, Vec<Tensor<f64>>)> = Vec::new();
    for d in [1, 2, 5] {
        out.push((format!("conv3x3_d{d}"), Subject::Conv(make(ConvSpec::new(3, d, ch, 2 * ch))), vec![]));
    }
    out.push(("conv1x1".into(), Subject::Conv(make(ConvSpec::new(1, 1, 2 * ch, ch))), vec![]));
    out.push((
        "conv3x3_no_bias".into(),
        Subject::Conv(make(ConvSpec { has_bias: false, ..ConvSpec::new(3, 1, ch, ch) })),
        vec![],
    ));
    out.push(("res_block".into(), Subject::ResBlock(ResBlockParams::new(ch, (2, 2), &mut make)), vec![]));
    out.push(("ddrb".into(), Subject::Ddrb(DdrbParams::dilated_dense(ch, &mut make)), vec![]));
    out.push(("pdrb".into(), Subject::Pdrb(PdrbParams::new(ch, &mut make)), vec![]));
    out.push(("pab".into(), Subject::Pab(PabParams::new(ch, false, &mut make)), vec![]));
    out.push(("pab_sigmoid".into(), Subject::Pab(PabParams::new(ch, true, &mut make)), vec![]));
    out.push(("erpab".into(), Subject::Erpab(ErpabParams::new(ch, true, false, &mut make)), vec![]));
    for (name, subject, inputs) in out.iter_mut() {
        let c_in = if name == "conv1x1" { 2 * ch } else { ch };
        let x = Tensor::uniform(&[1, c_in, 8, 8], 1.0, &mut rng);
        let target = near_target(subject, &x, &mut rng);
        *inputs = vec![x, target];
    }
    let net = Subject::Network(DpeNetParams::build(&NetworkConfig::new(1, 1, ch), &mut make));
    let x = Tensor::uniform_range(&[1, 3, 12, 12], 0.0, 1.0, &mut rng);
    let target = near_target(&net, &x, &mut rng);
    out.push(("dpenet".into(), net, vec![x, target]));

    let cfg = LossConfig::default();
    let log = LossConfig {
        edge_operator: EdgeOperator::MultiScaleLog { sigmas: vec![1.0, 2.0] },
        ..cfg.clone()
    };
    let pair = |rng: &mut ChaCha8Rng| {
        vec![
            Tensor::uniform_range(&[2, 2, 13, 12], 0.0, 1.0, rng),
            Tensor::uniform_range(&[2, 2, 13, 12], 0.0, 1.0, rng),
        ]
    };
    for kind in LossKind::ALL {
        out.push((format!("loss_{}", kind.name()), Subject::Loss(kind, cfg.clone()), pair(&mut rng)));
    }
    out.push(("loss_edge_log".into(), Subject::Loss(LossKind::Edge, log), pair(&mut rng)));
    out
}

/// Runs [`standard_subjects`] for every seed; one merged report per subject.
pub fn run_standard_suite(seeds: std::ops::Range<u64>, cfg: &GradCheckConfig) -> Result<Vec<(String, GradCheckReport)>> {
    let mut merged: Vec<(String, GradCheckReport)> = Vec::new();
    for seed in seeds {
        for (name, mut subject, mut inputs) in standard_subjects(seed) {
            let report = check_gradients(&mut subject, &mut inputs, &GradCheckConfig { seed, ..*cfg })?;
            match merged.iter_mut().find(|(n, _)| *n == name) {
                Some((_, r)) => r.merge(report),
                None => merged.push((name, report)),
            }
        }
    }
    Ok(merged)
}
