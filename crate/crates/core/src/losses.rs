//! Training objectives: MSE, Charbonnier edge loss on the Laplacian, SSIM
//! loss and the two hybrid combinations.
//!
//! Every loss is available both as a plain function on tensors and as an
//! [`Ops`] node with an analytic gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{Eager, Ops};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Linear high-pass operator applied before the Charbonnier penalty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EdgeOperator {
    /// 3×3 discrete Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]`.
    Laplacian,
    /// Laplacian of Gaussian at each listed scale; the penalty is averaged
    /// over scales.
    MultiScaleLog { sigmas: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma_e: f64,
    pub gamma_l2: f64,
    pub epsilon: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub edge_operator: EdgeOperator,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma_e: 0.05,
            gamma_l2: 1.0,
            epsilon: 1e-3,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            ssim_window: 11,
            ssim_sigma: 1.5,
            edge_operator: EdgeOperator::Laplacian,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("loss.epsilon", self.epsilon),
            ("loss.k1", self.k1),
            ("loss.k2", self.k2),
            ("loss.dynamic_range", self.dynamic_range),
            ("loss.ssim_sigma", self.ssim_sigma),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        if self.ssim_window % 2 == 0 || self.ssim_window == 0 {
            return Err(Error::config(
                "loss.ssim_window",
                format!("window size must be odd, got {}", self.ssim_window),
            ));
        }
        if let EdgeOperator::MultiScaleLog { sigmas } = &self.edge_operator {
            if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::config(
                    "loss.edge_operator.sigmas",
                    "need at least one positive scale",
                ));
            }
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

/// Which objective the training loop minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `(1 - SSIM) + gamma_e * edge`
    Hybrid,
    /// `(1 - SSIM) + gamma_l2 * MSE`
    SsimMse,
    Ssim,
    Mse,
    Edge,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Mse,
        LossKind::Edge,
        LossKind::Ssim,
        LossKind::SsimMse,
        LossKind::Hybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Hybrid => "hybrid",
            LossKind::SsimMse => "ssim_mse",
            LossKind::Ssim => "ssim",
            LossKind::Mse => "mse",
            LossKind::Edge => "edge",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("loss", format!("unknown loss `{s}`")))
    }
}

/// One weighted summand of an objective: contributes
/// `offset + weight * value`.
#[derive(Clone, Debug)]
pub struct LossTerm<V, T> {
    pub name: &'static str,
    pub value: V,
    pub weight: T,
    pub offset: T,
}

impl<V, T: Real> LossTerm<V, T> {
    pub fn contribution(&self, raw: T) -> T {
        self.offset + self.weight * raw
    }
}

/// Decomposes `kind` into its weighted terms, recording them on `ops`.
pub fn loss_terms<T: Real, O: Ops<T>>(
    ops: &mut O,
    kind: LossKind,
    s: &O::Value,
    y: &O::Value,
    cfg: &LossConfig,
) -> Result<Vec<LossTerm<O::Value, T>>> {
    let ssim_term = |ops: &mut O| -> Result<LossTerm<O::Value, T>> {
        Ok(LossTerm {
            name: "ssim",
            value: ops.ssim(s, y, cfg)?,
            weight: -T::one(),
            offset: T::one(),
        })
    };
    let plain = |name, value| LossTerm {
        name,
        value,
        weight: T::one(),
        offset: T::zero(),
    };
    Ok(match kind {
        LossKind::Hybrid => vec![
            ssim_term(ops)?,
            LossTerm {
                name: "edge",
                value: ops.edge(s, y, cfg)?,
                weight: T::lit(cfg.gamma_e),
                offset: T::zero(),
            },
        ],
        LossKind::SsimMse => vec![
            ssim_term(ops)?,
            LossTerm {
                name: "mse",
                value: ops.mse(s, y)?,
                weight: T::lit(cfg.gamma_l2),
                offset: T::zero(),
            },
        ],
        LossKind::Ssim => vec![ssim_term(ops)?],
        LossKind::Mse => vec![plain("mse", ops.mse(s, y)?)],
        LossKind::Edge => vec![plain("edge", ops.edge(s, y, cfg)?)],
    })
}

/// Evaluates `kind` on plain tensors.
pub fn loss<T: Real>(kind: LossKind, s: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    let mut ops = Eager;
    let terms = loss_terms(&mut ops, kind, s, y, cfg)?;
    Ok(terms
        .iter()
        .map(|t| t.contribution(t.value.item()))
        .fold(T::zero(), |a, b| a + b))
}

/// Mean of `(s - y)^2` over every element.
pub fn mse_loss<T: Real>(s: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
    kernels::mse(s, y)
}

/// Mean Charbonnier penalty `sqrt((Δs - Δy)^2 + ε^2)`.
pub fn edge_loss<T: Real>(s: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    kernels::edge(s, y, cfg)
}

/// Mean local SSIM over valid window positions, channels and batch.
pub fn ssim<T: Real>(s: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    kernels::ssim(s, y, cfg)
}

pub fn ssim_loss<T: Real>(s: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    Ok(T::one() - kernels::ssim(s, y, cfg)?)
}

pub fn hybrid_loss<T: Real>(s: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    loss(LossKind::Hybrid, s, y, cfg)
}

pub fn ssim_mse_loss<T: Real>(s: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    loss(LossKind::SsimMse, s, y, cfg)
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Square odd-sized 2D kernel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2d {
    pub size: usize,
    pub taps: Vec<f64>,
}

impl Kernel2d {
    pub fn laplacian() -> Self {
        Kernel2d {
            size: 3,
            taps: vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
        }
    }

    /// Gaussian (radius `ceil(3σ)`) followed by the 3×3 Laplacian, folded
    /// into one kernel.
    pub fn laplacian_of_gaussian(sigma: f64) -> Self {
        let gsize = 2 * (3.0 * sigma).ceil() as usize + 1;
        let g1 = gaussian_taps(gsize, sigma);
        let lap = Self::laplacian();
        let size = gsize + 2;
        let mut taps = vec![0.0; size * size];
        for gy in 0..gsize {
            for gx in 0..gsize {
                let gv = g1[gy] * g1[gx];
                for ly in 0..3 {
                    for lx in 0..3 {
                        taps[(gy + ly) * size + gx + lx] += gv * lap.taps[ly * 3 + lx];
                    }
                }
            }
        }
        Kernel2d { size, taps }
    }
}

impl EdgeOperator {
    pub fn kernels(&self) -> Vec<Kernel2d> {
        match self {
            EdgeOperator::Laplacian => vec![Kernel2d::laplacian()],
            EdgeOperator::MultiScaleLog { sigmas } => sigmas
                .iter()
                .map(|&s| Kernel2d::laplacian_of_gaussian(s))
                .collect(),
        }
    }
}

/// Forward and gradient kernels behind the loss nodes.
pub(crate) mod kernels {
    use super::*;

    pub fn mse<T: Real>(s: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
        s.expect_same_shape(y, "mse_loss")?;
        let total: T = s
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(total / T::from_usize(s.len()).unwrap())
    }

    pub fn mse_grad<T: Real>(s: &Tensor<T>, y: &Tensor<T>, upstream: T) -> (Tensor<T>, Tensor<T>) {
        let k = upstream * T::lit(2.0) / T::from_usize(s.len()).unwrap();
        let gs = s.zip_map(y, "mse grad", |a, b| k * (a - b)).unwrap();
        let gy = gs.map(|v| -v);
        (gs, gy)
    }

    /// Correlation with replicate (clamp-to-edge) padding, one plane.
    fn replicate_filter<T: Real>(plane: &[T], h: usize, w: usize, k: &Kernel2d) -> Vec<T> {
        let r = (k.size / 2) as isize;
        let taps: Vec<T> = k.taps.iter().map(|&v| T::lit(v)).collect();
        let mut out = vec![T::zero(); h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for ky in 0..k.size {
                    let sy = (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                    for kx in 0..k.size {
                        let t = taps[ky * k.size + kx];
                        if t == T::zero() {
                            continue;
                        }
                        let sx = (x as isize + kx as isize - r).clamp(0, w as isize - 1) as usize;
                        acc += t * plane[sy * w + sx];
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    fn replicate_filter_adjoint<T: Real>(
        grad: &[T],
        h: usize,
        w: usize,
        k: &Kernel2d,
        out: &mut [T],
    ) {
        let r = (k.size / 2) as isize;
        let taps: Vec<T> = k.taps.iter().map(|&v| T::lit(v)).collect();
        for y in 0..h {
            for x in 0..w {
                let g = grad[y * w + x];
                for ky in 0..k.size {
                    let sy = (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                    for kx in 0..k.size {
                        let t = taps[ky * k.size + kx];
                        if t == T::zero() {
                            continue;
                        }
                        let sx = (x as isize + kx as isize - r).clamp(0, w as isize - 1) as usize;
                        out[sy * w + sx] += t * g;
                    }
                }
            }
        }
    }

    fn planes<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = t.dims4()?;
        Ok((b * c, h, w))
    }

    pub fn edge<T: Real>(s: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
        s.expect_same_shape(y, "edge_loss")?;
        let (n_planes, h, w) = planes(s)?;
        let eps2 = T::lit(cfg.epsilon * cfg.epsilon);
        let kernels = cfg.edge_operator.kernels();
        let diff = s.zip_map(y, "edge_loss", |a, b| a - b)?;
        let mut total = T::zero();
        for k in &kernels {
            for p in 0..n_planes {
                let d = replicate_filter(&diff.data()[p * h * w..(p + 1) * h * w], h, w, k);
                total += d.iter().map(|&v| (v * v + eps2).sqrt()).sum::<T>();
            }
        }
        Ok(total / T::from_usize(s.len() * kernels.len()).unwrap())
    }

    pub fn edge_grad<T: Real>(
        s: &Tensor<T>,
        y: &Tensor<T>,
        cfg: &LossConfig,
        upstream: T,
    ) -> (Tensor<T>, Tensor<T>) {
        let (n_planes, h, w) = planes(s).unwrap();
        let eps2 = T::lit(cfg.epsilon * cfg.epsilon);
        let kernels = cfg.edge_operator.kernels();
        let scale = upstream / T::from_usize(s.len() * kernels.len()).unwrap();
        let diff = s.zip_map(y, "edge grad", |a, b| a - b).unwrap();
        let mut gs = Tensor::zeros(s.shape());
        for k in &kernels {
            for p in 0..n_planes {
                let range = p * h * w..(p + 1) * h * w;
                let d = replicate_filter(&diff.data()[range.clone()], h, w, k);
                let gd: Vec<T> = d.iter().map(|&v| scale * v / (v * v + eps2).sqrt()).collect();
                replicate_filter_adjoint(&gd, h, w, k, &mut gs.data_mut()[range]);
            }
        }
        let gy = gs.map(|v| -v);
        (gs, gy)
    }

    /// Separable Gaussian filter keeping only positions where the window
    /// fits entirely inside the plane.
    fn blur_valid<T: Real>(plane: &[T], h: usize, w: usize, g: &[T]) -> Vec<T> {
        let n = g.len();
        let (oh, ow) = (h - n + 1, w - n + 1);
        let mut tmp = vec![T::zero(); h * ow];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for x in 0..ow {
                tmp[y * ow + x] = g.iter().zip(&row[x..x + n]).map(|(&a, &b)| a * b).sum();
            }
        }
        let mut out = vec![T::zero(); oh * ow];
        for y in 0..oh {
            for (i, &gi) in g.iter().enumerate() {
                let src = &tmp[(y + i) * ow..(y + i + 1) * ow];
                for (o, &v) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                    *o += gi * v;
                }
            }
        }
        out
    }

    fn blur_valid_adjoint<T: Real>(grad: &[T], h: usize, w: usize, g: &[T]) -> Vec<T> {
        let n = g.len();
        let (oh, ow) = (h - n + 1, w - n + 1);
        let mut tmp = vec![T::zero(); h * ow];
        for y in 0..oh {
            for (i, &gi) in g.iter().enumerate() {
                let dst = &mut tmp[(y + i) * ow..(y + i + 1) * ow];
                for (d, &v) in dst.iter_mut().zip(&grad[y * ow..(y + 1) * ow]) {
                    *d += gi * v;
                }
            }
        }
        let mut out = vec![T::zero(); h * w];
        for y in 0..h {
            for x in 0..ow {
                let v = tmp[y * ow + x];
                for (o, &gi) in out[y * w + x..y * w + x + n].iter_mut().zip(g) {
                    *o += gi * v;
                }
            }
        }
        out
    }

    struct SsimMaps<T> {
        mu_s: Vec<T>,
        mu_y: Vec<T>,
        q_ss: Vec<T>,
        q_yy: Vec<T>,
        q_sy: Vec<T>,
    }

    struct SsimSetup<T> {
        taps: Vec<T>,
        c1: T,
        c2: T,
        n_planes: usize,
        h: usize,
        w: usize,
        positions: usize,
    }

    fn setup<T: Real>(s: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<SsimSetup<T>> {
        s.expect_same_shape(y, "ssim")?;
        let (n_planes, h, w) = planes(s)?;
        let n = cfg.ssim_window;
        if h < n || w < n {
            return Err(Error::config(
                "ssim",
                format!("image {h}x{w} is smaller than the {n}x{n} window"),
            ));
        }
        Ok(SsimSetup {
            taps: gaussian_taps(n, cfg.ssim_sigma)
                .into_iter()
                .map(T::lit)
                .collect(),
            c1: T::lit(cfg.c1()),
            c2: T::lit(cfg.c2()),
            n_planes,
            h,
            w,
            positions: (h - n + 1) * (w - n + 1),
        })
    }

    fn maps<T: Real>(st: &SsimSetup<T>, sp: &[T], yp: &[T]) -> SsimMaps<T> {
        let (h, w, g) = (st.h, st.w, &st.taps);
        let prod = |a: &[T], b: &[T]| -> Vec<T> { a.iter().zip(b).map(|(&p, &q)| p * q).collect() };
        SsimMaps {
            mu_s: blur_valid(sp, h, w, g),
            mu_y: blur_valid(yp, h, w, g),
            q_ss: blur_valid(&prod(sp, sp), h, w, g),
            q_yy: blur_valid(&prod(yp, yp), h, w, g),
            q_sy: blur_valid(&prod(sp, yp), h, w, g),
        }
    }

    pub fn ssim<T: Real>(s: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
        let st = setup(s, y, cfg)?;
        let two = T::lit(2.0);
        let plane = st.h * st.w;
        let mut total = T::zero();
        for p in 0..st.n_planes {
            let m = maps(&st, &s.data()[p * plane..(p + 1) * plane], &y.data()[p * plane..(p + 1) * plane]);
            for i in 0..st.positions {
                let (ms, my) = (m.mu_s[i], m.mu_y[i]);
                let var_s = m.q_ss[i] - ms * ms;
                let var_y = m.q_yy[i] - my * my;
                let cov = m.q_sy[i] - ms * my;
                let num = (two * ms * my + st.c1) * (two * cov + st.c2);
                let den = (ms * ms + my * my + st.c1) * (var_s + var_y + st.c2);
                total += num / den;
            }
        }
        Ok(total / T::from_usize(st.positions * st.n_planes).unwrap())
    }

    /// Gradient of the mean SSIM with respect to `s` (and optionally `y`).
    pub fn ssim_grad<T: Real>(
        s: &Tensor<T>,
        y: &Tensor<T>,
        cfg: &LossConfig,
        upstream: T,
        want_y: bool,
    ) -> (Tensor<T>, Option<Tensor<T>>) {
        let st = setup(s, y, cfg).expect("validated on the forward pass");
        let two = T::lit(2.0);
        let plane = st.h * st.w;
        let scale = upstream / T::from_usize(st.positions * st.n_planes).unwrap();
        let mut gs = Tensor::zeros(s.shape());
        let mut gy = want_y.then(|| Tensor::zeros(y.shape()));
        for p in 0..st.n_planes {
            let range = p * plane..(p + 1) * plane;
            let sp = &s.data()[range.clone()];
            let yp = &y.data()[range.clone()];
            let m = maps(&st, sp, yp);
            let mut g_ms = vec![T::zero(); st.positions];
            let mut g_my = vec![T::zero(); st.positions];
            let mut g_qss = vec![T::zero(); st.positions];
            let mut g_qyy = vec![T::zero(); st.positions];
            let mut g_qsy = vec![T::zero(); st.positions];
            for i in 0..st.positions {
                let (ms, my) = (m.mu_s[i], m.mu_y[i]);
                let a1 = two * ms * my + st.c1;
                let a2 = two * (m.q_sy[i] - ms * my) + st.c2;
                let b1 = ms * ms + my * my + st.c1;
                let b2 = m.q_ss[i] - ms * ms + m.q_yy[i] - my * my + st.c2;
                let v = a1 * a2 / (b1 * b2) * scale;
                g_ms[i] = v * (two * my / a1 - two * my / a2 - two * ms / b1 + two * ms / b2);
                g_my[i] = v * (two * ms / a1 - two * ms / a2 - two * my / b1 + two * my / b2);
                g_qss[i] = -v / b2;
                g_qyy[i] = -v / b2;
                g_qsy[i] = two * v / a2;
            }
            let back = |g: &[T]| blur_valid_adjoint(g, st.h, st.w, &st.taps);
            let (b_ms, b_qss, b_qsy) = (back(&g_ms), back(&g_qss), back(&g_qsy));
            for (i, o) in gs.data_mut()[range.clone()].iter_mut().enumerate() {
                *o = b_ms[i] + two * sp[i] * b_qss[i] + yp[i] * b_qsy[i];
            }
            if let Some(gy) = gy.as_mut() {
                let (b_my, b_qyy) = (back(&g_my), back(&g_qyy));
                for (i, o) in gy.data_mut()[range].iter_mut().enumerate() {
                    *o = b_my[i] + two * yp[i] * b_qyy[i] + sp[i] * b_qsy[i];
                }
            }
        }
        (gs, gy)
    }
}
