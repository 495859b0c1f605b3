//! Independent reference implementations shared by the integration tests.
//! Everything here is written with plain nested loops over `f64`.
#![allow(dead_code)]

use dpenet_core::blocks::{ConvLayer, ConvSpec, DdrbParams, ErpabParams, PabParams, PdrbParams, ResBlockParams};
use dpenet_core::networks::{DpeNetParams, StageParams};
use dpenet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Layer factory with random weights and biases.
pub fn random_layers(seed: u64, scale: f64) -> impl FnMut(ConvSpec) -> ConvLayer<f64> {
    let mut r = rng(seed);
    move |spec| {
        let mut layer = ConvLayer::zeros(spec);
        for v in layer.weight.data_mut() {
            *v = r.gen_range(-scale..scale);
        }
        if let Some(b) = &mut layer.bias {
            for v in b.data_mut() {
                *v = r.gen_range(-0.1..0.1);
            }
        }
        layer
    }
}

/// Direct-summation same-padded convolution.
pub fn conv(x: &Tensor<f64>, layer: &ConvLayer<f64>) -> Tensor<f64> {
    let s = layer.spec;
    let (b, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert_eq!(c_in, s.in_channels);
    let half = (s.kernel / 2) as isize;
    let d = s.dilation as isize;
    let k = s.kernel;
    let mut out = Tensor::zeros(&[b, s.out_channels, h, w]);
    for n in 0..b {
        for o in 0..s.out_channels {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = layer.bias.as_ref().map_or(0.0, |bias| bias.data()[o]);
                    for c in 0..c_in {
                        for a in 0..k {
                            for bb in 0..k {
                                let ii = i as isize + (a as isize - half) * d;
                                let jj = j as isize + (bb as isize - half) * d;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    let wv = layer.weight.data()[((o * c_in + c) * k + a) * k + bb];
                                    acc += wv * x.at(n, c, ii as usize, jj as usize);
                                }
                            }
                        }
                    }
                    *out.at_mut(n, o, i, j) = acc;
                }
            }
        }
    }
    out
}

pub fn relu(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| v.max(0.0))
}

pub fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    a.zip_map(b, "oracle add", |x, y| x + y).unwrap()
}

pub fn mul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    a.zip_map(b, "oracle mul", |x, y| x * y).unwrap()
}

pub fn concat(parts: &[Tensor<f64>]) -> Tensor<f64> {
    let (b, h, w) = (parts[0].shape()[0], parts[0].shape()[2], parts[0].shape()[3]);
    let c: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for n in 0..b {
        let mut base = 0;
        for p in parts {
            for ch in 0..p.shape()[1] {
                for i in 0..h {
                    for j in 0..w {
                        *out.at_mut(n, base + ch, i, j) = p.at(n, ch, i, j);
                    }
                }
            }
            base += p.shape()[1];
        }
    }
    out
}

pub fn res_block(x: &Tensor<f64>, p: &ResBlockParams<f64>) -> Tensor<f64> {
    relu(&add(&conv(&relu(&conv(x, &p.conv1)), &p.conv2), x))
}

/// Input of ResBlock k is x plus every earlier ResBlock output.
pub fn ddrb(x: &Tensor<f64>, p: &DdrbParams<f64>) -> Tensor<f64> {
    let mut acc = x.clone();
    let mut last = x.clone();
    for block in &p.blocks {
        last = res_block(&acc, block);
        acc = add(&acc, &last);
    }
    last
}

pub fn pdrb(x: &Tensor<f64>, p: &PdrbParams<f64>) -> Tensor<f64> {
    let branches: Vec<_> = p.branches.iter().map(|b| conv(x, b)).collect();
    relu(&conv(&concat(&branches), &p.fuse))
}

pub fn pab(y: &Tensor<f64>, p: &PabParams<f64>) -> Tensor<f64> {
    let mut map = conv(&relu(&conv(y, &p.squeeze)), &p.expand);
    if p.squash {
        map = map.map(|v| 1.0 / (1.0 + (-v).exp()));
    }
    mul(&map, y)
}

pub fn erpab(x: &Tensor<f64>, p: &ErpabParams<f64>) -> Tensor<f64> {
    let y = match &p.pdrb {
        Some(pd) => pdrb(x, pd),
        None => x.clone(),
    };
    relu(&add(&pab(&y, &p.pab), x))
}

pub fn stage<B>(x: &Tensor<f64>, p: &StageParams<f64, B>, block: impl Fn(&Tensor<f64>, &B) -> Tensor<f64>) -> Tensor<f64> {
    let mut h = conv(x, &p.head);
    for b in &p.blocks {
        h = block(&h, b);
    }
    add(&conv(&h, &p.tail), x)
}

pub fn chain_ddrb(x: &Tensor<f64>, p: &DdrbParams<f64>) -> Tensor<f64> {
    p.blocks.iter().fold(x.clone(), |h, b| res_block(&h, b))
}

pub fn dpenet(x: &Tensor<f64>, p: &DpeNetParams<f64>, dense: bool) -> (Tensor<f64>, Tensor<f64>) {
    let s_c = stage(x, &p.r2net, |h, b| if dense { ddrb(h, b) } else { chain_ddrb(h, b) });
    let s = match &p.drnet {
        Some(d) => stage(&s_c, d, erpab),
        None => s_c.clone(),
    };
    (s_c, s)
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Mean of `(s - y)^2`.
pub fn mse(s: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    s.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / s.len() as f64
}

/// Windowed SSIM: 11x11 Gaussian (sigma 1.5), valid positions only,
/// averaged over batch, channel and position.
pub fn ssim(s: &Tensor<f64>, y: &Tensor<f64>, window: usize, sigma: f64, c1: f64, c2: f64) -> f64 {
    let half = (window / 2) as f64;
    let g: Vec<f64> = (0..window).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (b, c, h, w) = (s.shape()[0], s.shape()[1], s.shape()[2], s.shape()[3]);
    let (oh, ow) = (h - window + 1, w - window + 1);
    let mut total = 0.0;
    for n in 0..b {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let (mut ms, mut my, mut ss, mut yy, mut sy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for a in 0..window {
                        for bb in 0..window {
                            let wt = g[a] * g[bb] / norm;
                            let (p, q) = (s.at(n, ch, i + a, j + bb), y.at(n, ch, i + a, j + bb));
                            ms += wt * p;
                            my += wt * q;
                            ss += wt * p * p;
                            yy += wt * q * q;
                            sy += wt * p * q;
                        }
                    }
                    let (vs, vy, cov) = (ss - ms * ms, yy - my * my, sy - ms * my);
                    total += (2.0 * ms * my + c1) * (2.0 * cov + c2) / ((ms * ms + my * my + c1) * (vs + vy + c2));
                }
            }
        }
    }
    total / (b * c * oh * ow) as f64
}

/// Charbonnier penalty of the replicate-padded 3x3 Laplacian difference.
pub fn edge(s: &Tensor<f64>, y: &Tensor<f64>, eps: f64) -> f64 {
    let k = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
    let (b, c, h, w) = (s.shape()[0], s.shape()[1], s.shape()[2], s.shape()[3]);
    let mut total = 0.0;
    for n in 0..b {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut d = 0.0;
                    for (a, row) in k.iter().enumerate() {
                        for (bb, &kv) in row.iter().enumerate() {
                            let ii = (i as isize + a as isize - 1).clamp(0, h as isize - 1) as usize;
                            let jj = (j as isize + bb as isize - 1).clamp(0, w as isize - 1) as usize;
                            d += kv * (s.at(n, ch, ii, jj) - y.at(n, ch, ii, jj));
                        }
                    }
                    total += (d * d + eps * eps).sqrt();
                }
            }
        }
    }
    total / (b * c * h * w) as f64
}
