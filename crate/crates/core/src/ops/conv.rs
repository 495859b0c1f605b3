//! Stride-1, zero-padded ("same") dilated 2D convolution via im2col + GEMM.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Validated geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn new<T: Real>(
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        dilation: usize,
    ) -> Result<Self> {
        let (batch, in_channels, height, width) = x.dims4()?;
        let (out_channels, w_in, kh, kw) = weight.dims4()?;
        if w_in != in_channels {
            return Err(Error::shape(
                "conv2d input channels",
                &[w_in],
                &[in_channels],
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::config(
                "conv2d.kernel",
                format!("kernel must be square and odd, got {kh}x{kw}"),
            ));
        }
        if dilation == 0 {
            return Err(Error::config("conv2d.dilation", "dilation must be >= 1"));
        }
        if let Some(b) = bias {
            if b.shape() != [out_channels] {
                return Err(Error::shape("conv2d bias", &[out_channels], b.shape()));
            }
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            out_channels,
            height,
            width,
            kernel: kh,
            dilation,
        })
    }

    fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1
    }

    /// For kernel offset `k` along an axis of length `n`: the output index
    /// range whose source index `o + k*d - pad` lies inside `[0, n)`.
    fn valid_range(&self, k: usize, n: usize) -> (usize, usize) {
        let shift = (k * self.dilation) as isize - self.pad() as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (n as isize - shift).clamp(0, n as isize) as usize;
        (lo.min(hi), hi)
    }
}

fn im2col<T: Real>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let (h, w, k, d, pad) = (g.height, g.width, g.kernel, g.dilation, g.pad());
    let plane = g.plane();
    for ci in 0..g.in_channels {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            let (y_lo, y_hi) = g.valid_range(ky, h);
            for kx in 0..k {
                let (x_lo, x_hi) = g.valid_range(kx, w);
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                dst.fill(T::zero());
                if x_lo == x_hi {
                    continue;
                }
                for y in y_lo..y_hi {
                    let sy = y + ky * d - pad;
                    let sx = x_lo + kx * d - pad;
                    dst[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&src[sy * w + sx..sy * w + sx + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let (h, w, k, d, pad) = (g.height, g.width, g.kernel, g.dilation, g.pad());
    let plane = g.plane();
    for ci in 0..g.in_channels {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            let (y_lo, y_hi) = g.valid_range(ky, h);
            for kx in 0..k {
                let (x_lo, x_hi) = g.valid_range(kx, w);
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                if x_lo == x_hi {
                    continue;
                }
                for y in y_lo..y_hi {
                    let sy = y + ky * d - pad;
                    let sx = x_lo + kx * d - pad;
                    let n = x_hi - x_lo;
                    for (o, &v) in dst[sy * w + sx..sy * w + sx + n]
                        .iter_mut()
                        .zip(&src[y * w + x_lo..y * w + x_hi])
                    {
                        *o += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x, weight, bias, dilation)?;
    let plane = g.plane();
    let kdim = g.col_rows();
    let mut out = Tensor::zeros(&[g.batch, g.out_channels, g.height, g.width]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * plane]
    };
    for b in 0..g.batch {
        let xb = x.batch_item(b);
        let ob = &mut out.data_mut()[b * g.out_channels * plane..(b + 1) * g.out_channels * plane];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_exact_mut(plane).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(&g, xb, &mut col);
            &col
        };
        T::gemm(
            g.out_channels,
            kdim,
            plane,
            T::one(),
            weight.data(),
            (kdim as isize, 1),
            src,
            (plane as isize, 1),
            T::one(),
            ob,
            (plane as isize, 1),
        );
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its operands. Only the
/// requested gradients are computed.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    dilation: usize,
    grad_out: &Tensor<T>,
    want: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(x, weight, None, dilation)?;
    let plane = g.plane();
    let kdim = g.col_rows();
    let (want_x, want_w, want_b) = (want.0, want.1, want.2 && has_bias);

    let mut dx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_w.then(|| Tensor::zeros(weight.shape()));
    let mut db = want_b.then(|| Tensor::zeros(&[g.out_channels]));
    let mut col = if !g.is_pointwise() && (want_w || want_x) {
        vec![T::zero(); kdim * plane]
    } else {
        Vec::new()
    };

    for b in 0..g.batch {
        let gb = grad_out.batch_item(b);
        if let Some(db) = db.as_mut() {
            for (co, chunk) in gb.chunks_exact(plane).enumerate() {
                db.data_mut()[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                x.batch_item(b)
            } else {
                im2col(&g, x.batch_item(b), &mut col);
                &col
            };
            // dW (Cout x K) += gout (Cout x HW) * col^T (HW x K)
            T::gemm(
                g.out_channels,
                plane,
                kdim,
                T::one(),
                gb,
                (plane as isize, 1),
                src,
                (1, plane as isize),
                T::one(),
                dw.data_mut(),
                (kdim as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[b * g.in_channels * plane..(b + 1) * g.in_channels * plane];
            if g.is_pointwise() {
                // dx (Cin x HW) += W^T (Cin x Cout) * gout (Cout x HW)
                T::gemm(
                    g.in_channels,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight.data(),
                    (1, kdim as isize),
                    gb,
                    (plane as isize, 1),
                    T::one(),
                    dxb,
                    (plane as isize, 1),
                );
            } else {
                T::gemm(
                    kdim,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight.data(),
                    (1, kdim as isize),
                    gb,
                    (plane as isize, 1),
                    T::zero(),
                    &mut col,
                    (plane as isize, 1),
                );
                col2im_add(&g, &col, dxb);
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}
