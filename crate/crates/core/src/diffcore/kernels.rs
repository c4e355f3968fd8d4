//! Forward and backward kernels on raw buffers. The graph layer owns shape
//! checking; everything here assumes consistent extents.

/// `c = a·b + beta·c` for row-major `a: m×k`, `b: k×n`, `c: m×n`, with
/// optional transposition of either operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Unfolds one image `[Cin,H,W]` into `[Cin·kH·kW, H'·W']`.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let pad = self.padding as isize;
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &image[c * self.height * self.width..][..self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let dst = &mut cols[row * oh * ow..][..oh * ow];
                    for oy in 0..oh {
                        let y = (oy * self.stride + ki) as isize - pad;
                        let line = &mut dst[oy * ow..][..ow];
                        if y < 0 || y >= self.height as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.width..][..self.width];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let x = (ox * self.stride + kj) as isize - pad;
                            *v = if x < 0 || x >= self.width as isize {
                                0.0
                            } else {
                                src[x as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters column gradients back onto the image.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let pad = self.padding as isize;
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &mut image[c * self.height * self.width..][..self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let src = &cols[row * oh * ow..][..oh * ow];
                    for oy in 0..oh {
                        let y = (oy * self.stride + ki) as isize - pad;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.width..][..self.width];
                        for ox in 0..ow {
                            let x = (ox * self.stride + kj) as isize - pad;
                            if x >= 0 && x < self.width as isize {
                                dst[x as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(geo: &ConvGeometry, input: &[f64], kernels: &[f64], bias: &[f64]) -> Vec<f64> {
    let spatial = geo.out_h() * geo.out_w();
    let in_len = geo.in_channels * geo.height * geo.width;
    let out_len = geo.out_channels * spatial;
    let mut out = vec![0.0; geo.batch * out_len];
    let mut cols = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; geo.patch_len() * spatial]
    };
    for b in 0..geo.batch {
        let image = &input[b * in_len..][..in_len];
        let dst = &mut out[b * out_len..][..out_len];
        for (co, plane) in dst.chunks_exact_mut(spatial).enumerate() {
            plane.fill(bias[co]);
        }
        let patches = if geo.is_pointwise() {
            image
        } else {
            geo.im2col(image, &mut cols);
            &cols
        };
        gemm(geo.out_channels, geo.patch_len(), spatial, kernels, false, patches, false, 1.0, dst);
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    geo: &ConvGeometry,
    input: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
    need_input_grad: bool,
) -> ConvGrads {
    let spatial = geo.out_h() * geo.out_w();
    let in_len = geo.in_channels * geo.height * geo.width;
    let out_len = geo.out_channels * spatial;
    let patch = geo.patch_len();
    let mut g_kernels = vec![0.0; kernels.len()];
    let mut g_bias = vec![0.0; geo.out_channels];
    let mut g_input = need_input_grad.then(|| vec![0.0; input.len()]);
    let mut cols = vec![0.0; patch * spatial];
    let mut g_cols = vec![0.0; patch * spatial];
    for b in 0..geo.batch {
        let image = &input[b * in_len..][..in_len];
        let g_out = &grad_out[b * out_len..][..out_len];
        for (co, plane) in g_out.chunks_exact(spatial).enumerate() {
            g_bias[co] += plane.iter().sum::<f64>();
        }
        let patches: &[f64] = if geo.is_pointwise() {
            image
        } else {
            geo.im2col(image, &mut cols);
            &cols
        };
        // dK += dOut · colsᵀ
        gemm(geo.out_channels, spatial, patch, g_out, false, patches, true, 1.0, &mut g_kernels);
        if let Some(g_in) = g_input.as_mut() {
            let dst = &mut g_in[b * in_len..][..in_len];
            if geo.is_pointwise() {
                gemm(patch, geo.out_channels, spatial, kernels, true, g_out, false, 0.0, dst);
            } else {
                gemm(patch, geo.out_channels, spatial, kernels, true, g_out, false, 0.0, &mut g_cols);
                geo.col2im(&g_cols, dst);
            }
        }
    }
    ConvGrads {
        input: g_input,
        kernels: g_kernels,
        bias: g_bias,
    }
}

/// Max pooling over `[N, H, W]` planes. Returns the pooled values and, per
/// output element, the flat input index of the first maximum in scan order.
pub(crate) fn maxpool_forward(
    planes: usize,
    height: usize,
    width: usize,
    window: usize,
    stride: usize,
    input: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let oh = (height - window) / stride + 1;
    let ow = (width - window) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oy * stride * width + ox * stride;
                for wy in 0..window {
                    let row = base + (oy * stride + wy) * width + ox * stride;
                    for wx in 0..window {
                        let v = input[row + wx];
                        if v > best || (v.is_nan() && !best.is_nan()) {
                            best = v;
                            best_idx = row + wx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

/// Stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln h(x)` for the logistic `h`, finite for every finite `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Smooth L1 with unit transition point.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}
