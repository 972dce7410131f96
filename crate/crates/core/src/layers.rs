//! Layer primitives with explicit forward and backward passes.
//!
//! Every layer is a pure function of its inputs. Backward functions take the
//! tensors saved from the forward call plus the upstream gradient and return
//! gradients for every input that carries one.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    /// Zero-pad so that the output keeps the input's spatial size.
    pub zero_pad: bool,
}

impl ConvSpec {
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            zero_pad: true,
        }
    }

    fn padding(&self) -> (usize, usize) {
        if self.zero_pad {
            (self.kernel_h / 2, self.kernel_w / 2)
        } else {
            (0, 0)
        }
    }

    pub fn filter_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (ph, pw) = self.padding();
        (h + 2 * ph + 1 - self.kernel_h, w + 2 * pw + 1 - self.kernel_w)
    }

    fn validate(&self, input: &Tensor, filters: &Tensor, bias: &Tensor) -> Result<()> {
        input.expect_rank("conv2d", 4)?;
        if input.dim(1) != self.in_channels {
            return Err(Error::dim("conv2d", "input channels", self.in_channels, input.dim(1)));
        }
        filters.expect_shape("conv2d filters", &self.filter_shape())?;
        bias.expect_shape("conv2d bias", &[self.out_channels])?;
        if self.zero_pad && (self.kernel_h.is_multiple_of(2) || self.kernel_w.is_multiple_of(2)) {
            return Err(Error::Usage(format!(
                "zero-padded convolution needs odd kernel dims, got {}x{}",
                self.kernel_h, self.kernel_w
            )));
        }
        if input.dim(2) + 2 * self.padding().0 < self.kernel_h {
            return Err(Error::dim("conv2d", "height", self.kernel_h, input.dim(2)));
        }
        if input.dim(3) + 2 * self.padding().1 < self.kernel_w {
            return Err(Error::dim("conv2d", "width", self.kernel_w, input.dim(3)));
        }
        Ok(())
    }
}

/// Output row range `[lo, hi)` whose tap `k` reads a valid input row.
#[inline]
fn valid_range(out_len: usize, in_len: usize, tap: usize, pad: usize) -> (usize, usize) {
    // input index = out + tap - pad must lie in [0, in_len)
    let lo = pad.saturating_sub(tap);
    let hi = (in_len + pad).saturating_sub(tap).min(out_len);
    (lo, hi.max(lo))
}

/// Cross-correlation of the (optionally zero-padded) input with each filter, plus bias.
pub fn conv2d(input: &Tensor, filters: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate(input, filters, bias)?;
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (ph, pw) = spec.padding();
    let (oh, ow) = spec.output_hw(h, w);
    let k_out = spec.out_channels;
    let mut out = Tensor::zeros(&[n, k_out, oh, ow]);
    let x = input.data();
    let f = filters.data();
    let o = out.data_mut();
    for ni in 0..n {
        for k in 0..k_out {
            let plane = &mut o[(ni * k_out + k) * oh * ow..][..oh * ow];
            plane.fill(bias.data()[k]);
            for ci in 0..c {
                let src = &x[(ni * c + ci) * h * w..][..h * w];
                for ky in 0..kh {
                    let (y0, y1) = valid_range(oh, h, ky, ph);
                    for kx in 0..kw {
                        let wt = f[((k * c + ci) * kh + ky) * kw + kx];
                        let (x0, x1) = valid_range(ow, w, kx, pw);
                        for y in y0..y1 {
                            let iy = y + ky - ph;
                            let dst = &mut plane[y * ow + x0..y * ow + x1];
                            let row = &src[iy * w + x0 + kx - pw..iy * w + x1 + kx - pw];
                            for (d, s) in dst.iter_mut().zip(row) {
                                *d += wt * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub filters: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    filters: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    conv2d_backward_impl(input, filters, spec, grad_out, true)
}

/// Like [`conv2d_backward`] but skips the input gradient, which stays zero.
pub fn conv2d_backward_params(
    input: &Tensor,
    filters: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    conv2d_backward_impl(input, filters, spec, grad_out, false)
}

fn conv2d_backward_impl(
    input: &Tensor,
    filters: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<ConvGrads> {
    let bias_shape = Tensor::zeros(&[spec.out_channels]);
    spec.validate(input, filters, &bias_shape)?;
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (ph, pw) = spec.padding();
    let (oh, ow) = spec.output_hw(h, w);
    let k_out = spec.out_channels;
    grad_out.expect_shape("conv2d_backward", &[n, k_out, oh, ow])?;

    let mut gi = Tensor::zeros(input.shape());
    let mut gf = Tensor::zeros(filters.shape());
    let mut gb = Tensor::zeros(&[k_out]);
    let x = input.data();
    let f = filters.data();
    let g = grad_out.data();
    {
        let gi = gi.data_mut();
        let gf = gf.data_mut();
        let gb = gb.data_mut();
        for ni in 0..n {
            for k in 0..k_out {
                let gplane = &g[(ni * k_out + k) * oh * ow..][..oh * ow];
                gb[k] += gplane.iter().sum::<f64>();
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for ky in 0..kh {
                        let (y0, y1) = valid_range(oh, h, ky, ph);
                        for kx in 0..kw {
                            let fidx = ((k * c + ci) * kh + ky) * kw + kx;
                            let wt = f[fidx];
                            let (x0, x1) = valid_range(ow, w, kx, pw);
                            let mut acc = 0.0;
                            for y in y0..y1 {
                                let iy = y + ky - ph;
                                let grow = &gplane[y * ow + x0..y * ow + x1];
                                let off = base + iy * w + x0 + kx - pw;
                                let xrow = &x[off..off + (x1 - x0)];
                                for (gv, xv) in grow.iter().zip(xrow) {
                                    acc += gv * xv;
                                }
                                if want_input {
                                    let girow = &mut gi[off..off + (x1 - x0)];
                                    for (d, gv) in girow.iter_mut().zip(grow) {
                                        *d += wt * gv;
                                    }
                                }
                            }
                            gf[fidx] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gi,
        filters: gf,
        bias: gb,
    })
}

/// Flat input positions selected by a max-pool forward, one per output element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major order.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    input.expect_rank("maxpool2", 4)?;
    let (n, k, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    if h % 2 != 0 {
        return Err(Error::dim("maxpool2", "height (must be even)", h + 1, h));
    }
    if w % 2 != 0 {
        return Err(Error::dim("maxpool2", "width (must be even)", w + 1, w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, k, oh, ow]);
    let mut argmax = Vec::with_capacity(n * k * oh * ow);
    let x = input.data();
    let o = out.data_mut();
    let mut oi = 0;
    for plane in 0..n * k {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * w + 2 * xo;
                for idx in [
                    base + 2 * y * w + 2 * xo + 1,
                    base + (2 * y + 1) * w + 2 * xo,
                    base + (2 * y + 1) * w + 2 * xo + 1,
                ] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                o[oi] = x[best];
                argmax.push(best);
                oi += 1;
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward(grad_out: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::dim(
            "maxpool2_backward",
            "output elements",
            indices.argmax.len(),
            grad_out.len(),
        ));
    }
    let mut gi = Tensor::zeros(&indices.input_shape);
    let d = gi.data_mut();
    for (&src, &g) in indices.argmax.iter().zip(grad_out.data()) {
        d[src] += g;
    }
    Ok(gi)
}

/// Cross-channel local response normalization:
/// `out[c] = in[c] / (k0 + alpha * sum_{|c'-c| <= radius} in[c']^2)^beta`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CrossChannelNorm {
    pub k0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub radius: usize,
}

impl Default for CrossChannelNorm {
    fn default() -> Self {
        Self {
            k0: 1.0,
            alpha: 1e-4,
            beta: 0.75,
            radius: 2,
        }
    }
}

impl CrossChannelNorm {
    /// Denominator base `k0 + alpha * window sum of squares` for every element.
    fn scales(&self, input: &Tensor) -> Tensor {
        let (n, k, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
        let hw = h * w;
        let x = input.data();
        let mut s = Tensor::full(input.shape(), self.k0);
        let sd = s.data_mut();
        for ni in 0..n {
            for c in 0..k {
                let lo = c.saturating_sub(self.radius);
                let hi = (c + self.radius).min(k - 1);
                let dst = &mut sd[(ni * k + c) * hw..][..hw];
                for cc in lo..=hi {
                    let src = &x[(ni * k + cc) * hw..][..hw];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += self.alpha * v * v;
                    }
                }
            }
        }
        s
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        input.expect_rank("cross_channel_norm", 4)?;
        let s = self.scales(input);
        let data = input
            .data()
            .iter()
            .zip(s.data())
            .map(|(v, d)| v * d.powf(-self.beta))
            .collect();
        Tensor::new(input.shape().to_vec(), data)
    }

    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        input.expect_rank("cross_channel_norm", 4)?;
        grad_out.expect_shape("cross_channel_norm backward", input.shape())?;
        let (n, k, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
        let hw = h * w;
        let s = self.scales(input);
        let x = input.data();
        let g = grad_out.data();
        let sd = s.data();
        // t[c] = g[c] * x[c] * d[c]^(-beta-1), summed over each element's window below.
        let t: Vec<f64> = (0..x.len())
            .map(|i| g[i] * x[i] * sd[i].powf(-self.beta - 1.0))
            .collect();
        let mut gi = Tensor::zeros(input.shape());
        let gd = gi.data_mut();
        for (i, d) in gd.iter_mut().enumerate() {
            *d = g[i] * sd[i].powf(-self.beta);
        }
        let coeff = 2.0 * self.alpha * self.beta;
        for ni in 0..n {
            for c in 0..k {
                let lo = c.saturating_sub(self.radius);
                let hi = (c + self.radius).min(k - 1);
                let off = (ni * k + c) * hw;
                for cc in lo..=hi {
                    let toff = (ni * k + cc) * hw;
                    for p in 0..hw {
                        gd[off + p] -= coeff * x[off + p] * t[toff + p];
                    }
                }
            }
        }
        Ok(gi)
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.expect_shape("relu_backward", input.shape())?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Row-wise affine map `out = input * weights^T + bias`.
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    input.expect_rank("fully_connected", 2)?;
    weights.expect_rank("fully_connected weights", 2)?;
    let (n, d_in) = (input.dim(0), input.dim(1));
    let d_out = weights.dim(0);
    if weights.dim(1) != d_in {
        return Err(Error::dim("fully_connected", "input features", weights.dim(1), d_in));
    }
    bias.expect_shape("fully_connected bias", &[d_out])?;
    let mut out = Tensor::zeros(&[n, d_out]);
    let w = weights.data();
    for r in 0..n {
        let row = input.outer(r);
        let dst = out.outer_mut(r);
        for (j, d) in dst.iter_mut().enumerate() {
            let wrow = &w[j * d_in..(j + 1) * d_in];
            *d = bias.data()[j] + wrow.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn fully_connected_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<DenseGrads> {
    input.expect_rank("fully_connected_backward", 2)?;
    let (n, d_in) = (input.dim(0), input.dim(1));
    let d_out = weights.dim(0);
    weights.expect_shape("fully_connected_backward weights", &[d_out, d_in])?;
    grad_out.expect_shape("fully_connected_backward", &[n, d_out])?;
    let mut gi = Tensor::zeros(&[n, d_in]);
    let mut gw = Tensor::zeros(&[d_out, d_in]);
    let mut gb = Tensor::zeros(&[d_out]);
    let w = weights.data();
    for r in 0..n {
        let x = input.outer(r);
        let g = grad_out.outer(r);
        let gi_row = gi.outer_mut(r);
        for (j, &gj) in g.iter().enumerate() {
            if gj == 0.0 {
                continue;
            }
            let wrow = &w[j * d_in..(j + 1) * d_in];
            for (d, wv) in gi_row.iter_mut().zip(wrow) {
                *d += gj * wv;
            }
        }
        let gwd = gw.data_mut();
        for (j, &gj) in g.iter().enumerate() {
            if gj == 0.0 {
                continue;
            }
            for (d, xv) in gwd[j * d_in..(j + 1) * d_in].iter_mut().zip(x) {
                *d += gj * xv;
            }
        }
        for (d, gj) in gb.data_mut().iter_mut().zip(g) {
            *d += gj;
        }
    }
    Ok(DenseGrads {
        input: gi,
        weights: gw,
        bias: gb,
    })
}
