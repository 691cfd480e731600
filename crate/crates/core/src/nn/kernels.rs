//! Pure convolution and activation kernels shared by the autodiff tape and
//! the inference path.
//!
//! Decode-critical evaluations must be bit-identical between the encoder
//! and decoder, so every kernel uses a fixed sequential loop order
//! (ci, ky, kx innermost) and no fused multiply-add or parallel reduction.
//! The per-pixel helpers reuse the exact same accumulation order as the
//! full-patch loops.

use super::tensor::Tensor;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_deriv(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    let d = 1.0 + e;
    e / (d * d)
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Output side length of a strided convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// weight is [Cout, Cin, k, k], bias [Cout].
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (cin, h, w) = input.chw();
    let wd = weight.dims();
    assert_eq!(wd[1], cin, "conv weight expects {} input channels", wd[1]);
    let (cout, kh, kw) = (wd[0], wd[2], wd[3]);
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    let idata = input.data();
    let wdata = weight.data();
    let bdata = bias.data();
    let odata = out.data_mut();
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bdata[co];
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += idata[(ci * h + iy as usize) * w + ix as usize]
                                * wdata[((co * cin + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                odata[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, w) = input.chw();
    let wd = weight.dims();
    let (cout, kh, kw) = (wd[0], wd[2], wd[3]);
    let (_, oh, ow) = gout.chw();
    let mut gin = Tensor::zeros(&[cin, h, w]);
    let mut gw = Tensor::zeros(&[cout, cin, kh, kw]);
    let mut gb = Tensor::zeros(&[cout]);
    let idata = input.data();
    let wdata = weight.data();
    let gdata = gout.data();
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gdata[(co * oh + oy) * ow + ox];
                gb.data_mut()[co] += g;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ii = (ci * h + iy as usize) * w + ix as usize;
                            let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                            gw.data_mut()[wi] += g * idata[ii];
                            gin.data_mut()[ii] += g * wdata[wi];
                        }
                    }
                }
            }
        }
    }
    (gin, gw, gb)
}

/// Transposed convolution. weight is [Cin, Cout, k, k]; the output is
/// cropped to (target_h, target_w), which also stands in for output
/// padding when upsampling odd sizes.
pub fn deconv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    target_h: usize,
    target_w: usize,
) -> Tensor {
    let (cin, h, w) = input.chw();
    let wd = weight.dims();
    assert_eq!(wd[0], cin, "deconv weight expects {} input channels", wd[0]);
    let (cout, kh, kw) = (wd[1], wd[2], wd[3]);
    let mut out = Tensor::zeros(&[cout, target_h, target_w]);
    for co in 0..cout {
        let b = bias.data()[co];
        let base = co * target_h * target_w;
        for v in &mut out.data_mut()[base..base + target_h * target_w] {
            *v = b;
        }
    }
    let idata = input.data();
    let wdata = weight.data();
    let odata = out.data_mut();
    for ci in 0..cin {
        for iy in 0..h {
            for ix in 0..w {
                let v = idata[(ci * h + iy) * w + ix];
                for co in 0..cout {
                    for ky in 0..kh {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= target_h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if ox < 0 || ox >= target_w as isize {
                                continue;
                            }
                            odata[(co * target_h + oy as usize) * target_w + ox as usize] +=
                                v * wdata[((ci * cout + co) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn deconv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, w) = input.chw();
    let wd = weight.dims();
    let (cout, kh, kw) = (wd[1], wd[2], wd[3]);
    let (_, th, tw) = gout.chw();
    let mut gin = Tensor::zeros(&[cin, h, w]);
    let mut gw = Tensor::zeros(&[cin, cout, kh, kw]);
    let mut gb = Tensor::zeros(&[cout]);
    let gdata = gout.data();
    for co in 0..cout {
        let mut acc = 0.0;
        for v in &gdata[co * th * tw..(co + 1) * th * tw] {
            acc += v;
        }
        gb.data_mut()[co] = acc;
    }
    let idata = input.data();
    let wdata = weight.data();
    for ci in 0..cin {
        for iy in 0..h {
            for ix in 0..w {
                let ii = (ci * h + iy) * w + ix;
                let v = idata[ii];
                let mut gi = 0.0;
                for co in 0..cout {
                    for ky in 0..kh {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= th as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if ox < 0 || ox >= tw as isize {
                                continue;
                            }
                            let g = gdata[(co * th + oy as usize) * tw + ox as usize];
                            let wi = ((ci * cout + co) * kh + ky) * kw + kx;
                            gi += g * wdata[wi];
                            gw.data_mut()[wi] += g * v;
                        }
                    }
                }
                gin.data_mut()[ii] = gi;
            }
        }
    }
    (gin, gw, gb)
}

/// Type-A causal mask: only taps strictly before the center in raster
/// order contribute. The center and all later taps are zeroed.
pub fn causal_mask_allows(k: usize, ky: usize, kx: usize) -> bool {
    let ctr = k / 2;
    ky < ctr || (ky == ctr && kx < ctr)
}

/// Causal context features at one pixel. Shared verbatim by the
/// full-patch forward and the incremental decode loop so both produce
/// bit-identical values.
pub fn masked_conv2d_at(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    y: usize,
    x: usize,
    out: &mut [f64],
) {
    let (cin, h, w) = input.chw();
    let wd = weight.dims();
    let (cout, kh, kw) = (wd[0], wd[2], wd[3]);
    let pad = kh / 2;
    debug_assert_eq!(out.len(), cout);
    let idata = input.data();
    let wdata = weight.data();
    for co in 0..cout {
        let mut acc = bias.data()[co];
        for ci in 0..cin {
            for ky in 0..kh {
                let iy = (y + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    if !causal_mask_allows(kh, ky, kx) {
                        continue;
                    }
                    let ix = (x + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    acc += idata[(ci * h + iy as usize) * w + ix as usize]
                        * wdata[((co * cin + ci) * kh + ky) * kw + kx];
                }
            }
        }
        out[co] = acc;
    }
}

pub fn masked_conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (_, h, w) = input.chw();
    let cout = weight.dims()[0];
    let mut out = Tensor::zeros(&[cout, h, w]);
    let mut buf = vec![0.0; cout];
    for y in 0..h {
        for x in 0..w {
            masked_conv2d_at(input, weight, bias, y, x, &mut buf);
            for (co, &v) in buf.iter().enumerate() {
                out.data_mut()[(co * h + y) * w + x] = v;
            }
        }
    }
    out
}

pub fn masked_conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, w) = input.chw();
    let wd = weight.dims();
    let (cout, kh, kw) = (wd[0], wd[2], wd[3]);
    let pad = kh / 2;
    let mut gin = Tensor::zeros(&[cin, h, w]);
    let mut gw = Tensor::zeros(&[cout, cin, kh, kw]);
    let mut gb = Tensor::zeros(&[cout]);
    let idata = input.data();
    let wdata = weight.data();
    let gdata = gout.data();
    for co in 0..cout {
        for y in 0..h {
            for x in 0..w {
                let g = gdata[(co * h + y) * w + x];
                gb.data_mut()[co] += g;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (y + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            if !causal_mask_allows(kh, ky, kx) {
                                continue;
                            }
                            let ix = (x + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ii = (ci * h + iy as usize) * w + ix as usize;
                            let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                            gw.data_mut()[wi] += g * idata[ii];
                            gin.data_mut()[ii] += g * wdata[wi];
                        }
                    }
                }
            }
        }
    }
    (gin, gw, gb)
}

/// One pixel of a 1x1 convolution stack: out[co] = b[co] + sum_ci w*in.
/// Matches the full conv2d loop order for k = 1.
pub fn pointwise_at(input_vec: &[f64], weight: &Tensor, bias: &Tensor, out: &mut [f64]) {
    let wd = weight.dims();
    let (cout, cin) = (wd[0], wd[1]);
    debug_assert_eq!(input_vec.len(), cin);
    debug_assert_eq!(out.len(), cout);
    let wdata = weight.data();
    for co in 0..cout {
        let mut acc = bias.data()[co];
        for (ci, &v) in input_vec.iter().enumerate() {
            acc += v * wdata[co * cin + ci];
        }
        out[co] = acc;
    }
}
