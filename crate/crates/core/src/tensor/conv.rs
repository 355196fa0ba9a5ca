//! 2-D convolution (cross-correlation) and its gradients.

use super::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    depthwise: bool,
) -> Result<ConvDims> {
    let si = input.shape();
    let sk = kernel.shape();
    if si.len() != 4 || sk.len() != 4 {
        return Err(Error::dimension(format!(
            "conv2d expects [N,C,H,W] input and [O,C,kh,kw] kernel, got {si:?} / {sk:?}"
        )));
    }
    let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
    let (o, kc, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
    if stride == 0 {
        return Err(Error::config("conv2d: stride must be >= 1"));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::config(format!(
            "conv2d: kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    if depthwise {
        if o != c || kc != 1 {
            return Err(Error::dimension(format!(
                "depthwise_conv2d: kernel must be [C,1,kh,kw] with C={c}, got {sk:?}"
            )));
        }
    } else if kc != c {
        return Err(Error::dimension(format!(
            "conv2d: input has {c} channels but kernel expects {kc}"
        )));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::dimension(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        ho,
        wo,
    })
}

/// Forward cross-correlation. `group_of(o)` maps an output channel to the
/// input channel set it reads: full convolution reads all, depthwise reads
/// its own channel.
#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    d: &ConvDims,
    stride: usize,
    padding: usize,
    depthwise: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); d.n * d.o * d.ho * d.wo];
    let in_plane = d.h * d.w;
    let out_plane = d.ho * d.wo;
    for bi in 0..d.n {
        for oc in 0..d.o {
            let out_base = (bi * d.o + oc) * out_plane;
            let (c_lo, c_hi) = if depthwise { (oc, oc + 1) } else { (0, d.c) };
            for ci in c_lo..c_hi {
                let in_base = (bi * d.c + ci) * in_plane;
                let k_ci = if depthwise { 0 } else { ci };
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = kernel[((oc * if depthwise { 1 } else { d.c } + k_ci) * d.kh
                            + ky)
                            * d.kw
                            + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for oy in 0..d.ho {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let in_row = in_base + iy as usize * d.w;
                            let out_row = out_base + oy * d.wo;
                            if stride == 1 {
                                // contiguous span where ix = ox + kx - padding stays in range
                                let ox_lo = padding.saturating_sub(kx);
                                let ox_hi = (d.w + padding - kx).min(d.wo);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let ix_lo = (ox_lo as isize + kx as isize - padding as isize)
                                    as usize;
                                let n = ox_hi - ox_lo;
                                let dst = &mut out[out_row + ox_lo..out_row + ox_lo + n];
                                let src = &input[in_row + ix_lo..in_row + ix_lo + n];
                                for (o, &s) in dst.iter_mut().zip(src) {
                                    *o += wv * s;
                                }
                            } else {
                                for ox in 0..d.wo {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    out[out_row + ox] += wv * input[in_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the input: scatter of the forward gather.
#[allow(clippy::too_many_arguments)]
fn conv_backward_input<T: Scalar>(
    grad_out: &[T],
    kernel: &[T],
    d: &ConvDims,
    stride: usize,
    padding: usize,
    depthwise: bool,
) -> Vec<T> {
    let mut din = vec![T::zero(); d.n * d.c * d.h * d.w];
    let in_plane = d.h * d.w;
    let out_plane = d.ho * d.wo;
    for bi in 0..d.n {
        for oc in 0..d.o {
            let out_base = (bi * d.o + oc) * out_plane;
            let (c_lo, c_hi) = if depthwise { (oc, oc + 1) } else { (0, d.c) };
            for ci in c_lo..c_hi {
                let in_base = (bi * d.c + ci) * in_plane;
                let k_ci = if depthwise { 0 } else { ci };
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = kernel[((oc * if depthwise { 1 } else { d.c } + k_ci) * d.kh
                            + ky)
                            * d.kw
                            + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for oy in 0..d.ho {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let in_row = in_base + iy as usize * d.w;
                            let out_row = out_base + oy * d.wo;
                            if stride == 1 {
                                let ox_lo = padding.saturating_sub(kx);
                                let ox_hi = (d.w + padding - kx).min(d.wo);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let ix_lo = (ox_lo as isize + kx as isize - padding as isize)
                                    as usize;
                                let n = ox_hi - ox_lo;
                                let dst = &mut din[in_row + ix_lo..in_row + ix_lo + n];
                                let src = &grad_out[out_row + ox_lo..out_row + ox_lo + n];
                                for (o, &g) in dst.iter_mut().zip(src) {
                                    *o += wv * g;
                                }
                            } else {
                                for ox in 0..d.wo {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    din[in_row + ix as usize] += wv * grad_out[out_row + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

/// Gradient w.r.t. the kernel.
#[allow(clippy::too_many_arguments)]
fn conv_backward_kernel<T: Scalar>(
    grad_out: &[T],
    input: &[T],
    d: &ConvDims,
    stride: usize,
    padding: usize,
    depthwise: bool,
) -> Vec<T> {
    let kc = if depthwise { 1 } else { d.c };
    let mut dk = vec![T::zero(); d.o * kc * d.kh * d.kw];
    let in_plane = d.h * d.w;
    let out_plane = d.ho * d.wo;
    for bi in 0..d.n {
        for oc in 0..d.o {
            let out_base = (bi * d.o + oc) * out_plane;
            let (c_lo, c_hi) = if depthwise { (oc, oc + 1) } else { (0, d.c) };
            for ci in c_lo..c_hi {
                let in_base = (bi * d.c + ci) * in_plane;
                let k_ci = if depthwise { 0 } else { ci };
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let mut acc = T::zero();
                        for oy in 0..d.ho {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let in_row = in_base + iy as usize * d.w;
                            let out_row = out_base + oy * d.wo;
                            if stride == 1 {
                                let ox_lo = padding.saturating_sub(kx);
                                let ox_hi = (d.w + padding - kx).min(d.wo);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let ix_lo = (ox_lo as isize + kx as isize - padding as isize)
                                    as usize;
                                let n = ox_hi - ox_lo;
                                let g = &grad_out[out_row + ox_lo..out_row + ox_lo + n];
                                let s = &input[in_row + ix_lo..in_row + ix_lo + n];
                                for (&gv, &sv) in g.iter().zip(s) {
                                    acc += gv * sv;
                                }
                            } else {
                                for ox in 0..d.wo {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    acc += grad_out[out_row + ox] * input[in_row + ix as usize];
                                }
                            }
                        }
                        dk[((oc * kc + k_ci) * d.kh + ky) * d.kw + kx] += acc;
                    }
                }
            }
        }
    }
    dk
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of [N,C,H,W] with [O,C,kh,kw]; odd kernels only.
    /// Output is [N,O,H',W'] with H' = (H + 2*padding - kh)/stride + 1.
    pub fn conv2d(
        &self,
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        self.conv_impl(input, kernel, stride, padding, false)
    }

    /// Per-channel convolution of [N,C,H,W] with [C,1,kh,kw], stride 1.
    pub fn depthwise_conv2d(
        &self,
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        padding: usize,
    ) -> Result<Tensor<T>> {
        self.conv_impl(input, kernel, 1, padding, true)
    }

    fn conv_impl(
        &self,
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        stride: usize,
        padding: usize,
        depthwise: bool,
    ) -> Result<Tensor<T>> {
        let d = conv_dims(input, kernel, stride, padding, depthwise)?;
        let data = conv_forward(input.data(), kernel.data(), &d, stride, padding, depthwise);
        let out = Tensor::result(
            vec![d.n, d.o, d.ho, d.wo],
            data,
            self.grad_needed(&[input, kernel]),
        );
        if out.requires_grad() {
            let (i2, k2, o2) = (input.clone(), kernel.clone(), out.clone());
            self.record(
                &[input, kernel],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        let d = conv_dims(&i2, &k2, stride, padding, depthwise)
                            .expect("shapes already validated");
                        if i2.requires_grad() {
                            let din =
                                conv_backward_input(g, k2.data(), &d, stride, padding, depthwise);
                            i2.accumulate_grad(&din);
                        }
                        if k2.requires_grad() {
                            let dk =
                                conv_backward_kernel(g, i2.data(), &d, stride, padding, depthwise);
                            k2.accumulate_grad(&dk);
                        }
                    });
                }),
            );
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, Tensor};

    #[test]
    fn identity_kernel_passes_through() {
        // 1x1x3x3 ones, 1x1x1x1 kernel of 1 -> unchanged
        let tape = Tape::<f64>::no_grad();
        let x = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = tape.conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        // 3x3 ones image, 3x3 ones kernel, pad 1: center 9, corners 4
        let tape = Tape::<f64>::no_grad();
        let x = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = tape.conv2d(&x, &k, 1, 1).unwrap();
        let d = y.data();
        assert_eq!(d[4], 9.0);
        assert_eq!(d[0], 4.0);
        assert_eq!(d[2], 4.0);
        assert_eq!(d[6], 4.0);
        assert_eq!(d[8], 4.0);
        assert_eq!(d[1], 6.0);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let tape = Tape::<f64>::no_grad();
        let x = Tensor::from_vec(&[1, 2, 3, 3], vec![1.0; 18]).unwrap();
        let k = Tensor::from_vec(&[1, 3, 1, 1], vec![1.0; 3]).unwrap();
        assert!(tape.conv2d(&x, &k, 1, 0).is_err());
    }

    #[test]
    fn strided_output_shape() {
        let tape = Tape::<f64>::no_grad();
        let x = Tensor::from_vec(&[1, 1, 5, 5], vec![1.0; 25]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = tape.conv2d(&x, &k, 2, 1).unwrap();
        // (5 + 2 - 3)/2 + 1 = 3
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
    }

    #[test]
    fn depthwise_identity_and_zero_channel() {
        let tape = Tape::<f64>::no_grad();
        let mut data = vec![0.5; 8];
        for (i, v) in data.iter_mut().enumerate() {
            *v += i as f64 * 0.1;
        }
        let x = Tensor::from_vec(&[1, 2, 2, 2], data.clone()).unwrap();
        // per-channel 1x1 kernels of value 1 -> identity
        let k = Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 1.0]).unwrap();
        let y = tape.depthwise_conv2d(&x, &k, 0).unwrap();
        assert_eq!(y.data(), x.data());
        // zero kernel on channel 0 -> channel 0 zeros, channel 1 unchanged
        let k0 = Tensor::from_vec(&[2, 1, 1, 1], vec![0.0, 1.0]).unwrap();
        let y0 = tape.depthwise_conv2d(&x, &k0, 0).unwrap();
        assert_eq!(&y0.data()[0..4], &[0.0; 4]);
        assert_eq!(&y0.data()[4..8], &data[4..8]);
    }

    #[test]
    fn even_kernel_rejected() {
        let tape = Tape::<f64>::no_grad();
        let x = Tensor::from_vec(&[1, 1, 4, 4], vec![1.0; 16]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        assert!(tape.conv2d(&x, &k, 1, 0).is_err());
    }
}
