//! Differentiable operations recorded on the tape.
//!
//! Every method computes the forward value eagerly and, when any input
//! requires gradients, pushes a closure that maps the output gradient to
//! input gradients. Backward rules accumulate (`+=`) so a tensor used in
//! several places collects contributions from all of them.

use super::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(format!(
            "{op}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    // ---- elementwise binary ----

    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::result(a.shape().to_vec(), data, self.grad_needed(&[a, b]));
        if out.requires_grad() {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.record(
                &[a, b],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        if a2.requires_grad() {
                            a2.accumulate_grad(g);
                        }
                        if b2.requires_grad() {
                            b2.accumulate_grad(g);
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    pub fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::result(a.shape().to_vec(), data, self.grad_needed(&[a, b]));
        if out.requires_grad() {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.record(
                &[a, b],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        if a2.requires_grad() {
                            a2.accumulate_grad(g);
                        }
                        if b2.requires_grad() {
                            let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                            b2.accumulate_grad(&neg);
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::result(a.shape().to_vec(), data, self.grad_needed(&[a, b]));
        if out.requires_grad() {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.record(
                &[a, b],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        if a2.requires_grad() {
                            let da: Vec<T> =
                                g.iter().zip(b2.data()).map(|(&gv, &bv)| gv * bv).collect();
                            a2.accumulate_grad(&da);
                        }
                        if b2.requires_grad() {
                            let db: Vec<T> =
                                g.iter().zip(a2.data()).map(|(&gv, &av)| gv * av).collect();
                            b2.accumulate_grad(&db);
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    pub fn div(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("div", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x / y).collect();
        let out = Tensor::result(a.shape().to_vec(), data, self.grad_needed(&[a, b]));
        if out.requires_grad() {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.record(
                &[a, b],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        if a2.requires_grad() {
                            let da: Vec<T> =
                                g.iter().zip(b2.data()).map(|(&gv, &bv)| gv / bv).collect();
                            a2.accumulate_grad(&da);
                        }
                        if b2.requires_grad() {
                            let db: Vec<T> = g
                                .iter()
                                .zip(a2.data().iter().zip(b2.data()))
                                .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                                .collect();
                            b2.accumulate_grad(&db);
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    // ---- elementwise with constants ----

    pub fn scale(&self, a: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        let data = a.data().iter().map(|&x| x * c).collect();
        let out = Tensor::result(a.shape().to_vec(), data, self.grad_needed(&[a]));
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &[a],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        let da: Vec<T> = g.iter().map(|&gv| gv * c).collect();
                        a2.accumulate_grad(&da);
                    });
                }),
            );
        }
        Ok(out)
    }

    pub fn add_scalar(&self, a: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        let data = a.data().iter().map(|&x| x + c).collect();
        let out = Tensor::result(a.shape().to_vec(), data, self.grad_needed(&[a]));
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &[a],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| a2.accumulate_grad(g));
                }),
            );
        }
        Ok(out)
    }

    // ---- elementwise unary ----

    pub fn abs(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let data = a.data().iter().map(|&x| x.abs()).collect();
        let out = Tensor::result(a.shape().to_vec(), data, self.grad_needed(&[a]));
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &[a],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        // subgradient 0 at the kink
                        let da: Vec<T> = g
                            .iter()
                            .zip(a2.data())
                            .map(|(&gv, &x)| gv * x.signum() * if x == T::zero() { T::zero() } else { T::one() })
                            .collect();
                        a2.accumulate_grad(&da);
                    });
                }),
            );
        }
        Ok(out)
    }

    pub fn sigmoid(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let data: Vec<T> = a
            .data()
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let out = Tensor::result(a.shape().to_vec(), data, self.grad_needed(&[a]));
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &[a],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        let da: Vec<T> = g
                            .iter()
                            .zip(o2.data())
                            .map(|(&gv, &s)| gv * s * (T::one() - s))
                            .collect();
                        a2.accumulate_grad(&da);
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = T::from_f64(0.044_715);
        let half = T::from_f64(0.5);
        let data: Vec<T> = a
            .data()
            .iter()
            .map(|&x| {
                let u = c * (x + k * x * x * x);
                half * x * (T::one() + u.tanh())
            })
            .collect();
        let out = Tensor::result(a.shape().to_vec(), data, self.grad_needed(&[a]));
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &[a],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        let da: Vec<T> = g
                            .iter()
                            .zip(a2.data())
                            .map(|(&gv, &x)| {
                                let u = c * (x + k * x * x * x);
                                let t = u.tanh();
                                let du = c * (T::one() + T::from_f64(3.0) * k * x * x);
                                let d = half * (T::one() + t)
                                    + half * x * (T::one() - t * t) * du;
                                gv * d
                            })
                            .collect();
                        a2.accumulate_grad(&da);
                    });
                }),
            );
        }
        Ok(out)
    }

    // ---- reductions ----

    pub fn sum(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let s = a.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let out = Tensor::result(vec![1], vec![s], self.grad_needed(&[a]));
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &[a],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        let da = vec![g[0]; a2.numel()];
                        a2.accumulate_grad(&da);
                    });
                }),
            );
        }
        Ok(out)
    }

    pub fn mean(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let n = T::from_f64(a.numel() as f64);
        let s = a.data().iter().fold(T::zero(), |acc, &x| acc + x) / n;
        let out = Tensor::result(vec![1], vec![s], self.grad_needed(&[a]));
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &[a],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        let da = vec![g[0] / n; a2.numel()];
                        a2.accumulate_grad(&da);
                    });
                }),
            );
        }
        Ok(out)
    }

    /// out = a / s where s is a one-element tensor.
    pub fn div_by_scalar(&self, a: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        if s.numel() != 1 {
            return Err(Error::dimension(format!(
                "div_by_scalar: divisor must be scalar, shape is {:?}",
                s.shape()
            )));
        }
        let sv = s.data()[0];
        let data = a.data().iter().map(|&x| x / sv).collect();
        let out = Tensor::result(a.shape().to_vec(), data, self.grad_needed(&[a, s]));
        if out.requires_grad() {
            let (a2, s2, o2) = (a.clone(), s.clone(), out.clone());
            self.record(
                &[a, s],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        let sv = s2.data()[0];
                        if a2.requires_grad() {
                            let da: Vec<T> = g.iter().map(|&gv| gv / sv).collect();
                            a2.accumulate_grad(&da);
                        }
                        if s2.requires_grad() {
                            let ds = g
                                .iter()
                                .zip(a2.data())
                                .fold(T::zero(), |acc, (&gv, &av)| acc - gv * av / (sv * sv));
                            s2.accumulate_grad(&[ds]);
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    // ---- shape ----

    pub fn reshape(&self, a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(Error::dimension(format!(
                "reshape: {:?} ({} elements) into {:?} ({} elements)",
                a.shape(),
                a.numel(),
                shape,
                numel
            )));
        }
        let out = Tensor::result(shape.to_vec(), a.data().to_vec(), self.grad_needed(&[a]));
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &[a],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| a2.accumulate_grad(g));
                }),
            );
        }
        Ok(out)
    }

    /// Concatenate along the channel axis of [N,C,H,W] tensors.
    pub fn cat_channels(&self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::contract("cat_channels: empty input list"));
        }
        let first = parts[0].shape();
        if first.len() != 4 {
            return Err(Error::dimension(format!(
                "cat_channels expects [N,C,H,W], got {first:?}"
            )));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::dimension(format!(
                    "cat_channels: incompatible shapes {first:?} vs {s:?}"
                )));
            }
            c_total += s[1];
        }
        let plane = h * w;
        let mut data = vec![T::zero(); n * c_total * plane];
        for bi in 0..n {
            let mut c_off = 0;
            for p in parts {
                let pc = p.shape()[1];
                let src = &p.data()[bi * pc * plane..(bi + 1) * pc * plane];
                let dst_start = (bi * c_total + c_off) * plane;
                data[dst_start..dst_start + pc * plane].copy_from_slice(src);
                c_off += pc;
            }
        }
        let out = Tensor::result(
            vec![n, c_total, h, w],
            data,
            self.enabled() && parts.iter().any(|p| p.requires_grad()),
        );
        if out.requires_grad() {
            let owned: Vec<Tensor<T>> = parts.iter().map(|&p| p.clone()).collect();
            let o2 = out.clone();
            self.record(
                parts,
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        for bi in 0..n {
                            let mut c_off = 0;
                            for p in &owned {
                                let pc = p.shape()[1];
                                if p.requires_grad() {
                                    let start = (bi * c_total + c_off) * plane;
                                    let gslice = &g[start..start + pc * plane];
                                    // scatter into this part's batch slab
                                    let mut dp = vec![T::zero(); p.numel()];
                                    dp[bi * pc * plane..(bi + 1) * pc * plane]
                                        .copy_from_slice(gslice);
                                    p.accumulate_grad(&dp);
                                }
                                c_off += pc;
                            }
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Slice `len` channels starting at `start` from a [N,C,H,W] tensor.
    pub fn narrow_channels(&self, a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        let s = a.shape();
        if s.len() != 4 {
            return Err(Error::dimension(format!(
                "narrow_channels expects [N,C,H,W], got {s:?}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if start + len > c {
            return Err(Error::dimension(format!(
                "narrow_channels: [{start}, {}) out of {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let mut data = vec![T::zero(); n * len * plane];
        for bi in 0..n {
            let src = (bi * c + start) * plane;
            let dst = bi * len * plane;
            data[dst..dst + len * plane].copy_from_slice(&a.data()[src..src + len * plane]);
        }
        let out = Tensor::result(vec![n, len, h, w], data, self.grad_needed(&[a]));
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &[a],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        let mut da = vec![T::zero(); a2.numel()];
                        for bi in 0..n {
                            let dst = (bi * c + start) * plane;
                            let src = bi * len * plane;
                            da[dst..dst + len * plane].copy_from_slice(&g[src..src + len * plane]);
                        }
                        a2.accumulate_grad(&da);
                    });
                }),
            );
        }
        Ok(out)
    }

    // ---- pixel shuffle ----

    /// Space-to-depth: [N,C,H,W] -> [N,C*f*f,H/f,W/f]. Exact bijection with
    /// [`Tape::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, a: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
        let s = a.shape();
        if s.len() != 4 {
            return Err(Error::dimension(format!(
                "pixel_unshuffle expects [N,C,H,W], got {s:?}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::dimension(format!(
                "pixel_unshuffle: H={h}, W={w} not divisible by factor {factor}"
            )));
        }
        let (ho, wo) = (h / factor, w / factor);
        let co = c * factor * factor;
        let mut data = vec![T::zero(); a.numel()];
        let src = a.data();
        for bi in 0..n {
            for ci in 0..c {
                for fy in 0..factor {
                    for fx in 0..factor {
                        let oc = ci * factor * factor + fy * factor + fx;
                        for oy in 0..ho {
                            let iy = oy * factor + fy;
                            let irow = ((bi * c + ci) * h + iy) * w;
                            let orow = ((bi * co + oc) * ho + oy) * wo;
                            for ox in 0..wo {
                                data[orow + ox] = src[irow + ox * factor + fx];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::result(vec![n, co, ho, wo], data, self.grad_needed(&[a]));
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &[a],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        let mut da = vec![T::zero(); a2.numel()];
                        for bi in 0..n {
                            for ci in 0..c {
                                for fy in 0..factor {
                                    for fx in 0..factor {
                                        let oc = ci * factor * factor + fy * factor + fx;
                                        for oy in 0..ho {
                                            let iy = oy * factor + fy;
                                            let irow = ((bi * c + ci) * h + iy) * w;
                                            let orow = ((bi * co + oc) * ho + oy) * wo;
                                            for ox in 0..wo {
                                                da[irow + ox * factor + fx] = g[orow + ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        a2.accumulate_grad(&da);
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Depth-to-space: [N,C*f*f,H,W] -> [N,C,H*f,W*f]. Inverse of
    /// [`Tape::pixel_unshuffle`].
    pub fn pixel_shuffle(&self, a: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
        let s = a.shape();
        if s.len() != 4 {
            return Err(Error::dimension(format!(
                "pixel_shuffle expects [N,C,H,W], got {s:?}"
            )));
        }
        let (n, c_in, h, w) = (s[0], s[1], s[2], s[3]);
        if factor == 0 || c_in % (factor * factor) != 0 {
            return Err(Error::dimension(format!(
                "pixel_shuffle: {c_in} channels not divisible by factor^2 = {}",
                factor * factor
            )));
        }
        let c = c_in / (factor * factor);
        let (ho, wo) = (h * factor, w * factor);
        let mut data = vec![T::zero(); a.numel()];
        let src = a.data();
        for bi in 0..n {
            for ci in 0..c {
                for fy in 0..factor {
                    for fx in 0..factor {
                        let ic = ci * factor * factor + fy * factor + fx;
                        for yi in 0..h {
                            let irow = ((bi * c_in + ic) * h + yi) * w;
                            let orow = ((bi * c + ci) * ho + yi * factor + fy) * wo;
                            for xi in 0..w {
                                data[orow + xi * factor + fx] = src[irow + xi];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::result(vec![n, c, ho, wo], data, self.grad_needed(&[a]));
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &[a],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        let mut da = vec![T::zero(); a2.numel()];
                        for bi in 0..n {
                            for ci in 0..c {
                                for fy in 0..factor {
                                    for fx in 0..factor {
                                        let ic = ci * factor * factor + fy * factor + fx;
                                        for yi in 0..h {
                                            let irow = ((bi * c_in + ic) * h + yi) * w;
                                            let orow =
                                                ((bi * c + ci) * ho + yi * factor + fy) * wo;
                                            for xi in 0..w {
                                                da[irow + xi] = g[orow + xi * factor + fx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        a2.accumulate_grad(&da);
                    });
                }),
            );
        }
        Ok(out)
    }

    // ---- normalization ----

    /// Per-pixel normalization over the channel axis of [N,C,H,W], then
    /// per-channel affine. Variance is the biased estimate over C.
    pub fn layer_norm(
        &self,
        a: &Tensor<T>,
        gain: &Tensor<T>,
        bias: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>> {
        let s = a.shape();
        if s.len() != 4 {
            return Err(Error::dimension(format!(
                "layer_norm expects [N,C,H,W], got {s:?}"
            )));
        }
        if eps <= 0.0 {
            return Err(Error::config(format!("layer_norm: eps must be > 0, got {eps}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(Error::dimension(format!(
                "layer_norm: gain/bias must have shape [{c}], got {:?}/{:?}",
                gain.shape(),
                bias.shape()
            )));
        }
        let eps_t = T::from_f64(eps);
        let cn = T::from_f64(c as f64);
        let plane = h * w;
        let src = a.data();
        let mut data = vec![T::zero(); a.numel()];
        // per-pixel mean and inverse std, accumulated plane-major so every
        // inner loop walks contiguous memory
        let mut mean_cache = vec![T::zero(); n * plane];
        let mut istd_cache = vec![T::zero(); n * plane];
        for bi in 0..n {
            let mu = &mut mean_cache[bi * plane..(bi + 1) * plane];
            for ci in 0..c {
                let row = &src[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                for (m, &x) in mu.iter_mut().zip(row) {
                    *m += x;
                }
            }
            for m in mu.iter_mut() {
                *m = *m / cn;
            }
            let istd = &mut istd_cache[bi * plane..(bi + 1) * plane];
            for ci in 0..c {
                let row = &src[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                for ((v, &x), &m) in istd.iter_mut().zip(row).zip(mu.iter()) {
                    let d = x - m;
                    *v += d * d;
                }
            }
            for v in istd.iter_mut() {
                *v = T::one() / (*v / cn + eps_t).sqrt();
            }
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let (gv, bv) = (gain.data()[ci], bias.data()[ci]);
                for p in 0..plane {
                    data[base + p] = (src[base + p] - mu[p]) * istd[p] * gv + bv;
                }
            }
        }
        let out = Tensor::result(s.to_vec(), data, self.grad_needed(&[a, gain, bias]));
        if out.requires_grad() {
            let (a2, g2, b2, o2) = (a.clone(), gain.clone(), bias.clone(), out.clone());
            self.record(
                &[a, gain, bias],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        let src = a2.data();
                        let mut da = vec![T::zero(); a2.numel()];
                        let mut dgain = vec![T::zero(); c];
                        let mut dbias = vec![T::zero(); c];
                        let mut sum_dxhat = vec![T::zero(); plane];
                        let mut sum_dxhat_xhat = vec![T::zero(); plane];
                        for bi in 0..n {
                            let mu = &mean_cache[bi * plane..(bi + 1) * plane];
                            let istd = &istd_cache[bi * plane..(bi + 1) * plane];
                            sum_dxhat.iter_mut().for_each(|v| *v = T::zero());
                            sum_dxhat_xhat.iter_mut().for_each(|v| *v = T::zero());
                            for ci in 0..c {
                                let base = (bi * c + ci) * plane;
                                let gw = g2.data()[ci];
                                let mut dg = T::zero();
                                let mut db = T::zero();
                                for p in 0..plane {
                                    let xhat = (src[base + p] - mu[p]) * istd[p];
                                    let gv = g[base + p];
                                    let dxhat = gv * gw;
                                    sum_dxhat[p] += dxhat;
                                    sum_dxhat_xhat[p] += dxhat * xhat;
                                    dg += gv * xhat;
                                    db += gv;
                                }
                                dgain[ci] += dg;
                                dbias[ci] += db;
                            }
                            if a2.requires_grad() {
                                for ci in 0..c {
                                    let base = (bi * c + ci) * plane;
                                    let gw = g2.data()[ci];
                                    for p in 0..plane {
                                        let xhat = (src[base + p] - mu[p]) * istd[p];
                                        let dxhat = g[base + p] * gw;
                                        da[base + p] = istd[p]
                                            * (dxhat
                                                - sum_dxhat[p] / cn
                                                - xhat * sum_dxhat_xhat[p] / cn);
                                    }
                                }
                            }
                        }
                        if a2.requires_grad() {
                            a2.accumulate_grad(&da);
                        }
                        if g2.requires_grad() {
                            g2.accumulate_grad(&dgain);
                        }
                        if b2.requires_grad() {
                            b2.accumulate_grad(&dbias);
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let s = a.shape();
        let last = *s.last().ok_or_else(|| Error::dimension("softmax_last: rank 0"))?;
        let rows = a.numel() / last;
        let src = a.data();
        let mut data = vec![T::zero(); a.numel()];
        for r in 0..rows {
            let row = &src[r * last..(r + 1) * last];
            let m = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
            let mut z = T::zero();
            for (o, &x) in data[r * last..(r + 1) * last].iter_mut().zip(row) {
                let e = (x - m).exp();
                *o = e;
                z += e;
            }
            for o in &mut data[r * last..(r + 1) * last] {
                *o = *o / z;
            }
        }
        let out = Tensor::result(s.to_vec(), data, self.grad_needed(&[a]));
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &[a],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        let y = o2.data();
                        let mut da = vec![T::zero(); a2.numel()];
                        for r in 0..rows {
                            let off = r * last;
                            let mut dot = T::zero();
                            for i in 0..last {
                                dot += g[off + i] * y[off + i];
                            }
                            for i in 0..last {
                                da[off + i] = y[off + i] * (g[off + i] - dot);
                            }
                        }
                        a2.accumulate_grad(&da);
                    });
                }),
            );
        }
        Ok(out)
    }

    /// L2-normalize along the last axis: y = x / sqrt(sum(x^2) + eps).
    pub fn l2_normalize_last(&self, a: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let s = a.shape();
        let last = *s
            .last()
            .ok_or_else(|| Error::dimension("l2_normalize_last: rank 0"))?;
        let rows = a.numel() / last;
        let eps_t = T::from_f64(eps);
        let src = a.data();
        let mut data = vec![T::zero(); a.numel()];
        let mut inv_norms = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &src[r * last..(r + 1) * last];
            let ss = row.iter().fold(T::zero(), |acc, &x| acc + x * x);
            let inv = T::one() / (ss + eps_t).sqrt();
            inv_norms[r] = inv;
            for (o, &x) in data[r * last..(r + 1) * last].iter_mut().zip(row) {
                *o = x * inv;
            }
        }
        let out = Tensor::result(s.to_vec(), data, self.grad_needed(&[a]));
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &[a],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        let src = a2.data();
                        let mut da = vec![T::zero(); a2.numel()];
                        for r in 0..rows {
                            let off = r * last;
                            let inv = inv_norms[r];
                            let mut dot = T::zero();
                            for i in 0..last {
                                dot += g[off + i] * src[off + i];
                            }
                            let inv3 = inv * inv * inv;
                            for i in 0..last {
                                da[off + i] = g[off + i] * inv - src[off + i] * dot * inv3;
                            }
                        }
                        a2.accumulate_grad(&da);
                    });
                }),
            );
        }
        Ok(out)
    }

    // ---- batched matrix products (rank-3: [B,M,K]) ----

    /// out[b] = a[b] @ b[b]: [B,M,K] x [B,K,N] -> [B,M,N].
    pub fn bmm(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dimension(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![T::zero(); bs * m * n];
        for bi in 0..bs {
            matmul(
                &a.data()[bi * m * k..],
                &b.data()[bi * k * n..],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out = Tensor::result(vec![bs, m, n], data, self.grad_needed(&[a, b]));
        if out.requires_grad() {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.record(
                &[a, b],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        if a2.requires_grad() {
                            // dA = G @ B^T
                            let mut da = vec![T::zero(); a2.numel()];
                            for bi in 0..bs {
                                matmul_bt(
                                    &g[bi * m * n..],
                                    &b2.data()[bi * k * n..],
                                    &mut da[bi * m * k..(bi + 1) * m * k],
                                    m,
                                    n,
                                    k,
                                );
                            }
                            a2.accumulate_grad(&da);
                        }
                        if b2.requires_grad() {
                            // dB = A^T @ G
                            let mut db = vec![T::zero(); b2.numel()];
                            for bi in 0..bs {
                                matmul_at(
                                    &a2.data()[bi * m * k..],
                                    &g[bi * m * n..],
                                    &mut db[bi * k * n..(bi + 1) * k * n],
                                    m,
                                    k,
                                    n,
                                );
                            }
                            b2.accumulate_grad(&db);
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    /// out[b] = a[b] @ b[b]^T: [B,M,K] x [B,N,K] -> [B,M,N].
    pub fn bmm_transposed(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::dimension(format!("bmm_transposed: {sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut data = vec![T::zero(); bs * m * n];
        for bi in 0..bs {
            matmul_bt(
                &a.data()[bi * m * k..],
                &b.data()[bi * n * k..],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out = Tensor::result(vec![bs, m, n], data, self.grad_needed(&[a, b]));
        if out.requires_grad() {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.record(
                &[a, b],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        if a2.requires_grad() {
                            // dA = G @ B
                            let mut da = vec![T::zero(); a2.numel()];
                            for bi in 0..bs {
                                matmul(
                                    &g[bi * m * n..],
                                    &b2.data()[bi * n * k..],
                                    &mut da[bi * m * k..(bi + 1) * m * k],
                                    m,
                                    n,
                                    k,
                                );
                            }
                            a2.accumulate_grad(&da);
                        }
                        if b2.requires_grad() {
                            // dB = G^T @ A
                            let mut db = vec![T::zero(); b2.numel()];
                            for bi in 0..bs {
                                matmul_at(
                                    &g[bi * m * n..],
                                    &a2.data()[bi * m * k..],
                                    &mut db[bi * n * k..(bi + 1) * n * k],
                                    m,
                                    n,
                                    k,
                                );
                            }
                            b2.accumulate_grad(&db);
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Multiply each batch slab of a rank-3 tensor by its own scalar:
    /// out[b, ..] = a[b, ..] * s[b].
    pub fn scale_per_batch(&self, a: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        let sa = a.shape();
        if sa.len() != 3 {
            return Err(Error::dimension(format!(
                "scale_per_batch expects rank-3 input, got {sa:?}"
            )));
        }
        let bs = sa[0];
        if s.shape() != [bs] {
            return Err(Error::dimension(format!(
                "scale_per_batch: scale must have shape [{bs}], got {:?}",
                s.shape()
            )));
        }
        let slab = a.numel() / bs;
        let mut data = vec![T::zero(); a.numel()];
        for bi in 0..bs {
            let sv = s.data()[bi];
            for i in 0..slab {
                data[bi * slab + i] = a.data()[bi * slab + i] * sv;
            }
        }
        let out = Tensor::result(sa.to_vec(), data, self.grad_needed(&[a, s]));
        if out.requires_grad() {
            let (a2, s2, o2) = (a.clone(), s.clone(), out.clone());
            self.record(
                &[a, s],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        if a2.requires_grad() {
                            let mut da = vec![T::zero(); a2.numel()];
                            for bi in 0..bs {
                                let sv = s2.data()[bi];
                                for i in 0..slab {
                                    da[bi * slab + i] = g[bi * slab + i] * sv;
                                }
                            }
                            a2.accumulate_grad(&da);
                        }
                        if s2.requires_grad() {
                            let mut ds = vec![T::zero(); bs];
                            for bi in 0..bs {
                                let mut acc = T::zero();
                                for i in 0..slab {
                                    acc += g[bi * slab + i] * a2.data()[bi * slab + i];
                                }
                                ds[bi] = acc;
                            }
                            s2.accumulate_grad(&ds);
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Per-channel bias add on [N,C,H,W]: out[n,c,..] = a[n,c,..] + bias[c].
    pub fn add_channel_bias(&self, a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let s = a.shape();
        if s.len() != 4 {
            return Err(Error::dimension(format!(
                "add_channel_bias expects [N,C,H,W], got {s:?}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if bias.shape() != [c] {
            return Err(Error::dimension(format!(
                "add_channel_bias: bias must have shape [{c}], got {:?}",
                bias.shape()
            )));
        }
        let plane = h * w;
        let mut data = a.data().to_vec();
        for bi in 0..n {
            for ci in 0..c {
                let bv = bias.data()[ci];
                for v in &mut data[(bi * c + ci) * plane..(bi * c + ci + 1) * plane] {
                    *v += bv;
                }
            }
        }
        let out = Tensor::result(s.to_vec(), data, self.grad_needed(&[a, bias]));
        if out.requires_grad() {
            let (a2, b2, o2) = (a.clone(), bias.clone(), out.clone());
            self.record(
                &[a, bias],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        if a2.requires_grad() {
                            a2.accumulate_grad(g);
                        }
                        if b2.requires_grad() {
                            let mut db = vec![T::zero(); c];
                            for bi in 0..n {
                                for ci in 0..c {
                                    let mut acc = T::zero();
                                    for &gv in &g[(bi * c + ci) * plane..(bi * c + ci + 1) * plane]
                                    {
                                        acc += gv;
                                    }
                                    db[ci] += acc;
                                }
                            }
                            b2.accumulate_grad(&db);
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Quality-weighted combination of stacked frames:
    /// out[0,c,y,x] = sum_f w[f] * frames[0, f*ch + c, y, x].
    pub fn weighted_frame_sum(
        &self,
        frames: &Tensor<T>,
        weights: &Tensor<T>,
        channels_per_frame: usize,
    ) -> Result<Tensor<T>> {
        let s = frames.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::dimension(format!(
                "weighted_frame_sum expects [1,F*ch,H,W], got {s:?}"
            )));
        }
        let (c_total, h, w) = (s[1], s[2], s[3]);
        if channels_per_frame == 0 || c_total % channels_per_frame != 0 {
            return Err(Error::dimension(format!(
                "weighted_frame_sum: {c_total} channels not divisible by {channels_per_frame}"
            )));
        }
        let f = c_total / channels_per_frame;
        if weights.shape() != [f] {
            return Err(Error::dimension(format!(
                "weighted_frame_sum: weights must have shape [{f}], got {:?}",
                weights.shape()
            )));
        }
        let plane = h * w;
        let ch = channels_per_frame;
        let mut data = vec![T::zero(); ch * plane];
        for fi in 0..f {
            let wv = weights.data()[fi];
            for ci in 0..ch {
                let src = &frames.data()[(fi * ch + ci) * plane..(fi * ch + ci + 1) * plane];
                let dst = &mut data[ci * plane..(ci + 1) * plane];
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d += wv * x;
                }
            }
        }
        let out = Tensor::result(
            vec![1, ch, h, w],
            data,
            self.grad_needed(&[frames, weights]),
        );
        if out.requires_grad() {
            let (f2, w2, o2) = (frames.clone(), weights.clone(), out.clone());
            self.record(
                &[frames, weights],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        if f2.requires_grad() {
                            let mut df = vec![T::zero(); f2.numel()];
                            for fi in 0..f {
                                let wv = w2.data()[fi];
                                for ci in 0..ch {
                                    let dst = &mut df
                                        [(fi * ch + ci) * plane..(fi * ch + ci + 1) * plane];
                                    let gsl = &g[ci * plane..(ci + 1) * plane];
                                    for (d, &gv) in dst.iter_mut().zip(gsl) {
                                        *d = wv * gv;
                                    }
                                }
                            }
                            f2.accumulate_grad(&df);
                        }
                        if w2.requires_grad() {
                            let mut dw = vec![T::zero(); f];
                            for fi in 0..f {
                                let mut acc = T::zero();
                                for ci in 0..ch {
                                    let src = &f2.data()
                                        [(fi * ch + ci) * plane..(fi * ch + ci + 1) * plane];
                                    let gsl = &g[ci * plane..(ci + 1) * plane];
                                    for (&x, &gv) in src.iter().zip(gsl) {
                                        acc += x * gv;
                                    }
                                }
                                dw[fi] = acc;
                            }
                            w2.accumulate_grad(&dw);
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Spatial global average pool: [N,C,H,W] -> [N,C].
    pub fn global_avg_pool(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let s = a.shape();
        if s.len() != 4 {
            return Err(Error::dimension(format!(
                "global_avg_pool expects [N,C,H,W], got {s:?}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let inv = T::from_f64(1.0 / plane as f64);
        let mut data = vec![T::zero(); n * c];
        for i in 0..n * c {
            let mut acc = T::zero();
            for &x in &a.data()[i * plane..(i + 1) * plane] {
                acc += x;
            }
            data[i] = acc * inv;
        }
        let out = Tensor::result(vec![n, c], data, self.grad_needed(&[a]));
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record(
                &[a],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        let mut da = vec![T::zero(); a2.numel()];
                        for i in 0..n * c {
                            let gv = g[i] * inv;
                            for d in &mut da[i * plane..(i + 1) * plane] {
                                *d = gv;
                            }
                        }
                        a2.accumulate_grad(&da);
                    });
                }),
            );
        }
        Ok(out)
    }

    /// Transposed attention across channels of [1,C,H,W] tensors: the
    /// attention matrix is (C/heads) x (C/heads) per head, linear in pixel
    /// count. q and k rows are L2-normalized over pixels; rows of the
    /// softmax output sum to 1. `temperature` holds one learned scale per
    /// head.
    pub fn channel_attention(
        &self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        heads: usize,
        temperature: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let s = q.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::dimension(format!(
                "channel_attention expects [1,C,H,W], got {s:?}"
            )));
        }
        if k.shape() != s || v.shape() != s {
            return Err(Error::dimension(format!(
                "channel_attention: q/k/v shapes differ: {:?} {:?} {:?}",
                s,
                k.shape(),
                v.shape()
            )));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        if heads == 0 || c % heads != 0 {
            return Err(Error::config(format!(
                "channel_attention: {c} channels not divisible by {heads} heads"
            )));
        }
        if temperature.shape() != [heads] {
            return Err(Error::dimension(format!(
                "channel_attention: temperature must have shape [{heads}], got {:?}",
                temperature.shape()
            )));
        }
        let ch = c / heads;
        let hw = h * w;
        // [1,C,H,W] -> [heads, C/heads, HW]; channel-major layout makes this a pure reshape
        let qh = self.reshape(q, &[heads, ch, hw])?;
        let kh = self.reshape(k, &[heads, ch, hw])?;
        let vh = self.reshape(v, &[heads, ch, hw])?;
        let qn = self.l2_normalize_last(&qh, 1e-12)?;
        let kn = self.l2_normalize_last(&kh, 1e-12)?;
        let logits = self.bmm_transposed(&qn, &kn)?; // [heads, ch, ch]
        let scaled = self.scale_per_batch(&logits, temperature)?;
        let attn = self.softmax_last(&scaled)?;
        let out = self.bmm(&attn, &vh)?; // [heads, ch, hw]
        self.reshape(&out, &[1, c, h, w])
    }

    /// Fully connected layer on [N,K] input: out = x @ w^T, w is [M,K].
    pub fn linear(&self, x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::dimension(format!("linear: {sx:?} x {sw:?}")));
        }
        let (n, k, m) = (sx[0], sx[1], sw[0]);
        let mut data = vec![T::zero(); n * m];
        matmul_bt(x.data(), w.data(), &mut data, n, k, m);
        let out = Tensor::result(vec![n, m], data, self.grad_needed(&[x, w]));
        if out.requires_grad() {
            let (x2, w2, o2) = (x.clone(), w.clone(), out.clone());
            self.record(
                &[x, w],
                &out,
                Box::new(move || {
                    o2.with_grad(|g| {
                        if x2.requires_grad() {
                            let mut dx = vec![T::zero(); x2.numel()];
                            matmul(g, w2.data(), &mut dx, n, m, k);
                            x2.accumulate_grad(&dx);
                        }
                        if w2.requires_grad() {
                            let mut dw = vec![T::zero(); w2.numel()];
                            matmul_at(g, x2.data(), &mut dw, n, m, k);
                            w2.accumulate_grad(&dw);
                        }
                    });
                }),
            );
        }
        Ok(out)
    }
}

impl<T: Scalar> Tape<T> {
    pub(crate) fn enabled(&self) -> bool {
        self.is_recording()
    }
}

/// c[m,n] = a[m,k] @ b[k,n], accumulating into `c` (caller zeroes it).
fn matmul<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] = a[m,k] @ b[n,k]^T, accumulating into `c`.
fn matmul_bt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// c[k,n] = a[m,k]^T @ b[m,n], accumulating into `c`.
fn matmul_at<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, Tensor};

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::<f64>::no_grad();
        let x = Tensor::from_vec(&[2, 3, 4], (0..24).map(|i| (i as f64) * 0.3 - 2.0).collect())
            .unwrap();
        let y = tape.softmax_last(&x).unwrap();
        for r in 0..6 {
            let s: f64 = y.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
        }
    }

    #[test]
    fn pixel_unshuffle_enumerated() {
        // 1x1x2x2 [[1,2],[3,4]] factor 2 -> 1x4x1x1 {1,2,3,4}
        let tape = Tape::<f32>::no_grad();
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = tape.pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 4, 1, 1]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_roundtrip_exact() {
        let tape = Tape::<f32>::no_grad();
        let data: Vec<f32> = (0..2 * 3 * 4 * 6).map(|i| i as f32).collect();
        let x = Tensor::from_vec(&[2, 3, 4, 6], data.clone()).unwrap();
        let y = tape.pixel_unshuffle(&x, 2).unwrap();
        let z = tape.pixel_shuffle(&y, 2).unwrap();
        assert_eq!(z.shape(), x.shape());
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn pixel_unshuffle_factor_one_is_identity() {
        let tape = Tape::<f32>::no_grad();
        let x = Tensor::from_vec(&[1, 2, 3, 3], (0..18).map(|i| i as f32).collect()).unwrap();
        let y = tape.pixel_unshuffle(&x, 1).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn pixel_unshuffle_rejects_indivisible() {
        let tape = Tape::<f32>::no_grad();
        let x = Tensor::from_vec(&[1, 1, 3, 3], vec![0.0; 9]).unwrap();
        assert!(tape.pixel_unshuffle(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let tape = Tape::<f64>::no_grad();
        let x = Tensor::from_vec(&[1, 3, 2, 2], vec![0.7; 12]).unwrap();
        let gain = Tensor::from_vec(&[3], vec![1.0; 3]).unwrap();
        let bias = Tensor::from_vec(&[3], vec![0.0; 3]).unwrap();
        let y = tape.layer_norm(&x, &gain, &bias, 1e-6).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_two_channel_closed_form() {
        // channels (1,3) at one pixel, eps→0: mean 2, std 1 -> (-1, 1)
        let tape = Tape::<f64>::no_grad();
        let x = Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        let gain = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let bias = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let y = tape.layer_norm(&x, &gain, &bias, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_channel_mismatch_errors() {
        let tape = Tape::<f64>::no_grad();
        let x = Tensor::from_vec(&[1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let gain = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let bias = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        assert!(tape.layer_norm(&x, &gain, &bias, 1e-6).is_err());
    }

    #[test]
    fn cat_and_narrow_roundtrip() {
        let tape = Tape::<f32>::no_grad();
        let a = Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|i| i as f32).collect()).unwrap();
        let b = Tensor::from_vec(&[1, 1, 2, 2], (8..12).map(|i| i as f32).collect()).unwrap();
        let cat = tape.cat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[1, 3, 2, 2]);
        let a2 = tape.narrow_channels(&cat, 0, 2).unwrap();
        let b2 = tape.narrow_channels(&cat, 2, 1).unwrap();
        assert_eq!(a2.data(), a.data());
        assert_eq!(b2.data(), b.data());
    }

    #[test]
    fn bmm_small_case() {
        let tape = Tape::<f64>::no_grad();
        let a = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = tape.bmm(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
        // a @ b^T
        let d = tape.bmm_transposed(&a, &b).unwrap();
        assert_eq!(d.data(), &[17.0, 23.0, 39.0, 53.0]);
    }
}
