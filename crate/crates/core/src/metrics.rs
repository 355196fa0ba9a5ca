//! Image fidelity metrics (PSNR, SSIM) and the training objective
//! alpha * L1 + (1 - alpha) * (1 - SSIM).
//!
//! Plain-image metrics run in f64 and are pure functions; the objective is
//! built from tape operations so it is differentiable end to end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgbuf::Image;
use crate::tensor::{Scalar, Tape, Tensor};

/// PSNR returned for exactly identical images (and an upper clamp otherwise).
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Balance between L1 (alpha) and SSIM (1 - alpha).
    pub alpha: f64,
    /// Odd Gaussian window extent for SSIM.
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    /// Stabilizers for dynamic range 1.0.
    pub c1: f64,
    pub c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            ssim_window: 11,
            ssim_sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!(
                "loss alpha must be in [0,1], got {}",
                self.alpha
            )));
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(Error::config(format!(
                "ssim window must be odd and >= 3, got {}",
                self.ssim_window
            )));
        }
        if self.ssim_sigma <= 0.0 {
            return Err(Error::config("ssim sigma must be positive"));
        }
        Ok(())
    }
}

/// How multi-channel images are reduced to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// Metric over all channels jointly (the default).
    RgbMean,
    /// Rec.601 luma before the metric.
    Luma,
}

fn luma(img: &Image) -> Image {
    if img.c == 1 {
        return img.clone();
    }
    let mut out = Image::new(img.h, img.w, 1);
    for y in 0..img.h {
        for x in 0..img.w {
            let v = 0.299 * img.get(y, x, 0) + 0.587 * img.get(y, x, 1) + 0.114 * img.get(y, x, 2);
            out.set(y, x, 0, v);
        }
    }
    out
}

/// 10 * log10(1 / mse) over unit dynamic range, capped at [`PSNR_CAP_DB`]
/// (zero MSE would otherwise be infinite).
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// Peak signal-to-noise ratio of an image pair in dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::dimension(format!(
            "psnr: {}x{}x{} vs {}x{}x{}",
            a.h, a.w, a.c, b.h, b.w, b.c
        )));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    Ok(psnr_from_mse(acc / a.data.len() as f64))
}

pub fn psnr_mode(a: &Image, b: &Image, mode: ChannelMode) -> Result<f64> {
    match mode {
        ChannelMode::RgbMean => psnr(a, b),
        ChannelMode::Luma => psnr(&luma(a), &luma(b)),
    }
}

fn gaussian_window(window: usize, sigma: f64) -> Vec<f64> {
    let radius = (window / 2) as isize;
    let mut taps = Vec::with_capacity(window);
    for i in 0..window as isize {
        let d = (i - radius) as f64;
        taps.push((-d * d / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Mean structural similarity over all valid (fully inside) window
/// positions, Gaussian-weighted, computed per channel and averaged.
pub fn ssim(a: &Image, b: &Image, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if !a.same_shape(b) {
        return Err(Error::dimension(format!(
            "ssim: {}x{}x{} vs {}x{}x{}",
            a.h, a.w, a.c, b.h, b.w, b.c
        )));
    }
    let win = cfg.ssim_window;
    if a.h < win || a.w < win {
        return Err(Error::dimension(format!(
            "ssim: image {}x{} smaller than window {win}",
            a.h, a.w
        )));
    }
    let taps = gaussian_window(win, cfg.ssim_sigma);
    let (h, w) = (a.h, a.w);
    let (vh, vw) = (h - win + 1, w - win + 1);
    let mut total = 0.0f64;
    for ch in 0..a.c {
        // separable filtering of the five moment maps
        let mut maps = [
            vec![0.0f64; h * w], // x
            vec![0.0f64; h * w], // y
            vec![0.0f64; h * w], // xx
            vec![0.0f64; h * w], // yy
            vec![0.0f64; h * w], // xy
        ];
        for y in 0..h {
            for x in 0..w {
                let av = a.get(y, x, ch) as f64;
                let bv = b.get(y, x, ch) as f64;
                let i = y * w + x;
                maps[0][i] = av;
                maps[1][i] = bv;
                maps[2][i] = av * av;
                maps[3][i] = bv * bv;
                maps[4][i] = av * bv;
            }
        }
        let filtered: Vec<Vec<f64>> = maps
            .iter()
            .map(|m| valid_separable_filter(m, h, w, &taps))
            .collect();
        let mut acc = 0.0f64;
        for i in 0..vh * vw {
            let (mx, my) = (filtered[0][i], filtered[1][i]);
            let sx = filtered[2][i] - mx * mx;
            let sy = filtered[3][i] - my * my;
            let sxy = filtered[4][i] - mx * my;
            let num = (2.0 * mx * my + cfg.c1) * (2.0 * sxy + cfg.c2);
            let den = (mx * mx + my * my + cfg.c1) * (sx + sy + cfg.c2);
            acc += num / den;
        }
        total += acc / (vh * vw) as f64;
    }
    Ok(total / a.c as f64)
}

/// Valid-region separable filter: output is (h-win+1) x (w-win+1) stored
/// row-major, window anchored at its top-left corner.
fn valid_separable_filter(m: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let win = taps.len();
    let vw = w - win + 1;
    let vh = h - win + 1;
    let mut horiz = vec![0.0f64; h * vw];
    for y in 0..h {
        for x in 0..vw {
            let mut acc = 0.0;
            for (i, &t) in taps.iter().enumerate() {
                acc += t * m[y * w + x + i];
            }
            horiz[y * vw + x] = acc;
        }
    }
    let mut out = vec![0.0f64; vh * vw];
    for y in 0..vh {
        for x in 0..vw {
            let mut acc = 0.0;
            for (i, &t) in taps.iter().enumerate() {
                acc += t * horiz[(y + i) * vw + x];
            }
            out[y * vw + x] = acc;
        }
    }
    out
}

/// Differentiable alpha * mean|pred-target| + (1-alpha) * (1 - SSIM) on
/// [1,C,H,W] tensors. The SSIM branch uses a fixed Gaussian depthwise
/// kernel over valid positions, matching [`ssim`].
pub fn combined_loss<T: Scalar>(
    tape: &Tape<T>,
    pred: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if pred.shape() != target.shape() {
        return Err(Error::dimension(format!(
            "combined_loss: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let alpha = T::from_f64(cfg.alpha);
    let diff = tape.sub(pred, target)?;
    let l1 = tape.mean(&tape.abs(&diff)?)?;
    if cfg.alpha >= 1.0 {
        return tape.scale(&l1, alpha);
    }
    let ssim_val = ssim_tensor(tape, pred, target, cfg)?;
    let one_minus = tape.add_scalar(&tape.scale(&ssim_val, -T::one())?, T::one())?;
    tape.add(
        &tape.scale(&l1, alpha)?,
        &tape.scale(&one_minus, T::one() - alpha)?,
    )
}

/// Differentiable SSIM (mean over valid windows and channels).
pub fn ssim_tensor<T: Scalar>(
    tape: &Tape<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    let s = a.shape();
    if s.len() != 4 {
        return Err(Error::dimension(format!(
            "ssim_tensor expects [N,C,H,W], got {s:?}"
        )));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let win = cfg.ssim_window;
    if h < win || w < win {
        return Err(Error::dimension(format!(
            "ssim_tensor: {h}x{w} smaller than window {win}"
        )));
    }
    let taps = gaussian_window(win, cfg.ssim_sigma);
    // depthwise [C,1,win,win] kernel with identical Gaussian in each channel
    let mut kdata = Vec::with_capacity(c * win * win);
    for _ in 0..c {
        for ty in 0..win {
            for tx in 0..win {
                kdata.push(T::from_f64(taps[ty] * taps[tx]));
            }
        }
    }
    let kernel = Tensor::from_vec(&[c, 1, win, win], kdata)?;
    let g = |t: &Tensor<T>| tape.depthwise_conv2d(t, &kernel, 0);

    let mu_a = g(a)?;
    let mu_b = g(b)?;
    let e_aa = g(&tape.mul(a, a)?)?;
    let e_bb = g(&tape.mul(b, b)?)?;
    let e_ab = g(&tape.mul(a, b)?)?;

    let mu_aa = tape.mul(&mu_a, &mu_a)?;
    let mu_bb = tape.mul(&mu_b, &mu_b)?;
    let mu_ab = tape.mul(&mu_a, &mu_b)?;

    let var_a = tape.sub(&e_aa, &mu_aa)?;
    let var_b = tape.sub(&e_bb, &mu_bb)?;
    let cov = tape.sub(&e_ab, &mu_ab)?;

    let two = T::from_f64(2.0);
    let c1 = T::from_f64(cfg.c1);
    let c2 = T::from_f64(cfg.c2);
    let num = tape.mul(
        &tape.add_scalar(&tape.scale(&mu_ab, two)?, c1)?,
        &tape.add_scalar(&tape.scale(&cov, two)?, c2)?,
    )?;
    let den = tape.mul(
        &tape.add_scalar(&tape.add(&mu_aa, &mu_bb)?, c1)?,
        &tape.add_scalar(&tape.add(&var_a, &var_b)?, c2)?,
    )?;
    let map = tape.div(&num, &den)?;
    tape.mean(&map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image(h: usize, w: usize, c: usize) -> Image {
        let mut img = Image::new(h, w, c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    img.set(y, x, ch, ((y * w + x + ch) % 97) as f32 / 97.0);
                }
            }
        }
        img
    }

    #[test]
    fn psnr_identical_hits_cap() {
        let a = ramp_image(8, 8, 3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_closed_form_at_mse_001() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-9);
        assert_eq!(psnr_from_mse(0.0), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_uniform_offset_closed_form() {
        // b = a + 0.1 -> MSE 0.01 -> 20 dB (f32 image storage costs ~1e-6 dB)
        let a = Image::filled(8, 8, 3, 0.3);
        let mut b = a.clone();
        for v in &mut b.data {
            *v += 0.1;
        }
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-5, "psnr {p}");
    }

    #[test]
    fn psnr_shape_mismatch_errors() {
        let a = Image::new(8, 8, 3);
        let b = Image::new(8, 9, 3);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_self_is_one() {
        let a = ramp_image(16, 16, 3);
        let cfg = LossConfig::default();
        let s = ssim(&a, &a, &cfg).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "ssim {s}");
    }

    #[test]
    fn ssim_constant_pair_is_one() {
        let a = Image::filled(16, 16, 3, 0.5);
        let b = Image::filled(16, 16, 3, 0.5);
        let s = ssim(&a, &b, &LossConfig::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::new(8, 8, 3);
        assert!(ssim(&a, &a, &LossConfig::default()).is_err());
    }

    #[test]
    fn loss_config_validation() {
        let mut cfg = LossConfig::default();
        cfg.alpha = 1.3;
        assert!(cfg.validate().is_err());
        cfg.alpha = 0.5;
        cfg.ssim_window = 4;
        assert!(cfg.validate().is_err());
    }
}
