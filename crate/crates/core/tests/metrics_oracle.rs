//! Independent oracles for the fidelity metrics: a direct-summation SSIM
//! (no separable filtering, no shared code path) and closed-form PSNR
//! identities, plus cross-checks between the image metrics and the
//! differentiable objective.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use turbmit_core::imgbuf::Image;
use turbmit_core::metrics::{
    combined_loss, psnr, psnr_from_mse, ssim, ssim_tensor, LossConfig, PSNR_CAP_DB,
};
use turbmit_core::tensor::{Tape, Tensor};

fn rand_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::new(h, w, c);
    for v in &mut img.data {
        *v = rng.random_range(0.0..1.0f32);
    }
    img
}

/// Direct windowed-summation SSIM: for every valid window position compute
/// the Gaussian-weighted moments by explicit double loops.
fn ssim_direct(a: &Image, b: &Image, cfg: &LossConfig) -> f64 {
    let win = cfg.ssim_window;
    let radius = win / 2;
    let mut taps = Vec::with_capacity(win);
    for i in 0..win {
        let d = i as f64 - radius as f64;
        taps.push((-d * d / (2.0 * cfg.ssim_sigma * cfg.ssim_sigma)).exp());
    }
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.into_iter().map(|t| t / norm).collect();

    let mut total = 0.0;
    for ch in 0..a.c {
        let mut acc = 0.0;
        let mut count = 0usize;
        for y0 in 0..=a.h - win {
            for x0 in 0..=a.w - win {
                let (mut mx, mut my) = (0.0f64, 0.0f64);
                let (mut sxx, mut syy, mut sxy) = (0.0f64, 0.0f64, 0.0f64);
                for dy in 0..win {
                    for dx in 0..win {
                        let w = taps[dy] * taps[dx];
                        let xv = a.get(y0 + dy, x0 + dx, ch) as f64;
                        let yv = b.get(y0 + dy, x0 + dx, ch) as f64;
                        mx += w * xv;
                        my += w * yv;
                        sxx += w * xv * xv;
                        syy += w * yv * yv;
                        sxy += w * xv * yv;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cxy = sxy - mx * my;
                let num = (2.0 * mx * my + cfg.c1) * (2.0 * cxy + cfg.c2);
                let den = (mx * mx + my * my + cfg.c1) * (vx + vy + cfg.c2);
                acc += num / den;
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / a.c as f64
}

#[test]
fn ssim_matches_direct_summation_oracle() {
    let cfg = LossConfig::default();
    for seed in 0..25u64 {
        let a = rand_image(16, 16, 3, seed);
        let b = rand_image(16, 16, 3, seed + 1000);
        let fast = ssim(&a, &b, &cfg).unwrap();
        let direct = ssim_direct(&a, &b, &cfg);
        assert!(
            (fast - direct).abs() < 1e-6,
            "seed {seed}: {fast} vs oracle {direct}"
        );
    }
}

#[test]
fn ssim_tensor_matches_image_path() {
    let cfg = LossConfig::default();
    for seed in 0..5u64 {
        let a = rand_image(16, 16, 3, seed + 77);
        let b = rand_image(16, 16, 3, seed + 2077);
        let reference = ssim(&a, &b, &cfg).unwrap();
        let tape = Tape::<f64>::no_grad();
        let ta = Tensor::from_vec(&[1, 3, 16, 16], img_to_chw(&a)).unwrap();
        let tb = Tensor::from_vec(&[1, 3, 16, 16], img_to_chw(&b)).unwrap();
        let tensor_val = ssim_tensor(&tape, &ta, &tb, &cfg).unwrap().item().unwrap();
        assert!(
            (reference - tensor_val).abs() < 1e-9,
            "seed {seed}: image {reference} vs tensor {tensor_val}"
        );
    }
}

fn img_to_chw(img: &Image) -> Vec<f64> {
    let plane = img.h * img.w;
    let mut data = vec![0.0f64; img.data.len()];
    for y in 0..img.h {
        for x in 0..img.w {
            for ch in 0..img.c {
                data[ch * plane + y * img.w + x] = img.get(y, x, ch) as f64;
            }
        }
    }
    data
}

#[test]
fn psnr_closed_forms() {
    assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-9);
    assert_eq!(psnr_from_mse(0.0), PSNR_CAP_DB);
    let a = rand_image(12, 12, 3, 5);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
}

#[test]
fn psnr_symmetric_and_monotone_in_noise() {
    let base = rand_image(24, 24, 3, 9);
    // symmetry
    for seed in 0..5u64 {
        let other = rand_image(24, 24, 3, seed + 500);
        let ab = psnr(&base, &other).unwrap();
        let ba = psnr(&other, &base).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }
    // strictly decreasing over five noise amplitudes
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let noise: Vec<f32> = (0..base.data.len())
        .map(|_| rng.random_range(-1.0..1.0f32))
        .collect();
    let mut prev = f64::INFINITY;
    for amp in [0.01f32, 0.02, 0.05, 0.1, 0.2] {
        let mut noisy = base.clone();
        for (v, n) in noisy.data.iter_mut().zip(&noise) {
            *v = (*v + amp * n).clamp(0.0, 1.0);
        }
        let p = psnr(&noisy, &base).unwrap();
        assert!(p < prev, "amplitude {amp}: psnr {p} did not decrease");
        prev = p;
    }
}

#[test]
fn ssim_symmetric_and_in_range() {
    let cfg = LossConfig::default();
    for seed in 0..10u64 {
        let a = rand_image(16, 16, 3, seed + 41);
        let b = rand_image(16, 16, 3, seed + 3041);
        let ab = ssim(&a, &b, &cfg).unwrap();
        let ba = ssim(&b, &a, &cfg).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab), "ssim {ab} out of range");
    }
}

/// The objective must equal alpha * L1 + (1 - alpha) * (1 - SSIM) with both
/// terms computed by independent paths.
#[test]
fn combined_loss_matches_plugin_formula() {
    let cfg = LossConfig::default();
    for seed in 0..8u64 {
        let a = rand_image(16, 16, 3, seed + 600);
        let b = rand_image(16, 16, 3, seed + 4600);
        let l1: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum::<f64>()
            / a.data.len() as f64;
        let s = ssim_direct(&a, &b, &cfg);
        let expected = cfg.alpha * l1 + (1.0 - cfg.alpha) * (1.0 - s);

        let tape = Tape::<f64>::no_grad();
        let ta = Tensor::from_vec(&[1, 3, 16, 16], img_to_chw(&a)).unwrap();
        let tb = Tensor::from_vec(&[1, 3, 16, 16], img_to_chw(&b)).unwrap();
        let loss = combined_loss(&tape, &ta, &tb, &cfg).unwrap().item().unwrap();
        assert!(
            (loss - expected).abs() < 1e-6,
            "seed {seed}: loss {loss} vs plug-in {expected}"
        );
        assert!(loss >= 0.0);
    }
}

#[test]
fn combined_loss_zero_at_equality_and_l1_at_alpha_one() {
    let tape = Tape::<f64>::no_grad();
    let a = rand_image(16, 16, 3, 7);
    let ta = Tensor::from_vec(&[1, 3, 16, 16], img_to_chw(&a)).unwrap();
    let cfg = LossConfig::default();
    let zero = combined_loss(&tape, &ta, &ta, &cfg).unwrap().item().unwrap();
    assert!(zero.abs() < 1e-12, "self loss {zero}");

    let b = rand_image(16, 16, 3, 4007);
    let tb = Tensor::from_vec(&[1, 3, 16, 16], img_to_chw(&b)).unwrap();
    let l1_cfg = LossConfig {
        alpha: 1.0,
        ..Default::default()
    };
    let loss = combined_loss(&tape, &ta, &tb, &l1_cfg)
        .unwrap()
        .item()
        .unwrap();
    let l1: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / a.data.len() as f64;
    assert!((loss - l1).abs() < 1e-9, "alpha=1 loss {loss} vs L1 {l1}");
}
