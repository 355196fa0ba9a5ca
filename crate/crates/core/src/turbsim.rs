//! Tilt-and-blur turbulence simulator.
//!
//! Each degraded frame is the clean image warped by a spatially correlated
//! random tilt field, blurred by an aperture-dependent Gaussian PSF, plus
//! optional per-frame sensor noise. Tilt strength derives from the Fried
//! coherence length of the configured optical path; the correlation knob
//! maps affinely onto the low-pass radius of the tilt field.

use std::fs;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgbuf::{gaussian_blur, gaussian_blur_field, Image};

/// Optical-path parameters of one simulated sequence.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TurbulenceParams {
    /// Aperture diameter D, meters.
    pub aperture_m: f64,
    /// Path length L, meters.
    pub path_length_m: f64,
    /// Refractive-index structure constant Cn^2, m^(-2/3).
    pub cn2: f64,
    /// Spatial-correlation knob in [-1, 0]; -1 is the least correlated.
    pub corr: f64,
    /// Wavelength, meters.
    pub wavelength_m: f64,
}

pub const DEFAULT_WAVELENGTH_M: f64 = 550e-9;

impl TurbulenceParams {
    pub fn validate(&self) -> Result<()> {
        if self.aperture_m <= 0.0 || self.path_length_m <= 0.0 || self.cn2 <= 0.0 {
            return Err(Error::config(format!(
                "turbulence params must be positive: D={}, L={}, Cn2={}",
                self.aperture_m, self.path_length_m, self.cn2
            )));
        }
        if !(-1.0..=0.0).contains(&self.corr) {
            return Err(Error::config(format!(
                "corr must be in [-1, 0], got {}",
                self.corr
            )));
        }
        if self.wavelength_m <= 0.0 {
            return Err(Error::config("wavelength must be positive"));
        }
        Ok(())
    }
}

/// Closed intervals for each sampled parameter.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamRanges {
    pub aperture_m: (f64, f64),
    pub path_length_m: (f64, f64),
    pub cn2: (f64, f64),
    pub corr: (f64, f64),
    pub wavelength_m: f64,
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            aperture_m: (0.06143, 0.091254),
            path_length_m: (200.0, 400.0),
            cn2: (5.7386e-14, 9.7386e-14),
            corr: (-1.0, 0.0),
            wavelength_m: DEFAULT_WAVELENGTH_M,
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64), name: &str) -> Result<f64> {
    if lo > hi {
        return Err(Error::config(format!(
            "inverted interval for {name}: [{lo}, {hi}]"
        )));
    }
    if lo == hi {
        return Ok(lo);
    }
    Ok(rng.random_range(lo..hi))
}

/// Uniform independent draws per field; deterministic per seed.
pub fn sample_params(ranges: &ParamRanges, seed: u64) -> Result<TurbulenceParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = TurbulenceParams {
        aperture_m: draw(&mut rng, ranges.aperture_m, "aperture_m")?,
        path_length_m: draw(&mut rng, ranges.path_length_m, "path_length_m")?,
        cn2: draw(&mut rng, ranges.cn2, "cn2")?,
        corr: draw(&mut rng, ranges.corr, "corr")?,
        wavelength_m: ranges.wavelength_m,
    };
    p.validate()?;
    Ok(p)
}

/// Fried coherence length r0 = (0.423 k^2 Cn2 L)^(-3/5), k = 2 pi / lambda.
pub fn fried_parameter(p: &TurbulenceParams) -> f64 {
    let k = 2.0 * std::f64::consts::PI / p.wavelength_m;
    (0.423 * k * k * p.cn2 * p.path_length_m).powf(-3.0 / 5.0)
}

/// Knobs that tie the optical model to the pixel raster.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Object-plane pixel pitch at the reference distance, meters.
    pub pixel_pitch_ref_m: f64,
    /// Distance at which the reference pitch applies; pitch scales
    /// linearly with path length from here.
    pub pitch_ref_distance_m: f64,
    /// Dimensionless gain from tilt angle to displacement; tuned so the
    /// default parameter ranges land around 1.5-2.5 px of tilt.
    pub tilt_gain: f64,
    /// Dimensionless gain from the diffraction spot to blur sigma.
    pub blur_gain: f64,
    /// Blur sigma clamp, pixels.
    pub blur_clip_px: (f64, f64),
    /// Correlation-kernel sigma at corr = -1 and corr = 0, pixels.
    pub sigma_corr_px: (f64, f64),
    /// Per-frame Gaussian noise sigma range; (0, 0) disables noise.
    pub noise_sigma: (f64, f64),
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            pixel_pitch_ref_m: 4e-6,
            pitch_ref_distance_m: 200.0,
            tilt_gain: 1.3e-3,
            blur_gain: 5e-3,
            blur_clip_px: (0.5, 4.0),
            sigma_corr_px: (2.0, 12.0),
            noise_sigma: (0.0, 0.0),
        }
    }
}

impl SimConfig {
    /// Object-plane pixel pitch at path length L.
    pub fn pixel_pitch_m(&self, path_length_m: f64) -> f64 {
        self.pixel_pitch_ref_m * path_length_m / self.pitch_ref_distance_m
    }

    /// Tilt displacement standard deviation in pixels.
    pub fn tilt_sigma_px(&self, p: &TurbulenceParams) -> f64 {
        let r0 = fried_parameter(p);
        let tilt_angle =
            self.tilt_gain * (p.aperture_m / r0).powf(5.0 / 6.0) * (p.wavelength_m / p.aperture_m);
        tilt_angle * p.path_length_m / self.pixel_pitch_m(p.path_length_m)
    }

    /// Shared diffraction blur sigma in pixels, clamped.
    pub fn blur_sigma_px(&self, p: &TurbulenceParams) -> f64 {
        let spot = p.wavelength_m * p.path_length_m / p.aperture_m;
        let raw = self.blur_gain * spot / self.pixel_pitch_m(p.path_length_m);
        raw.clamp(self.blur_clip_px.0, self.blur_clip_px.1)
    }

    /// Low-pass sigma for the tilt field: corr = -1 maps to the minimum,
    /// corr = 0 to the maximum.
    pub fn corr_sigma_px(&self, corr: f64) -> f64 {
        let (lo, hi) = self.sigma_corr_px;
        lo + (corr + 1.0) * (hi - lo)
    }
}

/// Per-pixel backward-warp displacements in pixels.
#[derive(Debug, Clone)]
pub struct DisplacementField {
    pub h: usize,
    pub w: usize,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
}

impl DisplacementField {
    pub fn zero(h: usize, w: usize) -> Self {
        DisplacementField {
            h,
            w,
            dx: vec![0.0; h * w],
            dy: vec![0.0; h * w],
        }
    }

    pub fn mean_magnitude(&self) -> f64 {
        let mut acc = 0.0f64;
        for (&x, &y) in self.dx.iter().zip(&self.dy) {
            acc += ((x * x + y * y) as f64).sqrt();
        }
        acc / (self.h * self.w) as f64
    }
}

fn rms(v: &[f32]) -> f64 {
    (v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Zero-mean Gaussian tilt field, low-pass filtered by the correlation
/// kernel and rescaled back to the target standard deviation.
pub fn generate_displacement_field(
    p: &TurbulenceParams,
    shape: (usize, usize),
    seed: u64,
    cfg: &SimConfig,
) -> Result<DisplacementField> {
    p.validate()?;
    let (h, w) = shape;
    if h < 8 || w < 8 {
        return Err(Error::dimension(format!(
            "displacement field needs H, W >= 8, got {h}x{w}"
        )));
    }
    let sigma_tilt = cfg.tilt_sigma_px(p);
    if sigma_tilt < 1e-12 {
        return Ok(DisplacementField::zero(h, w));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, sigma_tilt).expect("sigma_tilt is finite and positive");
    let mut field = DisplacementField::zero(h, w);
    for v in &mut field.dx {
        *v = normal.sample(&mut rng) as f32;
    }
    for v in &mut field.dy {
        *v = normal.sample(&mut rng) as f32;
    }
    let sigma_corr = cfg.corr_sigma_px(p.corr) as f32;
    gaussian_blur_field(&mut field.dx, h, w, sigma_corr);
    gaussian_blur_field(&mut field.dy, h, w, sigma_corr);
    // low-pass shrinks the variance; restore it about zero
    for part in [&mut field.dx, &mut field.dy] {
        let r = rms(part);
        if r > 1e-12 {
            let k = (sigma_tilt / r) as f32;
            for v in part.iter_mut() {
                *v *= k;
            }
        }
    }
    Ok(field)
}

/// Backward warp with bilinear sampling; borders clamp to edge. Output
/// pixel (y, x) samples the source at (y + dy, x + dx).
pub fn warp(image: &Image, field: &DisplacementField) -> Result<Image> {
    if image.h != field.h || image.w != field.w {
        return Err(Error::dimension(format!(
            "warp: image {}x{} vs field {}x{}",
            image.h, image.w, field.h, field.w
        )));
    }
    let mut out = Image::new(image.h, image.w, image.c);
    for y in 0..image.h {
        for x in 0..image.w {
            let i = y * image.w + x;
            let (dx, dy) = (field.dx[i], field.dy[i]);
            if dx == 0.0 && dy == 0.0 {
                for ch in 0..image.c {
                    out.set(y, x, ch, image.get(y, x, ch));
                }
            } else {
                let sy = y as f32 + dy;
                let sx = x as f32 + dx;
                for ch in 0..image.c {
                    out.set(y, x, ch, image.sample_bilinear(sy, sx, ch));
                }
            }
        }
    }
    Ok(out)
}

/// N degraded frames of one latent scene plus the ground truth it came from.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub frames: Vec<Image>,
    pub ground_truth: Option<Image>,
    pub params: TurbulenceParams,
    pub seed: u64,
}

/// Warp + shared blur + optional per-frame noise for each frame.
/// Deterministic: (clean, params, seed) fixes every output bit.
pub fn simulate_sequence(
    clean: &Image,
    p: &TurbulenceParams,
    n_frames: usize,
    seed: u64,
    cfg: &SimConfig,
) -> Result<FrameSequence> {
    p.validate()?;
    if n_frames == 0 {
        return Err(Error::input("simulate_sequence: n_frames must be >= 1"));
    }
    let blur_sigma = cfg.blur_sigma_px(p) as f32;
    let mut frames = Vec::with_capacity(n_frames);
    for fi in 0..n_frames {
        let frame_seed = seed.wrapping_add(1 + fi as u64);
        let field = generate_displacement_field(p, (clean.h, clean.w), frame_seed, cfg)?;
        let mut frame = warp(clean, &field)?;
        frame = gaussian_blur(&frame, blur_sigma);
        let (nlo, nhi) = cfg.noise_sigma;
        if nhi > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed ^ 0x9e37_79b9_7f4a_7c15);
            let sigma = if nhi > nlo {
                rng.random_range(nlo..nhi)
            } else {
                nhi
            };
            if sigma > 0.0 {
                let normal = Normal::new(0.0f64, sigma).expect("noise sigma positive");
                for v in &mut frame.data {
                    *v += normal.sample(&mut rng) as f32;
                }
            }
        }
        frame.clip();
        frames.push(frame);
    }
    Ok(FrameSequence {
        frames,
        ground_truth: Some(clean.clone()),
        params: *p,
        seed,
    })
}

/// Sidecar written next to each sequence's frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceMeta {
    pub seed: u64,
    pub n_frames: usize,
    pub params: TurbulenceParams,
    pub sim: SimConfig,
}

/// Writes `frame_%03d.png`, `gt.png` (when present) and `params.json`.
pub fn save_sequence(seq: &FrameSequence, cfg: &SimConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, frame) in seq.frames.iter().enumerate() {
        frame.save_png(dir.join(format!("frame_{i:03}.png")))?;
    }
    if let Some(gt) = &seq.ground_truth {
        gt.save_png(dir.join("gt.png"))?;
    }
    let meta = SequenceMeta {
        seed: seq.seed,
        n_frames: seq.frames.len(),
        params: seq.params,
        sim: *cfg,
    };
    fs::write(dir.join("params.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Loads a sequence directory produced by [`save_sequence`].
pub fn load_sequence(dir: impl AsRef<Path>) -> Result<FrameSequence> {
    let dir = dir.as_ref();
    let meta: SequenceMeta = serde_json::from_slice(&fs::read(dir.join("params.json"))?)?;
    let mut frames = Vec::with_capacity(meta.n_frames);
    for i in 0..meta.n_frames {
        frames.push(Image::load_png(dir.join(format!("frame_{i:03}.png")))?);
    }
    if frames.is_empty() {
        return Err(Error::input(format!(
            "sequence at {} has no frames",
            dir.display()
        )));
    }
    let gt_path = dir.join("gt.png");
    let ground_truth = if gt_path.exists() {
        Some(Image::load_png(gt_path)?)
    } else {
        None
    };
    Ok(FrameSequence {
        frames,
        ground_truth,
        params: meta.params,
        seed: meta.seed,
    })
}
