//! Inference-time tricks: random 90-degree-multiple rotation of each patch
//! and repeated inference over fresh frame subsets, averaged pixel-wise.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgbuf::Image;
use crate::model::{sample_indices, stack_selected, Restorer};
use crate::tensor::Tape;
use crate::turbsim::FrameSequence;

use super::tile::{stitch_patches, tile_patches};

/// Restores one stack of aligned frame patches into a single patch.
pub trait PatchRestorer {
    /// Frames arrive in stacking order; the output patch matches their size.
    fn restore_patch(&self, frames: &[Image]) -> Result<Image>;
    /// How many frames one inference consumes.
    fn frames_in(&self) -> usize;
}

/// The trained model behind the [`PatchRestorer`] interface. Output is
/// clipped to [0, 1] here, at the edge of the numeric pipeline.
pub struct RestorerEngine {
    pub model: Restorer<f32>,
}

impl PatchRestorer for RestorerEngine {
    fn restore_patch(&self, frames: &[Image]) -> Result<Image> {
        let tape = Tape::no_grad();
        let indices: Vec<usize> = (0..frames.len()).collect();
        let stacked = stack_selected::<f32>(frames, &indices)?;
        let out = self.model.forward(&tape, &stacked)?;
        let mut img = Image::from_tensor(&out.fused)?;
        img.clip();
        Ok(img)
    }

    fn frames_in(&self) -> usize {
        self.model.cfg.frames_in
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Independent inference repeats, averaged pixel-wise.
    pub repeats: usize,
    /// Rotate each patch by a random multiple of 90 degrees, restore, and
    /// rotate back.
    pub rotation_tta: bool,
    /// Average all four rotations instead of drawing one at random.
    pub four_way_rotation: bool,
    /// Frames drawn per repeat.
    pub frames_in: usize,
    /// Tiling window and stride.
    pub window: usize,
    pub stride: usize,
    pub rng_seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            repeats: 20,
            rotation_tta: true,
            four_way_rotation: false,
            frames_in: 20,
            window: 128,
            stride: 100,
            rng_seed: 0,
        }
    }
}

/// Rotate the patch stack by `quarter_turns`, restore, rotate the output
/// back. Patches must be square for odd turn counts.
pub fn rotation_tta<R: PatchRestorer + ?Sized>(
    frames: &[Image],
    restorer: &R,
    quarter_turns: usize,
) -> Result<Image> {
    let k = quarter_turns % 4;
    if k == 0 {
        return restorer.restore_patch(frames);
    }
    if k % 2 == 1 && !frames.is_empty() && frames[0].h != frames[0].w {
        return Err(Error::dimension(format!(
            "rotation by {} quarter turns needs square patches, got {}x{}",
            k, frames[0].h, frames[0].w
        )));
    }
    let rotated: Vec<Image> = frames.iter().map(|f| f.rot90(k)).collect();
    let restored = restorer.restore_patch(&rotated)?;
    Ok(restored.rot90(4 - k))
}

fn average_rotations<R: PatchRestorer + ?Sized>(frames: &[Image], restorer: &R) -> Result<Image> {
    let mut acc: Option<Image> = None;
    for k in 0..4 {
        let out = rotation_tta(frames, restorer, k)?;
        match &mut acc {
            None => acc = Some(out),
            Some(a) => {
                for (av, &v) in a.data.iter_mut().zip(&out.data) {
                    *av += v;
                }
            }
        }
    }
    let mut a = acc.expect("four rotations produced output");
    for v in &mut a.data {
        *v *= 0.25;
    }
    Ok(a)
}

pub struct MultiInferenceResult {
    /// Pixel-wise mean of all repeats.
    pub final_image: Image,
    /// One stitched output per repeat, in repeat order.
    pub repeat_outputs: Vec<Image>,
}

/// Repeat (subset -> tile -> rotate -> restore -> stitch) and average.
/// Deterministic per seed: repeat k draws its subset with seed + k and its
/// rotations from a per-repeat stream consumed in patch order.
pub fn multi_inference<R: PatchRestorer + ?Sized>(
    seq: &FrameSequence,
    restorer: &R,
    cfg: &InferenceConfig,
) -> Result<MultiInferenceResult> {
    if cfg.repeats == 0 {
        return Err(Error::config("multi_inference: repeats must be >= 1"));
    }
    if seq.frames.len() < cfg.frames_in {
        return Err(Error::input(format!(
            "sequence has {} frames but inference needs {}",
            seq.frames.len(),
            cfg.frames_in
        )));
    }
    let (h0, w0) = (seq.frames[0].h, seq.frames[0].w);
    // small inputs are reflect-padded up to the window, restored, cropped back
    let needs_pad = h0 < cfg.window || w0 < cfg.window;
    let (frames, crop_back): (Vec<Image>, Option<(usize, usize)>) = if needs_pad {
        let mut padded = Vec::with_capacity(seq.frames.len());
        let mut offset = (0, 0);
        for f in &seq.frames {
            let (p, off) = f.reflect_pad_to(cfg.window, cfg.window);
            offset = off;
            padded.push(p);
        }
        (padded, Some(offset))
    } else {
        (seq.frames.clone(), None)
    };
    let (h, w) = (frames[0].h, frames[0].w);
    let grid = tile_patches(h, w, cfg.window, cfg.stride)?;

    let mut repeat_outputs = Vec::with_capacity(cfg.repeats);
    let mut acc: Option<Image> = None;
    for rep in 0..cfg.repeats {
        let subset_seed = cfg.rng_seed.wrapping_add(1 + rep as u64);
        let indices = sample_indices(frames.len(), cfg.frames_in, subset_seed);
        let selected: Vec<&Image> = indices.iter().map(|&i| &frames[i]).collect();
        let mut rot_rng = ChaCha8Rng::seed_from_u64(subset_seed ^ 0x5bd1_e995_7b93_52e3);
        let mut patches = Vec::with_capacity(grid.origins.len());
        for &(oy, ox) in &grid.origins {
            let cropped: Vec<Image> = selected
                .iter()
                .map(|f| f.crop(oy, ox, cfg.window, cfg.window))
                .collect::<Result<_>>()?;
            let restored = if cfg.rotation_tta {
                if cfg.four_way_rotation {
                    average_rotations(&cropped, restorer)?
                } else {
                    let k = rot_rng.random_range(0..4usize);
                    rotation_tta(&cropped, restorer, k)?
                }
            } else {
                restorer.restore_patch(&cropped)?
            };
            patches.push(restored);
        }
        let mut stitched = stitch_patches(&grid, &patches)?;
        if let Some((oy, ox)) = crop_back {
            stitched = stitched.crop(oy, ox, h0, w0)?;
        }
        match &mut acc {
            None => acc = Some(stitched.clone()),
            Some(a) => {
                for (av, &v) in a.data.iter_mut().zip(&stitched.data) {
                    *av += v;
                }
            }
        }
        repeat_outputs.push(stitched);
    }
    let mut final_image = acc.expect("at least one repeat");
    let n = cfg.repeats as f32;
    for v in &mut final_image.data {
        *v /= n;
    }
    Ok(MultiInferenceResult {
        final_image,
        repeat_outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgbuf::gaussian_blur;
    use crate::turbsim::TurbulenceParams;

    /// Averages its input frames; rotation-equivariant and deterministic.
    struct MeanRestorer {
        frames_in: usize,
    }

    impl PatchRestorer for MeanRestorer {
        fn restore_patch(&self, frames: &[Image]) -> Result<Image> {
            let mut acc = Image::new(frames[0].h, frames[0].w, frames[0].c);
            for f in frames {
                for (a, &v) in acc.data.iter_mut().zip(&f.data) {
                    *a += v;
                }
            }
            for a in &mut acc.data {
                *a /= frames.len() as f32;
            }
            Ok(acc)
        }
        fn frames_in(&self) -> usize {
            self.frames_in
        }
    }

    /// Identity on the first frame.
    struct IdentityRestorer;

    impl PatchRestorer for IdentityRestorer {
        fn restore_patch(&self, frames: &[Image]) -> Result<Image> {
            Ok(frames[0].clone())
        }
        fn frames_in(&self) -> usize {
            1
        }
    }

    /// Isotropic blur: equivariant under quarter rotations.
    struct BlurRestorer;

    impl PatchRestorer for BlurRestorer {
        fn restore_patch(&self, frames: &[Image]) -> Result<Image> {
            Ok(gaussian_blur(&frames[0], 1.2))
        }
        fn frames_in(&self) -> usize {
            1
        }
    }

    fn textured(h: usize, w: usize) -> Image {
        let mut img = Image::new(h, w, 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    img.set(
                        y,
                        x,
                        ch,
                        0.5 + 0.4 * ((y as f32 * 0.7 + x as f32 * 1.3 + ch as f32).sin()),
                    );
                }
            }
        }
        img
    }

    fn toy_sequence(n: usize, h: usize, w: usize) -> FrameSequence {
        let frames: Vec<Image> = (0..n)
            .map(|i| {
                let mut f = textured(h, w);
                for v in &mut f.data {
                    *v = (*v + i as f32 * 0.01).clamp(0.0, 1.0);
                }
                f
            })
            .collect();
        FrameSequence {
            frames,
            ground_truth: Some(textured(h, w)),
            params: TurbulenceParams {
                aperture_m: 0.08,
                path_length_m: 300.0,
                cn2: 7e-14,
                corr: -0.5,
                wavelength_m: 550e-9,
            },
            seed: 0,
        }
    }

    #[test]
    fn zero_rotation_equals_plain_inference() {
        let img = textured(16, 16);
        let out = rotation_tta(&[img.clone()], &IdentityRestorer, 0).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn rotate_unrotate_identity_model_is_bit_exact() {
        let img = textured(16, 16);
        for k in 0..4 {
            let out = rotation_tta(&[img.clone()], &IdentityRestorer, k).unwrap();
            assert_eq!(out, img, "quarter turns {k}");
        }
    }

    #[test]
    fn non_square_patch_with_odd_rotation_errors() {
        let img = textured(8, 16);
        assert!(rotation_tta(&[img.clone()], &IdentityRestorer, 1).is_err());
        assert!(rotation_tta(&[img], &IdentityRestorer, 2).is_ok());
    }

    #[test]
    fn tta_matches_plain_for_equivariant_model() {
        let img = textured(24, 24);
        let plain = BlurRestorer.restore_patch(&[img.clone()]).unwrap();
        for k in 0..4 {
            let tta = rotation_tta(&[img.clone()], &BlurRestorer, k).unwrap();
            for (a, b) in tta.data.iter().zip(&plain.data) {
                assert!((a - b).abs() < 1e-5, "turns {k}");
            }
        }
    }

    #[test]
    fn single_repeat_equals_single_inference() {
        let seq = toy_sequence(6, 24, 24);
        let cfg = InferenceConfig {
            repeats: 1,
            rotation_tta: false,
            frames_in: 3,
            window: 16,
            stride: 12,
            rng_seed: 5,
            ..Default::default()
        };
        let result = multi_inference(&seq, &MeanRestorer { frames_in: 3 }, &cfg).unwrap();
        assert_eq!(result.repeat_outputs.len(), 1);
        assert_eq!(result.final_image, result.repeat_outputs[0]);
    }

    #[test]
    fn identical_subsets_average_to_single_output() {
        // all frames identical: every repeat sees the same stack no matter
        // how the subset is drawn, so the mean of repeats is bit-exact
        let base = textured(24, 24);
        let seq = FrameSequence {
            frames: vec![base.clone(), base.clone(), base.clone()],
            ground_truth: Some(base),
            params: toy_sequence(1, 24, 24).params,
            seed: 0,
        };
        let cfg = InferenceConfig {
            repeats: 2,
            rotation_tta: false,
            frames_in: 3,
            window: 16,
            stride: 12,
            rng_seed: 9,
            ..Default::default()
        };
        let result = multi_inference(&seq, &MeanRestorer { frames_in: 3 }, &cfg).unwrap();
        for rep in &result.repeat_outputs {
            assert_eq!(rep, &result.repeat_outputs[0]);
        }
        assert_eq!(result.final_image, result.repeat_outputs[0]);
    }

    #[test]
    fn too_few_frames_is_input_error() {
        let seq = toy_sequence(2, 24, 24);
        let cfg = InferenceConfig {
            repeats: 1,
            frames_in: 5,
            window: 16,
            stride: 12,
            ..Default::default()
        };
        assert!(matches!(
            multi_inference(&seq, &MeanRestorer { frames_in: 5 }, &cfg),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn small_images_are_padded_and_cropped_back() {
        let seq = toy_sequence(3, 12, 10);
        let cfg = InferenceConfig {
            repeats: 2,
            rotation_tta: true,
            frames_in: 2,
            window: 16,
            stride: 12,
            rng_seed: 3,
            ..Default::default()
        };
        let result = multi_inference(&seq, &MeanRestorer { frames_in: 2 }, &cfg).unwrap();
        assert_eq!(result.final_image.h, 12);
        assert_eq!(result.final_image.w, 10);
    }

    #[test]
    fn deterministic_across_runs() {
        let seq = toy_sequence(8, 24, 24);
        let cfg = InferenceConfig {
            repeats: 3,
            rotation_tta: true,
            frames_in: 4,
            window: 16,
            stride: 12,
            rng_seed: 77,
            ..Default::default()
        };
        let a = multi_inference(&seq, &MeanRestorer { frames_in: 4 }, &cfg).unwrap();
        let b = multi_inference(&seq, &MeanRestorer { frames_in: 4 }, &cfg).unwrap();
        assert_eq!(a.final_image, b.final_image);
    }
}
