//! Training loop and the inference bag of tricks: patch tiling with
//! overlap blending, rotation test-time augmentation, and multi-inference
//! averaging over random frame subsets.

mod infer;
mod tile;
mod train;

pub use infer::{
    multi_inference, rotation_tta, InferenceConfig, MultiInferenceResult, PatchRestorer,
    RestorerEngine,
};
pub use tile::{stitch_patches, tile_patches, PatchGrid};
pub use train::{
    adam_update, cosine_lr, train_phase, AdamConfig, AdamState, LossPoint, TrainConfig,
    TrainOutcome, TrainSample,
};

use crate::error::Result;
use crate::imgbuf::Image;
use crate::metrics::psnr;
use crate::turbsim::FrameSequence;

/// Pixel-wise mean of all frames: the no-model temporal-average baseline.
pub fn mean_frame(seq: &FrameSequence) -> Image {
    let first = &seq.frames[0];
    let mut acc = Image::new(first.h, first.w, first.c);
    for f in &seq.frames {
        for (a, &v) in acc.data.iter_mut().zip(&f.data) {
            *a += v;
        }
    }
    let n = seq.frames.len() as f32;
    for a in &mut acc.data {
        *a /= n;
    }
    acc
}

/// PSNR of the best single frame against the ground truth.
pub fn best_frame_psnr(seq: &FrameSequence) -> Result<f64> {
    let gt = seq
        .ground_truth
        .as_ref()
        .ok_or_else(|| crate::error::Error::input("sequence has no ground truth"))?;
    let mut best = f64::NEG_INFINITY;
    for f in &seq.frames {
        best = best.max(psnr(f, gt)?);
    }
    Ok(best)
}
