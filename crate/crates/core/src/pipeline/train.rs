//! Optimizer, schedule and the training loop.
//!
//! Per step: sample sequences, draw a frame subset, random-crop to the
//! model patch, optionally rotate input and target jointly by a quarter
//! turn, run the model, apply the L1+SSIM objective, backpropagate and take
//! one decoupled-weight-decay Adam step under a cosine learning rate.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgbuf::Image;
use crate::metrics::{combined_loss, LossConfig};
use crate::model::{sample_indices, stack_selected, Restorer};
use crate::tensor::{Scalar, Tape};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: applied directly to parameters, not to moments.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch: usize,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub adam: AdamConfig,
    pub augment_rotation: bool,
    pub augment_random_crop: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-4,
            lr_min: 1e-10,
            batch: 4,
            epochs_pretrain: 60,
            epochs_finetune: 20,
            adam: AdamConfig::default(),
            augment_rotation: true,
            augment_random_crop: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_min >= self.lr_max && self.lr_max != 0.0 {
            return Err(Error::config(format!(
                "lr_min {} must be below lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be >= 1"));
        }
        self.loss.validate()
    }
}

/// Half-cosine decay from lr_max at step 0 to lr_min at total_steps.
pub fn cosine_lr(step: u64, total_steps: u64, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::contract("cosine_lr: total_steps must be >= 1"));
    }
    if step > total_steps {
        return Err(Error::contract(format!(
            "cosine_lr: step {step} past total {total_steps}"
        )));
    }
    let t = step as f64 / total_steps as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Bias-corrected Adam with decoupled weight decay on one parameter slab.
/// Moments are kept in f64 regardless of the parameter precision.
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::dimension(format!(
            "adam_update: param {} / grad {} / m {} / v {}",
            param.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    if step == 0 {
        return Err(Error::contract("adam_update: step is 1-based"));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        let p = param[i].as_f64();
        let update = lr * m_hat / (v_hat.sqrt() + cfg.eps) + lr * cfg.weight_decay * p;
        param[i] = T::from_f64(p - update);
    }
    Ok(())
}

/// First/second moment slabs, one pair per parameter in model order.
#[derive(Debug, Default)]
pub struct AdamState {
    pub step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure_shapes(&mut self, sizes: &[usize]) {
        if self.moments.len() != sizes.len() {
            self.moments = sizes
                .iter()
                .map(|&n| (vec![0.0; n], vec![0.0; n]))
                .collect();
        }
    }
}

/// One training example: the full degraded sequence and its target.
pub struct TrainSample {
    pub frames: Vec<Image>,
    pub gt: Image,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossPoint {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub loss_curve: Vec<LossPoint>,
    /// Global step counter after this phase (resume continues from here).
    pub final_step: u64,
}

fn derived_seed(seed: u64, step: u64, slot: u64) -> u64 {
    seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ slot.wrapping_add(1).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

/// Run one training phase over `epochs` passes of `samples`.
///
/// `start_step`/`total_steps` position the cosine schedule, so a resumed
/// phase continues exactly where the checkpoint left off. Returns the loss
/// curve (one point per optimizer step). Aborts with a divergence error if
/// the loss turns non-finite.
#[allow(clippy::too_many_arguments)]
pub fn train_phase(
    model: &mut Restorer<f32>,
    adam: &mut AdamState,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    epochs: usize,
    seed: u64,
    start_step: u64,
    total_steps: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::input("train_phase: no samples"));
    }
    let patch = model.cfg.patch;
    let frames_in = model.cfg.frames_in;
    for (i, s) in samples.iter().enumerate() {
        if s.frames.len() < frames_in {
            return Err(Error::input(format!(
                "sample {i} has {} frames, model needs {frames_in}",
                s.frames.len()
            )));
        }
        if s.gt.h < patch || s.gt.w < patch {
            return Err(Error::config(format!(
                "sample {i} is {}x{}, smaller than the {patch} patch",
                s.gt.h, s.gt.w
            )));
        }
    }

    let mut loss_curve = Vec::new();
    let mut step = start_step;
    let mut last_finite = f64::NAN;
    let steps_per_epoch = samples.len().div_ceil(cfg.batch);
    let planned = epochs as u64 * steps_per_epoch as u64;
    let horizon = total_steps.max(start_step + planned).max(1);

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut epoch_rng =
            ChaCha8Rng::seed_from_u64(derived_seed(seed, 0x45_50_4f_43 + epoch as u64, 0));
        order.shuffle(&mut epoch_rng);
        for chunk in order.chunks(cfg.batch) {
            let lr = cosine_lr(step.min(horizon), horizon, cfg)?;
            model.zero_grads();
            let mut batch_loss = 0.0f64;
            let inv_batch = 1.0 / chunk.len() as f32;
            for (slot, &si) in chunk.iter().enumerate() {
                let sample = &samples[si];
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derived_seed(seed, step, slot as u64));
                let subset =
                    sample_indices(sample.frames.len(), frames_in, rng.random::<u64>());
                let (y0, x0) = if cfg.augment_random_crop
                    && (sample.gt.h > patch || sample.gt.w > patch)
                {
                    (
                        rng.random_range(0..=sample.gt.h - patch),
                        rng.random_range(0..=sample.gt.w - patch),
                    )
                } else {
                    (0, 0)
                };
                let turns = if cfg.augment_rotation {
                    rng.random_range(0..4usize)
                } else {
                    0
                };
                let cropped: Vec<Image> = subset
                    .iter()
                    .map(|&fi| {
                        sample.frames[fi]
                            .crop(y0, x0, patch, patch)
                            .map(|c| c.rot90(turns))
                    })
                    .collect::<Result<_>>()?;
                let gt_patch = sample.gt.crop(y0, x0, patch, patch)?.rot90(turns);

                let tape = Tape::new();
                let indices: Vec<usize> = (0..cropped.len()).collect();
                let stacked = stack_selected::<f32>(&cropped, &indices)?;
                let out = model.forward(&tape, &stacked)?;
                let gt_tensor = gt_patch.to_tensor();
                let loss = combined_loss(&tape, &out.fused, &gt_tensor, &cfg.loss)?;
                let scaled = tape.scale(&loss, inv_batch)?;
                tape.backward(&scaled)?;
                batch_loss += loss.item()?.as_f64() * inv_batch as f64;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    step: step as usize,
                    lr,
                    last_loss: last_finite,
                });
            }
            last_finite = batch_loss;
            adam_step_model(model, adam, lr, &cfg.adam)?;
            step += 1;
            loss_curve.push(LossPoint {
                step,
                lr,
                loss: batch_loss,
            });
        }
    }
    Ok(TrainOutcome {
        loss_curve,
        final_step: step,
    })
}

/// Apply one Adam step to every model parameter from its accumulated
/// gradient; parameters with no gradient this step decay only.
fn adam_step_model(
    model: &mut Restorer<f32>,
    adam: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let mut params = model.params_mut();
    let sizes: Vec<usize> = params.iter().map(|(_, t)| t.numel()).collect();
    adam.ensure_shapes(&sizes);
    adam.step += 1;
    for (pi, (_, slot)) in params.iter_mut().enumerate() {
        let grad = slot
            .grad()
            .unwrap_or_else(|| vec![0.0f32; slot.numel()]);
        let mut data = slot.data().to_vec();
        let (m, v) = &mut adam.moments[pi];
        adam_update(&mut data, &grad, m, v, adam.step, lr, cfg)?;
        **slot = crate::tensor::Tensor::param(slot.shape(), data)?;
    }
    Ok(())
}
