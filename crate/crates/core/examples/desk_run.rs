//! Desk-scale end-to-end dry run: synthesize a toy dataset, train the
//! small configuration, and compare restored quality against the
//! best-single-frame and mean-frame baselines on held-out sequences.
//!
//! cargo run --example desk_run -p turbmit-core

use std::time::Instant;

use turbmit_core::datagen::{build_dataset, DatasetConfig};
use turbmit_core::metrics::psnr;
use turbmit_core::model::{Restorer, RestorerConfig};
use turbmit_core::pipeline::{
    best_frame_psnr, mean_frame, multi_inference, train_phase, AdamState, InferenceConfig,
    RestorerEngine, TrainConfig, TrainSample,
};
use turbmit_core::turbsim::load_sequence;

fn main() {
    let t0 = Instant::now();
    let tmp = std::env::temp_dir().join("turbmit_desk_run");
    let _ = std::fs::remove_dir_all(&tmp);

    // synthetic scene backgrounds
    let scene_dir = tmp.join("scenes");
    std::fs::create_dir_all(&scene_dir).unwrap();
    for s in 0..3u32 {
        let mut img = turbmit_core::imgbuf::Image::new(96, 96, 3);
        for y in 0..96 {
            for x in 0..96 {
                for c in 0..3 {
                    let v = 0.3
                        + 0.25 * ((x as f32 * 0.11 + s as f32).sin())
                        + 0.25 * ((y as f32 * 0.07 + c as f32).cos());
                    img.set(y, x, c, v.clamp(0.0, 1.0));
                }
            }
        }
        img.save_png(scene_dir.join(format!("scene_{s}.png"))).unwrap();
    }

    // training set
    let data_cfg = DatasetConfig {
        total: 30,
        canvas: (64, 64),
        n_frames: 10,
        ..Default::default()
    };
    let manifest = build_dataset(&data_cfg, Some(&scene_dir), &tmp.join("train"), 42).unwrap();
    println!("synth train: {:?} ({} entries)", t0.elapsed(), manifest.entries.len());

    // held-out set
    let held_cfg = DatasetConfig {
        total: 8,
        ..data_cfg.clone()
    };
    let held = build_dataset(&held_cfg, Some(&scene_dir), &tmp.join("held"), 4242).unwrap();

    let samples: Vec<TrainSample> = manifest
        .entries
        .iter()
        .map(|e| {
            let seq = load_sequence(tmp.join("train").join(&e.dir)).unwrap();
            TrainSample {
                gt: seq.ground_truth.clone().unwrap(),
                frames: seq.frames,
            }
        })
        .collect();

    let model_cfg = RestorerConfig::desk();
    let mut model = Restorer::<f32>::new(model_cfg, 7).unwrap();
    println!("model params: {}", model.parameter_count());

    let train_cfg = TrainConfig {
        lr_max: std::env::var("LR")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(1e-3),
        lr_min: 1e-6,
        batch: 4,
        ..Default::default()
    };
    let epochs: usize = std::env::var("EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(250);
    let steps_per_epoch = samples.len().div_ceil(train_cfg.batch);
    let total = (epochs * steps_per_epoch) as u64;
    let t1 = Instant::now();
    let mut adam = AdamState::new();
    let out = train_phase(&mut model, &mut adam, &samples, &train_cfg, epochs, 11, 0, total)
        .unwrap();
    let train_time = t1.elapsed();
    println!(
        "train: {} steps in {:?} ({:.1} ms/step), loss {:.4} -> {:.4}",
        out.final_step,
        train_time,
        train_time.as_millis() as f64 / out.final_step as f64,
        out.loss_curve.first().unwrap().loss,
        out.loss_curve.last().unwrap().loss
    );
    let window = 25usize.min(out.loss_curve.len());
    for chunk_start in (0..out.loss_curve.len()).step_by(window) {
        let chunk = &out.loss_curve[chunk_start..(chunk_start + window).min(out.loss_curve.len())];
        let mean: f64 = chunk.iter().map(|p| p.loss).sum::<f64>() / chunk.len() as f64;
        println!(
            "  steps {:4}..{:4}: mean loss {:.4} (lr {:.2e})",
            chunk[0].step,
            chunk.last().unwrap().step,
            mean,
            chunk[0].lr
        );
    }

    // evaluation
    let engine = RestorerEngine { model };
    let infer_cfg = InferenceConfig {
        repeats: 8,
        rotation_tta: true,
        four_way_rotation: false,
        frames_in: 4,
        window: 32,
        stride: 24,
        rng_seed: 99,
    };
    let t2 = Instant::now();
    let mut restored_acc = 0.0;
    let mut best_acc = 0.0;
    let mut mean_acc = 0.0;
    for e in &held.entries {
        let seq = load_sequence(tmp.join("held").join(&e.dir)).unwrap();
        let gt = seq.ground_truth.clone().unwrap();
        let result = multi_inference(&seq, &engine, &infer_cfg).unwrap();
        restored_acc += psnr(&result.final_image, &gt).unwrap();
        best_acc += best_frame_psnr(&seq).unwrap();
        mean_acc += psnr(&mean_frame(&seq), &gt).unwrap();
    }
    let n = held.entries.len() as f64;
    println!(
        "eval in {:?}: restored {:.2} dB | best frame {:.2} dB | mean frame {:.2} dB",
        t2.elapsed(),
        restored_acc / n,
        best_acc / n,
        mean_acc / n
    );
    println!("total: {:?}", t0.elapsed());
}
