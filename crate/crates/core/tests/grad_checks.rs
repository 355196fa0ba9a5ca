//! Finite-difference verification of every backward rule at 64-bit.
//!
//! Each op builds a scalar loss (a fixed random projection of its output);
//! the checker compares reverse-mode gradients against central differences
//! for every input coordinate across many seeds.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use turbmit_core::error::Result;
use turbmit_core::metrics::{combined_loss, LossConfig};
use turbmit_core::model::{residual_combine, Restorer, RestorerConfig};
use turbmit_core::tensor::{check_gradients, Tape, Tensor};

const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Loss = sum(out * r) for a fixed projection r; more sensitive than a
/// plain sum because it breaks symmetry between coordinates.
fn project(tape: &Tape<f64>, out: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let r = rand_tensor(out.shape(), seed ^ 0xffff, -1.0, 1.0);
    tape.sum(&tape.mul(out, &r)?)
}

fn assert_grad<F>(name: &str, inputs: Vec<Tensor<f64>>, seed: u64, f: F)
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let report = check_gradients(f, &inputs, 0, seed).unwrap();
    assert!(
        report.max_rel_err < TOL,
        "{name} seed {seed}: rel err {} over {} coords",
        report.max_rel_err,
        report.coords_checked
    );
}

#[test]
fn elementwise_binary_ops() {
    for seed in 0..SEEDS {
        let a = rand_tensor(&[2, 3], seed, -2.0, 2.0);
        let b = rand_tensor(&[2, 3], seed + 100, -2.0, 2.0);
        assert_grad("add", vec![a.clone(), b.clone()], seed, |t, ins| {
            project(t, &t.add(&ins[0], &ins[1])?, seed)
        });
        assert_grad("sub", vec![a.clone(), b.clone()], seed, |t, ins| {
            project(t, &t.sub(&ins[0], &ins[1])?, seed)
        });
        assert_grad("mul", vec![a.clone(), b.clone()], seed, |t, ins| {
            project(t, &t.mul(&ins[0], &ins[1])?, seed)
        });
        // denominator bounded away from zero
        let d = rand_tensor(&[2, 3], seed + 200, 0.5, 2.0);
        assert_grad("div", vec![a, d], seed, |t, ins| {
            project(t, &t.div(&ins[0], &ins[1])?, seed)
        });
    }
}

#[test]
fn elementwise_unary_ops() {
    for seed in 0..SEEDS {
        let x = rand_tensor(&[7], seed, -2.0, 2.0);
        assert_grad("scale", vec![x.clone()], seed, |t, ins| {
            project(t, &t.scale(&ins[0], 1.7)?, seed)
        });
        assert_grad("add_scalar", vec![x.clone()], seed, |t, ins| {
            project(t, &t.add_scalar(&ins[0], -0.3)?, seed)
        });
        assert_grad("sigmoid", vec![x.clone()], seed, |t, ins| {
            project(t, &t.sigmoid(&ins[0])?, seed)
        });
        assert_grad("gelu", vec![x], seed, |t, ins| {
            project(t, &t.gelu(&ins[0])?, seed)
        });
        // keep |x| > 0.2: the kink at zero breaks finite differences
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 300);
        let data: Vec<f64> = (0..7)
            .map(|_| {
                let v: f64 = rng.random_range(0.2..2.0);
                if rng.random_range(0.0..1.0f64) < 0.5 {
                    -v
                } else {
                    v
                }
            })
            .collect();
        let away = Tensor::from_vec(&[7], data).unwrap();
        assert_grad("abs", vec![away], seed, |t, ins| {
            project(t, &t.abs(&ins[0])?, seed)
        });
    }
}

#[test]
fn reductions_and_scalars() {
    for seed in 0..SEEDS {
        let x = rand_tensor(&[3, 4], seed, -1.5, 1.5);
        assert_grad("sum", vec![x.clone()], seed, |t, ins| t.sum(&ins[0]));
        assert_grad("mean", vec![x.clone()], seed, |t, ins| t.mean(&ins[0]));
        let s = rand_tensor(&[1], seed + 50, 0.5, 2.0);
        assert_grad("div_by_scalar", vec![x, s], seed, |t, ins| {
            project(t, &t.div_by_scalar(&ins[0], &ins[1])?, seed)
        });
    }
}

#[test]
fn shape_ops() {
    for seed in 0..SEEDS {
        let a = rand_tensor(&[1, 2, 3, 3], seed, -1.0, 1.0);
        let b = rand_tensor(&[1, 1, 3, 3], seed + 10, -1.0, 1.0);
        assert_grad("reshape", vec![a.clone()], seed, |t, ins| {
            project(t, &t.reshape(&ins[0], &[2, 9])?, seed)
        });
        assert_grad("cat_channels", vec![a.clone(), b], seed, |t, ins| {
            project(t, &t.cat_channels(&[&ins[0], &ins[1]])?, seed)
        });
        assert_grad("narrow_channels", vec![a], seed, |t, ins| {
            project(t, &t.narrow_channels(&ins[0], 1, 1)?, seed)
        });
        let p = rand_tensor(&[1, 2, 4, 4], seed + 20, -1.0, 1.0);
        assert_grad("pixel_unshuffle", vec![p.clone()], seed, |t, ins| {
            project(t, &t.pixel_unshuffle(&ins[0], 2)?, seed)
        });
        let q = rand_tensor(&[1, 8, 2, 2], seed + 30, -1.0, 1.0);
        assert_grad("pixel_shuffle", vec![q], seed, |t, ins| {
            project(t, &t.pixel_shuffle(&ins[0], 2)?, seed)
        });
        let _ = p;
    }
}

#[test]
fn conv_ops() {
    for seed in 0..SEEDS {
        let x = rand_tensor(&[1, 2, 5, 5], seed, -1.0, 1.0);
        let k = rand_tensor(&[3, 2, 3, 3], seed + 40, -0.7, 0.7);
        assert_grad("conv2d s1 p1", vec![x.clone(), k.clone()], seed, |t, ins| {
            project(t, &t.conv2d(&ins[0], &ins[1], 1, 1)?, seed)
        });
        assert_grad("conv2d s2 p0", vec![x.clone(), k.clone()], seed, |t, ins| {
            project(t, &t.conv2d(&ins[0], &ins[1], 2, 0)?, seed)
        });
        // the spec's sum-of-conv case
        assert_grad("sum(conv2d)", vec![x.clone(), k], seed, |t, ins| {
            t.sum(&t.conv2d(&ins[0], &ins[1], 1, 1)?)
        });
        let dk = rand_tensor(&[2, 1, 3, 3], seed + 60, -0.7, 0.7);
        assert_grad("depthwise_conv2d", vec![x, dk], seed, |t, ins| {
            project(t, &t.depthwise_conv2d(&ins[0], &ins[1], 1)?, seed)
        });
    }
}

#[test]
fn normalization_ops() {
    for seed in 0..SEEDS {
        let x = rand_tensor(&[1, 3, 2, 2], seed, -1.0, 1.0);
        let g = rand_tensor(&[3], seed + 70, 0.5, 1.5);
        let b = rand_tensor(&[3], seed + 80, -0.5, 0.5);
        assert_grad("layer_norm", vec![x, g, b], seed, |t, ins| {
            project(t, &t.layer_norm(&ins[0], &ins[1], &ins[2], 1e-5)?, seed)
        });
        let s = rand_tensor(&[2, 3, 4], seed + 90, -2.0, 2.0);
        assert_grad("softmax_last", vec![s.clone()], seed, |t, ins| {
            project(t, &t.softmax_last(&ins[0])?, seed)
        });
        assert_grad("l2_normalize_last", vec![s], seed, |t, ins| {
            project(t, &t.l2_normalize_last(&ins[0], 1e-12)?, seed)
        });
    }
}

#[test]
fn matmul_family() {
    for seed in 0..SEEDS {
        let a = rand_tensor(&[2, 3, 4], seed, -1.0, 1.0);
        let b = rand_tensor(&[2, 4, 2], seed + 11, -1.0, 1.0);
        assert_grad("bmm", vec![a.clone(), b], seed, |t, ins| {
            project(t, &t.bmm(&ins[0], &ins[1])?, seed)
        });
        let c = rand_tensor(&[2, 5, 4], seed + 12, -1.0, 1.0);
        assert_grad("bmm_transposed", vec![a.clone(), c], seed, |t, ins| {
            project(t, &t.bmm_transposed(&ins[0], &ins[1])?, seed)
        });
        let s = rand_tensor(&[2], seed + 13, 0.3, 2.0);
        assert_grad("scale_per_batch", vec![a, s], seed, |t, ins| {
            project(t, &t.scale_per_batch(&ins[0], &ins[1])?, seed)
        });
        let x = rand_tensor(&[3, 4], seed + 14, -1.0, 1.0);
        let w = rand_tensor(&[2, 4], seed + 15, -1.0, 1.0);
        assert_grad("linear", vec![x, w], seed, |t, ins| {
            project(t, &t.linear(&ins[0], &ins[1])?, seed)
        });
    }
}

#[test]
fn broadcast_and_fusion_ops() {
    for seed in 0..SEEDS {
        let x = rand_tensor(&[1, 3, 3, 3], seed, -1.0, 1.0);
        let b = rand_tensor(&[3], seed + 21, -0.5, 0.5);
        assert_grad("add_channel_bias", vec![x.clone(), b], seed, |t, ins| {
            project(t, &t.add_channel_bias(&ins[0], &ins[1])?, seed)
        });
        assert_grad("global_avg_pool", vec![x], seed, |t, ins| {
            project(t, &t.global_avg_pool(&ins[0])?, seed)
        });
        let frames = rand_tensor(&[1, 6, 3, 3], seed + 22, 0.0, 1.0);
        let w = rand_tensor(&[2], seed + 23, 0.1, 1.0);
        assert_grad("weighted_frame_sum", vec![frames, w], seed, |t, ins| {
            project(t, &t.weighted_frame_sum(&ins[0], &ins[1], 3)?, seed)
        });
    }
}

#[test]
fn channel_attention_composite() {
    for seed in 0..SEEDS {
        let q = rand_tensor(&[1, 2, 2, 2], seed, -1.0, 1.0);
        let k = rand_tensor(&[1, 2, 2, 2], seed + 31, -1.0, 1.0);
        let v = rand_tensor(&[1, 2, 2, 2], seed + 32, -1.0, 1.0);
        let temp = rand_tensor(&[1], seed + 33, 0.5, 1.5);
        assert_grad(
            "channel_attention",
            vec![q, k, v, temp],
            seed,
            |t, ins| {
                project(
                    t,
                    &t.channel_attention(&ins[0], &ins[1], &ins[2], 1, &ins[3])?,
                    seed,
                )
            },
        );
    }
}

#[test]
fn composite_conv_norm_attention_chain() {
    // the layered case: conv -> layer_norm -> channel_attention -> mean
    for seed in 0..SEEDS {
        let x = rand_tensor(&[1, 2, 4, 4], seed, -1.0, 1.0);
        let k = rand_tensor(&[2, 2, 3, 3], seed + 41, -0.5, 0.5);
        let g = rand_tensor(&[2], seed + 42, 0.5, 1.5);
        let b = rand_tensor(&[2], seed + 43, -0.3, 0.3);
        let temp = rand_tensor(&[1], seed + 44, 0.5, 1.5);
        assert_grad(
            "conv->norm->attention",
            vec![x, k, g, b, temp],
            seed,
            |t, ins| {
                let c = t.conv2d(&ins[0], &ins[1], 1, 1)?;
                let n = t.layer_norm(&c, &ins[2], &ins[3], 1e-5)?;
                let a = t.channel_attention(&n, &n, &n, 1, &ins[4])?;
                t.mean(&a)
            },
        );
    }
}

#[test]
fn combined_loss_gradient() {
    let cfg = LossConfig {
        ssim_window: 5,
        ..Default::default()
    };
    for seed in 0..SEEDS {
        let pred = rand_tensor(&[1, 3, 8, 8], seed, 0.05, 0.95);
        let target = rand_tensor(&[1, 3, 8, 8], seed + 51, 0.05, 0.95);
        let cfg = cfg;
        let report = check_gradients(
            move |t, ins| combined_loss(t, &ins[0], &ins[1], &cfg),
            &[pred, target],
            40,
            seed,
        )
        .unwrap();
        assert!(
            report.max_rel_err < TOL,
            "combined_loss seed {seed}: rel err {}",
            report.max_rel_err
        );
    }
}

/// End-to-end: tiny model, stacked input, fused output, full objective.
#[test]
fn full_model_end_to_end_gradient() {
    let cfg = RestorerConfig {
        levels: 2,
        blocks_per_level: vec![1, 1],
        base_channels: 4,
        heads_per_level: vec![1, 2],
        frames_in: 2,
        patch: 8,
        ffn_expansion: 1.0,
        refinement_blocks: 0,
        quality_channels: 4,
    };
    let loss_cfg = LossConfig {
        ssim_window: 5,
        ..Default::default()
    };
    for seed in 0..3u64 {
        let model = Restorer::<f64>::new(cfg.clone(), 1000 + seed).unwrap();
        let params = model.named_parameters();
        let x = rand_tensor(&[1, 6, 8, 8], seed, 0.05, 0.95);
        let target = rand_tensor(&[1, 3, 8, 8], seed + 61, 0.05, 0.95);

        // analytic gradients
        let tape = Tape::new();
        let out = model.forward(&tape, &x).unwrap();
        let loss = combined_loss(&tape, &out.fused, &target, &loss_cfg).unwrap();
        tape.backward(&loss).unwrap();

        // numeric: perturb a sample of coordinates of every parameter
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 71);
        let mut worst = 0.0f64;
        let mut checked = 0usize;
        for (name, p) in &params {
            let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let coords: Vec<usize> = if p.numel() <= 6 {
                (0..p.numel()).collect()
            } else {
                (0..6).map(|_| rng.random_range(0..p.numel())).collect()
            };
            for c in coords {
                let base = p.data()[c];
                let h = 1e-5 * base.abs().max(1.0);
                let eval = |v: f64| -> f64 {
                    let mut data = p.data().to_vec();
                    data[c] = v;
                    let probe = Tensor::from_vec(p.shape(), data).unwrap();
                    let m = rebuild_with(&model, name, &probe);
                    let tape = Tape::no_grad();
                    let out = m.forward(&tape, &x).unwrap();
                    let loss = combined_loss(&tape, &out.fused, &target, &loss_cfg).unwrap();
                    loss.item().unwrap()
                };
                let numeric = (eval(base + h) - eval(base - h)) / (2.0 * h);
                let a = analytic[c];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                worst = worst.max(rel);
                checked += 1;
            }
        }
        assert!(
            worst < TOL,
            "full model seed {seed}: rel err {worst} over {checked} coords"
        );
    }
}

/// Clone the model with one named parameter replaced (f64-exact).
fn rebuild_with(model: &Restorer<f64>, name: &str, value: &Tensor<f64>) -> Restorer<f64> {
    let mut clone = Restorer::<f64>::new(model.cfg.clone(), 0).unwrap();
    let src: std::collections::HashMap<String, Tensor<f64>> =
        model.named_parameters().into_iter().collect();
    for (pn, slot) in clone.params_mut() {
        let tensor = if pn == name {
            value.clone()
        } else {
            src[&pn].clone()
        };
        *slot = Tensor::param(tensor.shape(), tensor.data().to_vec()).unwrap();
    }
    clone
}

#[test]
fn residual_combine_gradient() {
    for seed in 0..SEEDS {
        let frames = rand_tensor(&[1, 6, 4, 4], seed, 0.0, 1.0);
        let w = rand_tensor(&[2], seed + 81, 0.1, 0.9);
        let fp = rand_tensor(&[1, 3, 4, 4], seed + 82, -0.5, 0.5);
        let report = check_gradients(
            |t, ins| project(t, &residual_combine(t, &ins[0], &ins[1], &ins[2])?, seed),
            &[frames, w, fp],
            0,
            seed,
        )
        .unwrap();
        assert!(report.max_rel_err < TOL, "seed {seed}: {}", report.max_rel_err);
    }
}
