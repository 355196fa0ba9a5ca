//! The restoration network: a symmetric encoder-decoder over stacked input
//! frames whose attention runs across channels, paired with a small
//! per-frame quality head. The final image is the reconstruction branch
//! output plus a quality-weighted average of the input frames.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgbuf::Image;
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RestorerConfig {
    /// Encoder-decoder depth; the deepest level is the latent stage.
    pub levels: usize,
    /// Blocks per level, top to bottom; must be non-decreasing.
    pub blocks_per_level: Vec<usize>,
    /// Channel width at the top level; doubles per level down.
    pub base_channels: usize,
    /// Attention heads per level.
    pub heads_per_level: Vec<usize>,
    /// Input frames stacked channel-wise (3 channels each).
    pub frames_in: usize,
    /// Square training/inference patch extent.
    pub patch: usize,
    /// Feed-forward hidden width as a multiple of the block width.
    pub ffn_expansion: f64,
    /// Extra blocks at full resolution after the decoder (0 disables).
    pub refinement_blocks: usize,
    /// Channel width of the quality head.
    pub quality_channels: usize,
}

impl Default for RestorerConfig {
    fn default() -> Self {
        RestorerConfig {
            levels: 4,
            blocks_per_level: vec![1, 1, 2, 2],
            base_channels: 8,
            heads_per_level: vec![1, 2, 4, 8],
            frames_in: 20,
            patch: 128,
            ffn_expansion: 2.0,
            refinement_blocks: 0,
            quality_channels: 8,
        }
    }
}

impl RestorerConfig {
    /// The configuration used by the desk-scale training recipe.
    pub fn desk() -> Self {
        RestorerConfig {
            frames_in: 4,
            patch: 32,
            ..Default::default()
        }
    }

    /// The full-scale configuration; constructible but not trained here.
    pub fn full_scale() -> Self {
        RestorerConfig {
            levels: 4,
            blocks_per_level: vec![4, 6, 6, 8],
            base_channels: 48,
            heads_per_level: vec![1, 2, 4, 8],
            frames_in: 20,
            patch: 128,
            ffn_expansion: 2.66,
            refinement_blocks: 4,
            quality_channels: 8,
        }
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial extents must be divisible by this at the model input.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::config("levels must be >= 2"));
        }
        if self.blocks_per_level.len() != self.levels {
            return Err(Error::config(format!(
                "blocks_per_level has {} entries for {} levels",
                self.blocks_per_level.len(),
                self.levels
            )));
        }
        if self.blocks_per_level.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config(
                "blocks_per_level must be non-decreasing top to bottom",
            ));
        }
        if self.heads_per_level.len() != self.levels {
            return Err(Error::config(format!(
                "heads_per_level has {} entries for {} levels",
                self.heads_per_level.len(),
                self.levels
            )));
        }
        for (i, &h) in self.heads_per_level.iter().enumerate() {
            let c = self.channels_at(i);
            if h == 0 || c % h != 0 {
                return Err(Error::config(format!(
                    "level {i}: {c} channels not divisible by {h} heads"
                )));
            }
        }
        // decoder level 0 runs at twice the base width
        if 2 * self.base_channels % self.heads_per_level[0] != 0 {
            return Err(Error::config(
                "decoder level 0 width not divisible by its head count",
            ));
        }
        if self.frames_in == 0 {
            return Err(Error::config("frames_in must be >= 1"));
        }
        if self.base_channels == 0 || self.quality_channels == 0 {
            return Err(Error::config("channel widths must be >= 1"));
        }
        if self.ffn_expansion <= 0.0 {
            return Err(Error::config("ffn_expansion must be positive"));
        }
        Ok(())
    }
}

// ---- building blocks ----

struct Conv2d<T: Scalar> {
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
    stride: usize,
    padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = Tensor::param(
            &[out_ch, in_ch, k, k],
            normal_draws(rng, out_ch * in_ch * k * k, std),
        )
        .expect("conv weight shape consistent");
        let bias = bias.then(|| {
            Tensor::param(&[out_ch], vec![T::zero(); out_ch]).expect("bias shape consistent")
        });
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    fn zeroed(in_ch: usize, out_ch: usize, k: usize, padding: usize, bias: bool) -> Self {
        let weight = Tensor::param(&[out_ch, in_ch, k, k], vec![T::zero(); out_ch * in_ch * k * k])
            .expect("conv weight shape consistent");
        let bias = bias.then(|| {
            Tensor::param(&[out_ch], vec![T::zero(); out_ch]).expect("bias shape consistent")
        });
        Conv2d {
            weight,
            bias,
            stride: 1,
            padding,
        }
    }

    fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = tape.conv2d(x, &self.weight, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => tape.add_channel_bias(&y, b),
            None => Ok(y),
        }
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }
}

struct DepthwiseConv2d<T: Scalar> {
    weight: Tensor<T>,
    padding: usize,
}

impl<T: Scalar> DepthwiseConv2d<T> {
    fn new(rng: &mut ChaCha8Rng, ch: usize, k: usize, padding: usize) -> Self {
        let std = (2.0 / (k * k) as f64).sqrt();
        let weight = Tensor::param(&[ch, 1, k, k], normal_draws(rng, ch * k * k, std))
            .expect("depthwise weight shape consistent");
        DepthwiseConv2d { weight, padding }
    }

    fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        tape.depthwise_conv2d(x, &self.weight, self.padding)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
    }
}

struct LayerNorm2d<T: Scalar> {
    gain: Tensor<T>,
    bias: Tensor<T>,
    eps: f64,
}

impl<T: Scalar> LayerNorm2d<T> {
    fn new(ch: usize) -> Self {
        LayerNorm2d {
            gain: Tensor::param(&[ch], vec![T::one(); ch]).expect("gain shape"),
            bias: Tensor::param(&[ch], vec![T::zero(); ch]).expect("bias shape"),
            eps: 1e-6,
        }
    }

    fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        tape.layer_norm(x, &self.gain, &self.bias, self.eps)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.gain"), &mut self.gain));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

/// Channel-attention block: pre-norm transposed attention plus a gated
/// depthwise feed-forward, both with residual connections.
struct TransformerBlock<T: Scalar> {
    heads: usize,
    attn_norm: LayerNorm2d<T>,
    qkv: Conv2d<T>,
    qkv_dw: DepthwiseConv2d<T>,
    temperature: Tensor<T>,
    proj: Conv2d<T>,
    ffn_norm: LayerNorm2d<T>,
    ffn_expand: Conv2d<T>,
    ffn_dw: DepthwiseConv2d<T>,
    ffn_project: Conv2d<T>,
    hidden: usize,
}

impl<T: Scalar> TransformerBlock<T> {
    fn new(rng: &mut ChaCha8Rng, ch: usize, heads: usize, ffn_expansion: f64) -> Self {
        let hidden = ((ch as f64 * ffn_expansion).round() as usize).max(1);
        TransformerBlock {
            heads,
            attn_norm: LayerNorm2d::new(ch),
            qkv: Conv2d::new(rng, ch, 3 * ch, 1, 1, 0, false),
            qkv_dw: DepthwiseConv2d::new(rng, 3 * ch, 3, 1),
            temperature: Tensor::param(&[heads], vec![T::one(); heads])
                .expect("temperature shape"),
            proj: Conv2d::new(rng, ch, ch, 1, 1, 0, false),
            ffn_norm: LayerNorm2d::new(ch),
            ffn_expand: Conv2d::new(rng, ch, 2 * hidden, 1, 1, 0, false),
            ffn_dw: DepthwiseConv2d::new(rng, 2 * hidden, 3, 1),
            ffn_project: Conv2d::new(rng, hidden, ch, 1, 1, 0, false),
            hidden,
        }
    }

    fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let ch = x.shape()[1];
        // attention branch
        let n = self.attn_norm.forward(tape, x)?;
        let qkv = self.qkv_dw.forward(tape, &self.qkv.forward(tape, &n)?)?;
        let q = tape.narrow_channels(&qkv, 0, ch)?;
        let k = tape.narrow_channels(&qkv, ch, ch)?;
        let v = tape.narrow_channels(&qkv, 2 * ch, ch)?;
        let attn = tape.channel_attention(&q, &k, &v, self.heads, &self.temperature)?;
        let x = tape.add(x, &self.proj.forward(tape, &attn)?)?;
        // gated feed-forward branch
        let n = self.ffn_norm.forward(tape, &x)?;
        let expanded = self.ffn_dw.forward(tape, &self.ffn_expand.forward(tape, &n)?)?;
        let gate = tape.narrow_channels(&expanded, 0, self.hidden)?;
        let value = tape.narrow_channels(&expanded, self.hidden, self.hidden)?;
        let gated = tape.mul(&tape.gelu(&gate)?, &value)?;
        tape.add(&x, &self.ffn_project.forward(tape, &gated)?)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.attn_norm.params(&format!("{prefix}.attn_norm"), out);
        self.qkv.params(&format!("{prefix}.qkv"), out);
        self.qkv_dw.params(&format!("{prefix}.qkv_dw"), out);
        out.push((format!("{prefix}.temperature"), self.temperature.clone()));
        self.proj.params(&format!("{prefix}.proj"), out);
        self.ffn_norm.params(&format!("{prefix}.ffn_norm"), out);
        self.ffn_expand.params(&format!("{prefix}.ffn_expand"), out);
        self.ffn_dw.params(&format!("{prefix}.ffn_dw"), out);
        self.ffn_project.params(&format!("{prefix}.ffn_project"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.attn_norm.params_mut(&format!("{prefix}.attn_norm"), out);
        self.qkv.params_mut(&format!("{prefix}.qkv"), out);
        self.qkv_dw.params_mut(&format!("{prefix}.qkv_dw"), out);
        out.push((format!("{prefix}.temperature"), &mut self.temperature));
        self.proj.params_mut(&format!("{prefix}.proj"), out);
        self.ffn_norm.params_mut(&format!("{prefix}.ffn_norm"), out);
        self.ffn_expand.params_mut(&format!("{prefix}.ffn_expand"), out);
        self.ffn_dw.params_mut(&format!("{prefix}.ffn_dw"), out);
        self.ffn_project.params_mut(&format!("{prefix}.ffn_project"), out);
    }
}

/// Small shared-weight head scoring each frame in (0, 1).
struct QualityHead<T: Scalar> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    fc: Tensor<T>,
}

impl<T: Scalar> QualityHead<T> {
    fn new(rng: &mut ChaCha8Rng, qc: usize) -> Self {
        QualityHead {
            conv1: Conv2d::new(rng, 3, qc, 3, 1, 1, true),
            conv2: Conv2d::new(rng, qc, qc, 3, 2, 1, true),
            // zero-initialized: every frame starts at score 0.5
            fc: Tensor::param(&[1, qc], vec![T::zero(); qc]).expect("fc shape"),
        }
    }

    /// frames: [F, 3, H, W] -> scores [F] in (0, 1).
    fn forward(&self, tape: &Tape<T>, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let x = tape.gelu(&self.conv1.forward(tape, frames)?)?;
        let x = tape.gelu(&self.conv2.forward(tape, &x)?)?;
        let pooled = tape.global_avg_pool(&x)?; // [F, qc]
        let logits = tape.linear(&pooled, &self.fc)?; // [F, 1]
        let f = frames.shape()[0];
        let logits = tape.reshape(&logits, &[f])?;
        tape.sigmoid(&logits)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.conv1.params(&format!("{prefix}.conv1"), out);
        self.conv2.params(&format!("{prefix}.conv2"), out);
        out.push((format!("{prefix}.fc"), self.fc.clone()));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.conv1.params_mut(&format!("{prefix}.conv1"), out);
        self.conv2.params_mut(&format!("{prefix}.conv2"), out);
        out.push((format!("{prefix}.fc"), &mut self.fc));
    }
}

/// Per-frame quality scores and their normalized fusion weights.
pub struct QualityScores<T: Scalar> {
    /// Raw logistic scores, each in (0, 1), length frames_in.
    pub scores: Tensor<T>,
    /// scores / sum(scores); sums to 1.
    pub weights: Tensor<T>,
}

pub struct ForwardOutput<T: Scalar> {
    /// Reconstruction branch output (the learned correction).
    pub f_prime: Tensor<T>,
    pub quality: QualityScores<T>,
    /// f_prime + weighted frame average, unclipped.
    pub fused: Tensor<T>,
}

/// The restoration network.
pub struct Restorer<T: Scalar> {
    pub cfg: RestorerConfig,
    embed: Conv2d<T>,
    encoders: Vec<Vec<TransformerBlock<T>>>,
    downs: Vec<Conv2d<T>>,
    ups: Vec<Conv2d<T>>,
    reduces: Vec<Option<Conv2d<T>>>,
    decoders: Vec<Vec<TransformerBlock<T>>>,
    refinement: Vec<TransformerBlock<T>>,
    output: Conv2d<T>,
    quality: QualityHead<T>,
}

impl<T: Scalar> Restorer<T> {
    /// Fresh model with seeded initialization. The output projection starts
    /// at zero so the untrained model reproduces the weighted frame mean.
    pub fn new(cfg: RestorerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let levels = cfg.levels;
        let embed = Conv2d::new(rng, cfg.frames_in * 3, cfg.base_channels, 3, 1, 1, false);

        let mut encoders = Vec::with_capacity(levels);
        for li in 0..levels {
            let ch = cfg.channels_at(li);
            let blocks = (0..cfg.blocks_per_level[li])
                .map(|_| TransformerBlock::new(rng, ch, cfg.heads_per_level[li], cfg.ffn_expansion))
                .collect();
            encoders.push(blocks);
        }
        // down(i): conv C_i -> C_i/2 then unshuffle(2) doubles it
        let downs = (0..levels - 1)
            .map(|li| {
                let ch = cfg.channels_at(li);
                Conv2d::new(rng, ch, ch / 2, 3, 1, 1, false)
            })
            .collect();
        // up(i+1 -> i): conv C -> 2C then shuffle(2) halves twice
        let ups = (0..levels - 1)
            .map(|li| {
                let ch = cfg.channels_at(li + 1);
                Conv2d::new(rng, ch, 2 * ch, 3, 1, 1, false)
            })
            .collect();
        let mut reduces = Vec::with_capacity(levels - 1);
        let mut decoders = Vec::with_capacity(levels - 1);
        for li in (0..levels - 1).rev() {
            let ch = cfg.channels_at(li);
            // level 0 keeps the concatenated width
            let (reduce, width) = if li == 0 {
                (None, 2 * ch)
            } else {
                (Some(Conv2d::new(rng, 2 * ch, ch, 1, 1, 0, false)), ch)
            };
            let blocks = (0..cfg.blocks_per_level[li])
                .map(|_| {
                    TransformerBlock::new(rng, width, cfg.heads_per_level[li], cfg.ffn_expansion)
                })
                .collect();
            reduces.push(reduce);
            decoders.push(blocks);
        }
        let refinement = (0..cfg.refinement_blocks)
            .map(|_| {
                TransformerBlock::new(
                    rng,
                    2 * cfg.base_channels,
                    cfg.heads_per_level[0],
                    cfg.ffn_expansion,
                )
            })
            .collect();
        let output = Conv2d::zeroed(2 * cfg.base_channels, 3, 3, 1, true);
        let quality = QualityHead::new(rng, cfg.quality_channels);
        Ok(Restorer {
            cfg,
            embed,
            encoders,
            downs,
            ups,
            reduces,
            decoders,
            refinement,
            output,
            quality,
        })
    }

    /// Reconstruction branch: stacked frames [1, frames_in*3, H, W] to the
    /// refined correction [1, 3, H, W].
    pub fn restore_forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != self.cfg.frames_in * 3 {
            return Err(Error::dimension(format!(
                "restore_forward expects [1, {}, H, W], got {s:?}",
                self.cfg.frames_in * 3
            )));
        }
        let mult = self.cfg.spatial_multiple();
        if s[2] % mult != 0 || s[3] % mult != 0 {
            return Err(Error::dimension(format!(
                "spatial extents {}x{} must be divisible by {mult}",
                s[2], s[3]
            )));
        }
        let levels = self.cfg.levels;
        let mut cur = self.embed.forward(tape, x)?;
        let mut skips = Vec::with_capacity(levels - 1);
        for li in 0..levels {
            for blk in &self.encoders[li] {
                cur = blk.forward(tape, &cur)?;
            }
            if li < levels - 1 {
                skips.push(cur.clone());
                cur = self.downs[li].forward(tape, &cur)?;
                cur = tape.pixel_unshuffle(&cur, 2)?;
            }
        }
        for (di, li) in (0..levels - 1).rev().enumerate() {
            cur = self.ups[li].forward(tape, &cur)?;
            cur = tape.pixel_shuffle(&cur, 2)?;
            cur = tape.cat_channels(&[&cur, &skips[li]])?;
            if let Some(reduce) = &self.reduces[di] {
                cur = reduce.forward(tape, &cur)?;
            }
            for blk in &self.decoders[di] {
                cur = blk.forward(tape, &cur)?;
            }
        }
        for blk in &self.refinement {
            cur = blk.forward(tape, &cur)?;
        }
        self.output.forward(tape, &cur)
    }

    /// Per-frame scores and normalized weights for a stacked input.
    pub fn quality_scores(&self, tape: &Tape<T>, stacked: &Tensor<T>) -> Result<QualityScores<T>> {
        let s = stacked.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != self.cfg.frames_in * 3 {
            return Err(Error::dimension(format!(
                "quality_scores expects [1, {}, H, W], got {s:?}",
                self.cfg.frames_in * 3
            )));
        }
        let f = self.cfg.frames_in;
        let frames = tape.reshape(stacked, &[f, 3, s[2], s[3]])?;
        let scores = self.quality.forward(tape, &frames)?;
        let total = tape.sum(&scores)?;
        let weights = tape.div_by_scalar(&scores, &total)?;
        Ok(QualityScores { scores, weights })
    }

    /// Full forward pass: reconstruction + quality-weighted residual.
    /// The fused output is left unclipped so losses see live gradients.
    pub fn forward(&self, tape: &Tape<T>, stacked: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let f_prime = self.restore_forward(tape, stacked)?;
        let quality = self.quality_scores(tape, stacked)?;
        let fused = residual_combine(tape, stacked, &quality.weights, &f_prime)?;
        Ok(ForwardOutput {
            f_prime,
            quality,
            fused,
        })
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.embed.params("embed", &mut out);
        for (li, blocks) in self.encoders.iter().enumerate() {
            for (bi, blk) in blocks.iter().enumerate() {
                blk.params(&format!("enc{li}.blk{bi}"), &mut out);
            }
        }
        for (li, d) in self.downs.iter().enumerate() {
            d.params(&format!("down{li}"), &mut out);
        }
        for (li, u) in self.ups.iter().enumerate() {
            u.params(&format!("up{li}"), &mut out);
        }
        for (di, li) in (0..self.cfg.levels - 1).rev().enumerate() {
            if let Some(r) = &self.reduces[di] {
                r.params(&format!("dec{li}.reduce"), &mut out);
            }
            for (bi, blk) in self.decoders[di].iter().enumerate() {
                blk.params(&format!("dec{li}.blk{bi}"), &mut out);
            }
        }
        for (bi, blk) in self.refinement.iter().enumerate() {
            blk.params(&format!("refine.blk{bi}"), &mut out);
        }
        self.output.params("output", &mut out);
        self.quality.params("quality", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.embed.params_mut("embed", &mut out);
        for (li, blocks) in self.encoders.iter_mut().enumerate() {
            for (bi, blk) in blocks.iter_mut().enumerate() {
                blk.params_mut(&format!("enc{li}.blk{bi}"), &mut out);
            }
        }
        for (li, d) in self.downs.iter_mut().enumerate() {
            d.params_mut(&format!("down{li}"), &mut out);
        }
        for (li, u) in self.ups.iter_mut().enumerate() {
            u.params_mut(&format!("up{li}"), &mut out);
        }
        let levels = self.cfg.levels;
        for (di, (reduce, blocks)) in self
            .reduces
            .iter_mut()
            .zip(self.decoders.iter_mut())
            .enumerate()
        {
            let li = levels - 2 - di;
            if let Some(r) = reduce {
                r.params_mut(&format!("dec{li}.reduce"), &mut out);
            }
            for (bi, blk) in blocks.iter_mut().enumerate() {
                blk.params_mut(&format!("dec{li}.blk{bi}"), &mut out);
            }
        }
        for (bi, blk) in self.refinement.iter_mut().enumerate() {
            blk.params_mut(&format!("refine.blk{bi}"), &mut out);
        }
        self.output.params_mut("output", &mut out);
        self.quality.params_mut("quality", &mut out);
        out
    }

    /// Zero every parameter's accumulated gradient.
    pub fn zero_grads(&self) {
        for (_, p) in self.named_parameters() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let params = self
            .named_parameters()
            .into_iter()
            .map(|(name, t)| {
                let data: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
                (name, t.shape().to_vec(), data)
            })
            .collect();
        Checkpoint {
            config: self.cfg.clone(),
            step,
            params,
        }
    }

    /// Rebuild a model from a checkpoint, verifying that every stored array
    /// matches the architecture the stored config dictates.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, u64)> {
        let mut model = Restorer::new(ckpt.config.clone(), 0)?;
        let mut stored: std::collections::HashMap<&str, &(String, Vec<usize>, Vec<f32>)> =
            ckpt.params.iter().map(|p| (p.0.as_str(), p)).collect();
        for (name, slot) in model.params_mut() {
            let (_, shape, data) = stored.remove(name.as_str()).ok_or_else(|| {
                Error::Compatibility {
                    param: name.clone(),
                    detail: "missing from checkpoint".into(),
                }
            })?;
            if shape != slot.shape() {
                return Err(Error::Compatibility {
                    param: name.clone(),
                    detail: format!("shape {:?} in file, model expects {:?}", shape, slot.shape()),
                });
            }
            let converted: Vec<T> = data.iter().map(|&v| T::from_f64(v as f64)).collect();
            *slot = Tensor::param(shape, converted)?;
        }
        if let Some((name, _, _)) = stored.values().next() {
            return Err(Error::Compatibility {
                param: name.clone(),
                detail: "not part of the model this config describes".into(),
            });
        }
        Ok((model, ckpt.step))
    }
}

fn normal_draws<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0f64, std).expect("std positive");
    (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
}

/// Deterministic uniform subset of `frames_in` frames, stacked channel-wise
/// in draw order as [1, frames_in*3, H, W]. Also returns the drawn indices.
pub fn stack_frames<T: Scalar>(
    frames: &[Image],
    frames_in: usize,
    seed: u64,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if frames.len() < frames_in {
        return Err(Error::input(format!(
            "need {frames_in} frames, only {} available",
            frames.len()
        )));
    }
    let (h, w) = (frames[0].h, frames[0].w);
    for f in frames {
        if f.h != h || f.w != w || f.c != 3 {
            return Err(Error::dimension(
                "stack_frames: all frames must be RGB with identical extents",
            ));
        }
    }
    let indices = sample_indices(frames.len(), frames_in, seed);
    let t = stack_selected(frames, &indices)?;
    Ok((t, indices))
}

/// Uniform draw of `k` distinct indices out of `n`, deterministic per seed,
/// in draw order.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(&mut rng);
    all.truncate(k);
    all
}

/// Stack the given frames (by index) channel-wise into [1, k*3, H, W].
pub fn stack_selected<T: Scalar>(frames: &[Image], indices: &[usize]) -> Result<Tensor<T>> {
    if indices.is_empty() {
        return Err(Error::input("stack_selected: no indices"));
    }
    let (h, w) = (frames[indices[0]].h, frames[indices[0]].w);
    let plane = h * w;
    let mut data = vec![T::zero(); indices.len() * 3 * plane];
    for (si, &fi) in indices.iter().enumerate() {
        let f = frames
            .get(fi)
            .ok_or_else(|| Error::input(format!("frame index {fi} out of range")))?;
        if f.h != h || f.w != w || f.c != 3 {
            return Err(Error::dimension(
                "stack_selected: all frames must be RGB with identical extents",
            ));
        }
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    data[(si * 3 + ch) * plane + y * w + x] =
                        T::from_f64(f.get(y, x, ch) as f64);
                }
            }
        }
    }
    Tensor::from_vec(&[1, indices.len() * 3, h, w], data)
}

/// F = F' + R where R is the weight-averaged frame stack. Unclipped.
pub fn residual_combine<T: Scalar>(
    tape: &Tape<T>,
    stacked: &Tensor<T>,
    weights: &Tensor<T>,
    f_prime: &Tensor<T>,
) -> Result<Tensor<T>> {
    let residual = tape.weighted_frame_sum(stacked, weights, 3)?;
    if residual.shape() != f_prime.shape() {
        return Err(Error::dimension(format!(
            "residual_combine: residual {:?} vs reconstruction {:?}",
            residual.shape(),
            f_prime.shape()
        )));
    }
    tape.add(f_prime, &residual)
}

// ---- checkpoint serialization ----

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ATMR";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named parameter arrays plus the configuration and step they belong to.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RestorerConfig,
    pub step: u64,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: RestorerConfig,
    step: u64,
}

/// Binary layout: magic, u32 version, u32 meta length + JSON meta, u32
/// parameter count, then per parameter name length/name/rank/extents and
/// little-endian f32 data.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&CheckpointMeta {
        config: ckpt.config.clone(),
        step: ckpt.step,
    })?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, shape, data) in &ckpt.params {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path.as_ref())?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path.as_ref())?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:02x?}, expected {CHECKPOINT_MAGIC:02x?}"
        )));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = cur.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)?;
    let count = cur.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| Error::Format(format!("parameter name not utf-8: {e}")))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate parameter '{name}'")));
        }
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.push((name, shape, data));
    }
    Ok(Checkpoint {
        config: meta.config,
        step: meta.step,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RestorerConfig {
        RestorerConfig {
            levels: 2,
            blocks_per_level: vec![1, 1],
            base_channels: 4,
            heads_per_level: vec![1, 2],
            frames_in: 2,
            patch: 8,
            ffn_expansion: 1.0,
            refinement_blocks: 0,
            quality_channels: 4,
        }
    }

    fn frame(h: usize, w: usize, phase: usize) -> Image {
        let mut img = Image::new(h, w, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (((i + phase) * 31) % 211) as f32 / 255.0;
        }
        img
    }

    #[test]
    fn config_validation_catches_bad_setups() {
        let mut cfg = tiny_cfg();
        cfg.blocks_per_level = vec![2, 1];
        assert!(cfg.validate().is_err(), "decreasing blocks must fail");
        let mut cfg = tiny_cfg();
        cfg.heads_per_level = vec![3, 2];
        assert!(cfg.validate().is_err(), "non-divisible heads must fail");
        assert!(tiny_cfg().validate().is_ok());
        assert!(RestorerConfig::default().validate().is_ok());
        assert!(RestorerConfig::full_scale().validate().is_ok());
    }

    #[test]
    fn forward_shape_contract() {
        let model = Restorer::<f32>::new(tiny_cfg(), 1).unwrap();
        let tape = Tape::no_grad();
        for (h, w) in [(8, 8), (8, 16), (16, 8)] {
            let x = Tensor::from_vec(&[1, 6, h, w], vec![0.3; 6 * h * w]).unwrap();
            let y = model.restore_forward(&tape, &x).unwrap();
            assert_eq!(y.shape(), &[1, 3, h, w]);
        }
    }

    #[test]
    fn forward_rejects_indivisible_extents() {
        let mut cfg = tiny_cfg();
        cfg.levels = 3;
        cfg.blocks_per_level = vec![1, 1, 1];
        cfg.heads_per_level = vec![1, 2, 4];
        let model = Restorer::<f32>::new(cfg, 1).unwrap();
        let tape = Tape::no_grad();
        let x = Tensor::from_vec(&[1, 6, 10, 10], vec![0.3; 600]).unwrap();
        let err = model.restore_forward(&tape, &x).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"), "{err}");
    }

    #[test]
    fn zero_output_head_gives_zero_reconstruction() {
        let model = Restorer::<f32>::new(tiny_cfg(), 2).unwrap();
        let tape = Tape::no_grad();
        let x = Tensor::from_vec(&[1, 6, 8, 8], vec![0.5; 6 * 64]).unwrap();
        // freshly initialized output head is zero
        let y = model.restore_forward(&tape, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn untrained_model_outputs_frame_mean() {
        // zero F' head + uniform scores: fused output is the mean frame
        let model = Restorer::<f32>::new(tiny_cfg(), 3).unwrap();
        let tape = Tape::no_grad();
        let a = frame(8, 8, 0);
        let b = frame(8, 8, 5);
        let (stacked, _) = stack_frames::<f32>(&[a.clone(), b.clone()], 2, 9).unwrap();
        let out = model.forward(&tape, &stacked).unwrap();
        let got = Image::from_tensor(&out.fused).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for ch in 0..3 {
                    let want = 0.5 * (a.get(y, x, ch) + b.get(y, x, ch));
                    assert!((got.get(y, x, ch) - want).abs() < 1e-5);
                }
            }
        }
        // weights are uniform
        let w = out.quality.weights.data();
        assert!((w[0] - 0.5).abs() < 1e-6 && (w[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn identical_frames_get_identical_scores() {
        let model = Restorer::<f32>::new(tiny_cfg(), 4).unwrap();
        let tape = Tape::no_grad();
        let a = frame(8, 8, 2);
        let (stacked, _) = stack_frames::<f32>(&[a.clone(), a], 2, 1).unwrap();
        let q = model.quality_scores(&tape, &stacked).unwrap();
        let s = q.scores.data();
        assert!((s[0] - s[1]).abs() < 1e-7);
        let wsum: f32 = q.weights.data().iter().sum();
        assert!((wsum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn stack_frames_draws_distinct_subsets() {
        let frames: Vec<Image> = (0..20).map(|i| frame(8, 8, i)).collect();
        let (_, idx_a) = stack_frames::<f32>(&frames, 4, 100).unwrap();
        let mut all_same = true;
        for trial in 0..10u64 {
            let (_, idx_b) = stack_frames::<f32>(&frames, 4, 200 + trial).unwrap();
            if idx_b != idx_a {
                all_same = false;
            }
        }
        assert!(!all_same, "different seeds must pick different subsets");
        // exactly frames_in frames: all used, order permuted by seed
        let four: Vec<Image> = (0..4).map(|i| frame(8, 8, i)).collect();
        let (_, idx) = stack_frames::<f32>(&four, 4, 7).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn stack_frames_shortage_is_input_error() {
        let frames: Vec<Image> = (0..3).map(|i| frame(8, 8, i)).collect();
        assert!(matches!(
            stack_frames::<f32>(&frames, 4, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn single_gray_frame_stacks_to_itself() {
        let img = Image::filled(8, 8, 3, 0.5);
        let (t, idx) = stack_frames::<f32>(std::slice::from_ref(&img), 1, 42).unwrap();
        assert_eq!(idx, vec![0]);
        assert_eq!(t.shape(), &[1, 3, 8, 8]);
        assert!(t.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn residual_combine_matches_direct_summation() {
        let tape = Tape::<f64>::no_grad();
        let frames: Vec<Image> = (0..3).map(|i| frame(6, 6, i * 3)).collect();
        let stacked = stack_selected::<f64>(&frames, &[0, 1, 2]).unwrap();
        let w = Tensor::from_vec(&[3], vec![0.5, 0.3, 0.2]).unwrap();
        let fp = Tensor::from_vec(&[1, 3, 6, 6], vec![0.01; 108]).unwrap();
        let fused = residual_combine(&tape, &stacked, &w, &fp).unwrap();
        // independent oracle: direct per-pixel weighted sum
        for y in 0..6 {
            for x in 0..6 {
                for ch in 0..3 {
                    let want: f64 = 0.01
                        + [0.5, 0.3, 0.2]
                            .iter()
                            .zip(&frames)
                            .map(|(&wv, f)| wv * f.get(y, x, ch) as f64)
                            .sum::<f64>();
                    let got = fused.data()[(ch * 36 + y * 6 + x) as usize];
                    assert!((got - want).abs() < 1e-6, "({y},{x},{ch}): {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn residual_combine_single_weight_selects_frame() {
        let tape = Tape::<f32>::no_grad();
        let frames: Vec<Image> = (0..2).map(|i| frame(6, 6, i * 7)).collect();
        let stacked = stack_selected::<f32>(&frames, &[0, 1]).unwrap();
        let w = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let zero = Tensor::zeros(&[1, 3, 6, 6]);
        let fused = residual_combine(&tape, &stacked, &w, &zero).unwrap();
        let img = Image::from_tensor(&fused).unwrap();
        assert_eq!(img, frames[0]);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let model = Restorer::<f32>::new(tiny_cfg(), 11).unwrap();
        let ckpt = model.to_checkpoint(1234);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, 1234);
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.params.len(), ckpt.params.len());
        for (a, b) in ckpt.params.iter().zip(&loaded.params) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
            assert_eq!(a.2, b.2, "parameter {} not bit-identical", a.0);
        }
        let (model2, step) = Restorer::<f32>::from_checkpoint(&loaded).unwrap();
        assert_eq!(step, 1234);
        for ((n1, p1), (n2, p2)) in model
            .named_parameters()
            .iter()
            .zip(model2.named_parameters().iter())
        {
            assert_eq!(n1, n2);
            assert_eq!(p1.data(), p2.data());
        }
    }

    #[test]
    fn truncated_checkpoint_is_format_error() {
        let model = Restorer::<f32>::new(tiny_cfg(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model.to_checkpoint(0), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn corrupt_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_config_is_compatibility_error() {
        let model = Restorer::<f32>::new(tiny_cfg(), 11).unwrap();
        let mut ckpt = model.to_checkpoint(0);
        // config says more blocks than the stored parameters provide
        ckpt.config.blocks_per_level = vec![1, 2];
        let err = match Restorer::<f32>::from_checkpoint(&ckpt) {
            Ok(_) => panic!("mismatched config must not load"),
            Err(e) => e,
        };
        match err {
            Error::Compatibility { param, .. } => {
                assert!(!param.is_empty(), "must name the offending parameter");
            }
            other => panic!("expected compatibility error, got {other}"),
        }
    }
}
