//! Synthetic text-image dataset builder: render words over clean or scene
//! backgrounds, degrade them, push them through the turbulence simulator
//! and package everything into reproducible train/fine-tune splits.

mod words;

pub use words::WORDS;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use fontdue::layout::{CoordinateSystem, Layout, TextStyle};
use fontdue::Font;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgbuf::{gaussian_blur, Image};
use crate::turbsim::{sample_params, simulate_sequence, ParamRanges, SimConfig};

// Bundled faces (Bitstream Vera / DejaVu license, see assets/fonts).
const FONT_BYTES: [&[u8]; 3] = [
    include_bytes!("../../assets/fonts/DejaVuSans.ttf"),
    include_bytes!("../../assets/fonts/DejaVuSerif.ttf"),
    include_bytes!("../../assets/fonts/DejaVuSansMono.ttf"),
];

pub const FONT_COUNT: usize = FONT_BYTES.len();

fn fonts() -> &'static Vec<Font> {
    static FONTS: OnceLock<Vec<Font>> = OnceLock::new();
    FONTS.get_or_init(|| {
        FONT_BYTES
            .iter()
            .map(|bytes| {
                Font::from_bytes(*bytes, fontdue::FontSettings::default())
                    .expect("bundled font parses")
            })
            .collect()
    })
}

/// One text rendering request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextSample {
    pub text: String,
    pub font_id: usize,
    pub size_px: usize,
    pub orientation_deg: f64,
    pub fg: [f32; 3],
    pub bg: [f32; 3],
}

impl TextSample {
    pub fn validate(&self) -> Result<()> {
        if self.text.is_empty() {
            return Err(Error::config("text sample: empty text"));
        }
        if self.size_px < 8 {
            return Err(Error::config(format!(
                "text sample: size {} below minimum 8",
                self.size_px
            )));
        }
        if self.font_id >= FONT_COUNT {
            return Err(Error::config(format!(
                "text sample: font id {} out of range (have {FONT_COUNT})",
                self.font_id
            )));
        }
        Ok(())
    }
}

/// Rasterize a line of text into a coverage mask (single channel, [0,1]).
fn render_mask(text: &str, font_id: usize, size_px: f32) -> Option<Image> {
    let font = &fonts()[font_id];
    let mut layout = Layout::new(CoordinateSystem::PositiveYDown);
    layout.append(
        std::slice::from_ref(font),
        &TextStyle::new(text, size_px, 0),
    );
    let glyphs = layout.glyphs();
    let mut x0 = f32::INFINITY;
    let mut y0 = f32::INFINITY;
    let mut x1 = f32::NEG_INFINITY;
    let mut y1 = f32::NEG_INFINITY;
    for g in glyphs {
        if g.width == 0 || g.height == 0 {
            continue;
        }
        x0 = x0.min(g.x);
        y0 = y0.min(g.y);
        x1 = x1.max(g.x + g.width as f32);
        y1 = y1.max(g.y + g.height as f32);
    }
    if !x0.is_finite() {
        return None;
    }
    let margin = 2usize;
    let w = (x1 - x0).ceil() as usize + 2 * margin;
    let h = (y1 - y0).ceil() as usize + 2 * margin;
    let mut mask = Image::new(h, w, 1);
    for g in glyphs {
        if g.width == 0 || g.height == 0 {
            continue;
        }
        let (_, coverage) = font.rasterize_config(g.key);
        let gx = (g.x - x0) as usize + margin;
        let gy = (g.y - y0) as usize + margin;
        for py in 0..g.height {
            for px in 0..g.width {
                let v = coverage[py * g.width + px] as f32 / 255.0;
                let cur = mask.get(gy + py, gx + px, 0);
                // overlapping glyphs accumulate up to full coverage
                mask.set(gy + py, gx + px, 0, (cur + v).min(1.0));
            }
        }
    }
    Some(mask)
}

/// Rotate a mask by an arbitrary angle about its center; output canvas is
/// the rotated bounding box, background zero.
fn rotate_mask(mask: &Image, angle_deg: f64) -> Image {
    let angle = angle_deg.rem_euclid(360.0);
    if angle == 0.0 {
        return mask.clone();
    }
    let rad = angle.to_radians();
    let (sin, cos) = (rad.sin() as f32, rad.cos() as f32);
    let (h, w) = (mask.h as f32, mask.w as f32);
    let ow = (w * cos.abs() + h * sin.abs()).ceil() as usize;
    let oh = (w * sin.abs() + h * cos.abs()).ceil() as usize;
    let (cx, cy) = (w / 2.0, h / 2.0);
    let (ocx, ocy) = (ow as f32 / 2.0, oh as f32 / 2.0);
    let mut out = Image::new(oh, ow, 1);
    for y in 0..oh {
        for x in 0..ow {
            // inverse map: rotate output coordinates back into the source
            let rx = x as f32 + 0.5 - ocx;
            let ry = y as f32 + 0.5 - ocy;
            let sx = cos * rx + sin * ry + cx - 0.5;
            let sy = -sin * rx + cos * ry + cy - 0.5;
            if sx >= -0.5 && sx <= w - 0.5 && sy >= -0.5 && sy <= h - 0.5 {
                out.set(y, x, 0, mask.sample_bilinear(sy, sx, 0));
            }
        }
    }
    out
}

/// Render a text sample onto a canvas. `background` supplies scene pixels;
/// `None` fills with the sample's background color. The mask placement is
/// drawn from the seed. Retries with a smaller face (at most 5 times) when
/// the rotated text does not fit.
pub fn render_text_image(
    sample: &TextSample,
    canvas: (usize, usize),
    background: Option<&Image>,
    rng_seed: u64,
) -> Result<Image> {
    sample.validate()?;
    let (ch, cw) = canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut size = sample.size_px as f32;
    for _attempt in 0..=5 {
        let Some(mask) = render_mask(&sample.text, sample.font_id, size) else {
            return Err(Error::Generation(format!(
                "text {:?} produced no glyphs at size {size}",
                sample.text
            )));
        };
        let rotated = rotate_mask(&mask, sample.orientation_deg);
        if rotated.h <= ch && rotated.w <= cw {
            let mut out = match background {
                Some(bg) => {
                    if bg.h != ch || bg.w != cw || bg.c != 3 {
                        return Err(Error::dimension(format!(
                            "background {}x{}x{} does not match canvas {ch}x{cw}",
                            bg.h, bg.w, bg.c
                        )));
                    }
                    bg.clone()
                }
                None => {
                    let mut img = Image::new(ch, cw, 3);
                    for y in 0..ch {
                        for x in 0..cw {
                            for c in 0..3 {
                                img.set(y, x, c, sample.bg[c]);
                            }
                        }
                    }
                    img
                }
            };
            let y0 = rng.random_range(0..=ch - rotated.h);
            let x0 = rng.random_range(0..=cw - rotated.w);
            for y in 0..rotated.h {
                for x in 0..rotated.w {
                    let a = rotated.get(y, x, 0);
                    if a > 0.0 {
                        for c in 0..3 {
                            let v = out.get(y0 + y, x0 + x, c);
                            out.set(y0 + y, x0 + x, c, v * (1.0 - a) + sample.fg[c] * a);
                        }
                    }
                }
            }
            return Ok(out);
        }
        size *= 0.8;
        if size < 8.0 {
            break;
        }
    }
    Err(Error::Generation(format!(
        "text {:?} (font {}, {} px, {:.1} deg) does not fit canvas {ch}x{cw} after retries",
        sample.text, sample.font_id, sample.size_px, sample.orientation_deg
    )))
}

/// One pre-turbulence degradation component.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradeComponent {
    pub enabled: bool,
    /// Chance the component fires for a given image.
    pub probability: f64,
    pub lo: f64,
    pub hi: f64,
}

impl DegradeComponent {
    fn new(lo: f64, hi: f64) -> Self {
        DegradeComponent {
            enabled: true,
            probability: 0.5,
            lo,
            hi,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Option<f64> {
        if !self.enabled {
            return None;
        }
        // consume the coin flip and the magnitude unconditionally so that
        // toggling one component never shifts another's random stream
        let fire = rng.random_range(0.0..1.0) < self.probability;
        let v = if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        };
        fire.then_some(v)
    }
}

/// Degradations applied before the simulator, in fixed order
/// blur -> noise -> brightness.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeConfig {
    pub blur: DegradeComponent,
    pub noise: DegradeComponent,
    pub brightness: DegradeComponent,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        DegradeConfig {
            blur: DegradeComponent::new(0.5, 1.5),
            noise: DegradeComponent::new(0.01, 0.05),
            brightness: DegradeComponent::new(0.8, 1.2),
        }
    }
}

/// Apply a random subset of the enabled degradations; result clipped to
/// [0, 1]. Deterministic per seed.
pub fn degrade(image: &Image, cfg: &DegradeConfig, rng_seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = image.clone();
    if let Some(sigma) = cfg.blur.sample(&mut rng) {
        out = gaussian_blur(&out, sigma as f32);
    }
    if let Some(sigma) = cfg.noise.sample(&mut rng) {
        let normal = Normal::new(0.0f64, sigma).expect("noise sigma positive");
        for v in &mut out.data {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    if let Some(gain) = cfg.brightness.sample(&mut rng) {
        for v in &mut out.data {
            *v *= gain as f32;
        }
    }
    out.clip();
    out
}

// Source corpus proportions the desk-scale splits preserve.
const CLEAN_TOTAL: f64 = 8706.0;
const SCENE_TOTAL: f64 = 2569.0;
const GRAND_TOTAL: f64 = CLEAN_TOTAL + SCENE_TOTAL;
const PRETRAIN_TOTAL: f64 = 9275.0;
const PRETRAIN_CLEAN: f64 = 7706.0;

/// Entry counts per (domain, split), scaled from the reference corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub pretrain_clean: usize,
    pub pretrain_scene: usize,
    pub finetune_clean: usize,
    pub finetune_scene: usize,
}

impl SplitCounts {
    pub fn for_total(total: usize) -> SplitCounts {
        let t = total as f64;
        let clean = ((t * CLEAN_TOTAL / GRAND_TOTAL).round() as usize).min(total);
        let scene = total - clean;
        let pretrain = ((t * PRETRAIN_TOTAL / GRAND_TOTAL).round() as usize).min(total);
        let pc = (((pretrain as f64) * PRETRAIN_CLEAN / PRETRAIN_TOTAL).round() as usize)
            .min(clean)
            .min(pretrain);
        let ps = (pretrain - pc).min(scene);
        SplitCounts {
            pretrain_clean: pc,
            pretrain_scene: ps,
            finetune_clean: clean - pc,
            finetune_scene: scene - ps,
        }
    }

    pub fn clean(&self) -> usize {
        self.pretrain_clean + self.finetune_clean
    }

    pub fn scene(&self) -> usize {
        self.pretrain_scene + self.finetune_scene
    }

    pub fn pretrain(&self) -> usize {
        self.pretrain_clean + self.pretrain_scene
    }

    pub fn finetune(&self) -> usize {
        self.finetune_clean + self.finetune_scene
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Clean,
    Scene,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    Finetune,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Sequence directory, relative to the manifest.
    pub dir: String,
    pub domain: Domain,
    pub split: Split,
    pub params_path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Number of sequences to generate.
    pub total: usize,
    /// Canvas height and width of every ground-truth image.
    pub canvas: (usize, usize),
    /// Degraded frames per sequence.
    pub n_frames: usize,
    /// Text face size range in pixels.
    pub size_px: (usize, usize),
    /// Word length bounds (inclusive) drawn from the bundled list.
    pub word_len: (usize, usize),
    pub degrade: DegradeConfig,
    pub turbulence: ParamRanges,
    pub sim: SimConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            total: 30,
            canvas: (64, 64),
            n_frames: 10,
            size_px: (16, 34),
            word_len: (3, 12),
            degrade: DegradeConfig::default(),
            turbulence: ParamRanges::default(),
            sim: SimConfig {
                noise_sigma: (0.005, 0.03),
                ..Default::default()
            },
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total == 0 {
            return Err(Error::config("dataset total must be >= 1"));
        }
        if self.canvas.0 < 16 || self.canvas.1 < 16 {
            return Err(Error::config("canvas must be at least 16x16"));
        }
        if self.n_frames == 0 {
            return Err(Error::config("n_frames must be >= 1"));
        }
        if self.size_px.0 < 8 || self.size_px.0 > self.size_px.1 {
            return Err(Error::config(format!(
                "size_px range invalid: {:?}",
                self.size_px
            )));
        }
        if self.word_len.0 < 3 || self.word_len.1 > 12 || self.word_len.0 > self.word_len.1 {
            return Err(Error::config(format!(
                "word_len must lie within [3, 12]: {:?}",
                self.word_len
            )));
        }
        Ok(())
    }
}

fn list_scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Draw a word, style and colors for one entry. Words whose rotated extent
/// cannot fit the canvas even at the smallest face are filtered out.
fn draw_sample(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> TextSample {
    let budget = (cfg.canvas.0.min(cfg.canvas.1) as f64 - 4.0).max(8.0);
    let min_size = cfg.size_px.0 as f64;
    let fits = |len: usize| -> bool {
        let w = 0.65 * min_size * len as f64;
        let h = 1.25 * min_size;
        (w * w + h * h).sqrt() <= budget
    };
    let mut candidates: Vec<&&str> = WORDS
        .iter()
        .filter(|w| w.len() >= cfg.word_len.0 && w.len() <= cfg.word_len.1 && fits(w.len()))
        .collect();
    if candidates.is_empty() {
        // canvas too tight for the configured lengths: take the shortest
        let min_len = WORDS.iter().map(|w| w.len()).min().unwrap_or(3);
        candidates = WORDS.iter().filter(|w| w.len() == min_len).collect();
    }
    let word = candidates[rng.random_range(0..candidates.len())];
    let dark_text = rng.random_range(0.0..1.0) < 0.7;
    let (fg_base, bg_base) = if dark_text { (0.05, 0.95) } else { (0.95, 0.05) };
    let jitter = |rng: &mut ChaCha8Rng, base: f32| -> [f32; 3] {
        [
            (base + rng.random_range(-0.05..0.05f32)).clamp(0.0, 1.0),
            (base + rng.random_range(-0.05..0.05f32)).clamp(0.0, 1.0),
            (base + rng.random_range(-0.05..0.05f32)).clamp(0.0, 1.0),
        ]
    };
    TextSample {
        text: word.to_string(),
        font_id: rng.random_range(0..FONT_COUNT),
        size_px: rng.random_range(cfg.size_px.0..=cfg.size_px.1),
        orientation_deg: rng.random_range(0.0..360.0),
        fg: jitter(rng, fg_base),
        bg: jitter(rng, bg_base),
    }
}

/// Random canvas-sized crop of a scene image, resizing up when needed.
fn scene_crop(scene: &Image, canvas: (usize, usize), rng: &mut ChaCha8Rng) -> Result<Image> {
    let (ch, cw) = canvas;
    let scaled = if scene.h < ch || scene.w < cw {
        scene.resize_bilinear(ch.max(scene.h), cw.max(scene.w))
    } else {
        scene.clone()
    };
    let y0 = rng.random_range(0..=scaled.h - ch);
    let x0 = rng.random_range(0..=scaled.w - cw);
    scaled.crop(y0, x0, ch, cw)
}

/// Generate every sequence, write them under `out_dir/<split>/<id>/` and
/// return (and persist) the manifest. Entry i derives its seed as
/// `rng_seed + i`, so outputs are reproducible and order-independent.
pub fn build_dataset(
    cfg: &DatasetConfig,
    scene_dir: Option<&Path>,
    out_dir: &Path,
    rng_seed: u64,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let counts = SplitCounts::for_total(cfg.total);
    let scene_files = if counts.scene() > 0 {
        let dir = scene_dir.ok_or_else(|| {
            Error::config(format!(
                "{} scene entries requested but no scene directory given",
                counts.scene()
            ))
        })?;
        let files = list_scene_files(dir)?;
        if files.is_empty() {
            return Err(Error::config(format!(
                "scene directory {} has no readable images",
                dir.display()
            )));
        }
        files
    } else {
        Vec::new()
    };

    // deterministic entry order: pretrain clean, pretrain scene, finetune
    // clean, finetune scene
    let mut plan = Vec::with_capacity(cfg.total);
    for _ in 0..counts.pretrain_clean {
        plan.push((Split::Pretrain, Domain::Clean));
    }
    for _ in 0..counts.pretrain_scene {
        plan.push((Split::Pretrain, Domain::Scene));
    }
    for _ in 0..counts.finetune_clean {
        plan.push((Split::Finetune, Domain::Clean));
    }
    for _ in 0..counts.finetune_scene {
        plan.push((Split::Finetune, Domain::Scene));
    }

    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(cfg.total);
    for (i, &(split, domain)) in plan.iter().enumerate() {
        let entry_seed = rng_seed.wrapping_add(i as u64);
        // a drawn word may still fail to fit once rotated; re-draw with a
        // bumped sub-seed so the output stays deterministic
        let mut rendered = None;
        let mut last_err = None;
        for attempt in 0..20u64 {
            let sub_seed = entry_seed.wrapping_add(attempt.wrapping_mul(0x00c6_a4a7_935b_d1e9));
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
            let sample = draw_sample(cfg, &mut rng);
            let background = match domain {
                Domain::Clean => None,
                Domain::Scene => {
                    let file = &scene_files[rng.random_range(0..scene_files.len())];
                    let scene = Image::load_png(file)?;
                    Some(scene_crop(&scene, cfg.canvas, &mut rng)?)
                }
            };
            match render_text_image(&sample, cfg.canvas, background.as_ref(), sub_seed ^ 0x52_45)
            {
                Ok(img) => {
                    rendered = Some(img);
                    break;
                }
                Err(e @ Error::Generation(_)) => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        let rendered = match rendered {
            Some(img) => img,
            None => return Err(last_err.expect("generation retries recorded an error")),
        };
        let degraded = degrade(&rendered, &cfg.degrade, entry_seed ^ 0x44_45);
        let params = sample_params(&cfg.turbulence, entry_seed ^ 0x54_50)?;
        let seq = simulate_sequence(&degraded, &params, cfg.n_frames, entry_seed, &cfg.sim)?;
        // the sharp render is the restoration target; the degraded image is
        // what the simulator distorts
        let seq = crate::turbsim::FrameSequence {
            ground_truth: Some(rendered),
            ..seq
        };
        let id = format!("{i:06}");
        let rel_dir = format!("{}/{id}", split.dir_name());
        let dir = out_dir.join(&rel_dir);
        crate::turbsim::save_sequence(&seq, &cfg.sim, &dir)?;
        entries.push(ManifestEntry {
            id,
            dir: rel_dir.clone(),
            domain,
            split,
            params_path: format!("{rel_dir}/params.json"),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed: rng_seed,
        entries,
    };
    fs::write(
        out_dir.join(MANIFEST_NAME),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn load_manifest(out_dir: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&fs::read(out_dir.join(MANIFEST_NAME))?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "manifest version {} unsupported (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for e in &manifest.entries {
        if !seen.insert(&e.dir) {
            return Err(Error::Format(format!("duplicate manifest path {}", e.dir)));
        }
    }
    Ok(manifest)
}
