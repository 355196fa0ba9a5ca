//! The universal image carrier: H x W x C, `f32` values in `[0, 1]`,
//! row-major HWC layout, plus the raster helpers the rest of the crate
//! leans on (PNG I/O, Gaussian blur, rotations, bilinear resampling).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Image {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, v: f32) -> Self {
        Image {
            h,
            w,
            c,
            data: vec![v; h * w * c],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f32) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    pub fn clip(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f32 {
        self.data.iter().sum::<f32>() / self.data.len() as f32
    }

    /// Bilinear sample with clamp-to-edge, per channel.
    pub fn sample_bilinear(&self, y: f32, x: f32, ch: usize) -> f32 {
        let xc = x.clamp(0.0, (self.w - 1) as f32);
        let yc = y.clamp(0.0, (self.h - 1) as f32);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = xc - x0 as f32;
        let fy = yc - y0 as f32;
        let v00 = self.get(y0, x0, ch);
        let v01 = self.get(y0, x1, ch);
        let v10 = self.get(y1, x0, ch);
        let v11 = self.get(y1, x1, ch);
        v00 * (1.0 - fy) * (1.0 - fx)
            + v01 * (1.0 - fy) * fx
            + v10 * fy * (1.0 - fx)
            + v11 * fy * fx
    }

    /// Rotate by `k` quarter turns counter-clockwise; exact index permutation.
    pub fn rot90(&self, k: usize) -> Image {
        let k = k % 4;
        if k == 0 {
            return self.clone();
        }
        let (h, w, c) = (self.h, self.w, self.c);
        let (oh, ow) = if k % 2 == 0 { (h, w) } else { (w, h) };
        let mut out = Image::new(oh, ow, c);
        for y in 0..h {
            for x in 0..w {
                let (oy, ox) = match k {
                    1 => (w - 1 - x, y),
                    2 => (h - 1 - y, w - 1 - x),
                    3 => (x, h - 1 - y),
                    _ => unreachable!(),
                };
                for ch in 0..c {
                    out.set(oy, ox, ch, self.get(y, x, ch));
                }
            }
        }
        out
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.h || x0 + w > self.w {
            return Err(Error::dimension(format!(
                "crop [{y0}+{h}, {x0}+{w}] exceeds {}x{}",
                self.h, self.w
            )));
        }
        let mut out = Image::new(h, w, self.c);
        for y in 0..h {
            let src = ((y0 + y) * self.w + x0) * self.c;
            let dst = y * w * self.c;
            out.data[dst..dst + w * self.c].copy_from_slice(&self.data[src..src + w * self.c]);
        }
        Ok(out)
    }

    /// Reflect-pad to at least (h, w); returns the padded image and the
    /// offset of the original's top-left corner inside it.
    pub fn reflect_pad_to(&self, h: usize, w: usize) -> (Image, (usize, usize)) {
        if self.h >= h && self.w >= w {
            return (self.clone(), (0, 0));
        }
        let th = self.h.max(h);
        let tw = self.w.max(w);
        let oy = (th - self.h) / 2;
        let ox = (tw - self.w) / 2;
        let mut out = Image::new(th, tw, self.c);
        for y in 0..th {
            let sy = reflect_index(y as isize - oy as isize, self.h);
            for x in 0..tw {
                let sx = reflect_index(x as isize - ox as isize, self.w);
                for ch in 0..self.c {
                    out.set(y, x, ch, self.get(sy, sx, ch));
                }
            }
        }
        (out, (oy, ox))
    }

    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Image {
        let mut out = Image::new(oh, ow, self.c);
        let sy = self.h as f32 / oh as f32;
        let sx = self.w as f32 / ow as f32;
        for y in 0..oh {
            let fy = (y as f32 + 0.5) * sy - 0.5;
            for x in 0..ow {
                let fx = (x as f32 + 0.5) * sx - 0.5;
                for ch in 0..self.c {
                    out.set(y, x, ch, self.sample_bilinear(fy, fx, ch));
                }
            }
        }
        out
    }

    /// CHW tensor [1, C, H, W] view of this image.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let mut data = vec![0.0f32; self.data.len()];
        let plane = self.h * self.w;
        for y in 0..self.h {
            for x in 0..self.w {
                for ch in 0..self.c {
                    data[ch * plane + y * self.w + x] = self.get(y, x, ch);
                }
            }
        }
        Tensor::result(vec![1, self.c, self.h, self.w], data, false)
    }

    /// Rebuild an image from a [1, C, H, W] tensor (values not clipped).
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Image> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::dimension(format!(
                "from_tensor expects [1,C,H,W], got {s:?}"
            )));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let mut img = Image::new(h, w, c);
        let plane = h * w;
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    img.set(y, x, ch, t.data()[ch * plane + y * w + x]);
                }
            }
        }
        Ok(img)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let dyn_img = image::open(path.as_ref())?;
        let rgb = dyn_img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let mut img = Image::new(h as usize, w as usize, 3);
        for (i, p) in rgb.pixels().enumerate() {
            img.data[i * 3] = p.0[0] as f32 / 255.0;
            img.data[i * 3 + 1] = p.0[1] as f32 / 255.0;
            img.data[i * 3 + 2] = p.0[2] as f32 / 255.0;
        }
        Ok(img)
    }

    /// Save as 8-bit RGB PNG; values are clipped then rounded.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = image::RgbImage::new(self.w as u32, self.h as u32);
        for y in 0..self.h {
            for x in 0..self.w {
                let px = |ch: usize| -> u8 {
                    let v = if self.c == 1 {
                        self.get(y, x, 0)
                    } else {
                        self.get(y, x, ch)
                    };
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                };
                buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        buf.save(path.as_ref())?;
        Ok(())
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    // reflect-101 style without repeating the border sample for n > 1
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Normalized 1-D Gaussian taps with radius ceil(3 sigma).
pub fn gaussian_kernel_1d(sigma: f32) -> Vec<f32> {
    assert!(sigma > 0.0, "gaussian_kernel_1d: sigma must be positive");
    let radius = (3.0 * sigma).ceil() as usize;
    let mut taps = Vec::with_capacity(2 * radius + 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for i in 0..=2 * radius {
        let d = i as f32 - radius as f32;
        taps.push((-d * d * inv).exp());
    }
    let sum: f32 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let taps = gaussian_kernel_1d(sigma);
    let radius = taps.len() / 2;
    let (h, w, c) = (img.h, img.w, img.c);
    let mut tmp = Image::new(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, &t) in taps.iter().enumerate() {
                    let sx = (x as isize + i as isize - radius as isize).clamp(0, w as isize - 1);
                    acc += t * img.get(y, sx as usize, ch);
                }
                tmp.set(y, x, ch, acc);
            }
        }
    }
    let mut out = Image::new(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, &t) in taps.iter().enumerate() {
                    let sy = (y as isize + i as isize - radius as isize).clamp(0, h as isize - 1);
                    acc += t * tmp.get(sy as usize, x, ch);
                }
                out.set(y, x, ch, acc);
            }
        }
    }
    out
}

/// Blur a raw scalar field in place using the same separable kernel.
pub fn gaussian_blur_field(field: &mut [f32], h: usize, w: usize, sigma: f32) {
    if sigma <= 0.0 {
        return;
    }
    let taps = gaussian_kernel_1d(sigma);
    let radius = taps.len() / 2;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &t) in taps.iter().enumerate() {
                let sx = (x as isize + i as isize - radius as isize).clamp(0, w as isize - 1);
                acc += t * field[y * w + sx as usize];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &t) in taps.iter().enumerate() {
                let sy = (y as isize + i as isize - radius as isize).clamp(0, h as isize - 1);
                acc += t * tmp[sy as usize * w + x];
            }
            field[y * w + x] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rot90_four_times_is_identity() {
        let mut img = Image::new(3, 5, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f32 * 0.37).sin().abs();
        }
        let r = img.rot90(1).rot90(1).rot90(1).rot90(1);
        assert_eq!(r, img);
        assert_eq!(img.rot90(1).h, 5);
        assert_eq!(img.rot90(1).w, 3);
    }

    #[test]
    fn gaussian_kernel_normalized_and_symmetric() {
        let k = gaussian_kernel_1d(1.5);
        let sum: f32 = k.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for i in 0..k.len() / 2 {
            assert!((k[i] - k[k.len() - 1 - i]).abs() < 1e-7);
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Image::filled(8, 8, 3, 0.42);
        let b = gaussian_blur(&img, 1.2);
        for &v in &b.data {
            assert!((v - 0.42).abs() < 1e-5);
        }
    }

    #[test]
    fn tensor_roundtrip() {
        let mut img = Image::new(4, 6, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 255) as f32 / 255.0;
        }
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 4, 6]);
        let back = Image::from_tensor(&t).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn reflect_pad_centers_original() {
        let mut img = Image::new(3, 3, 1);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f32;
        }
        let (padded, (oy, ox)) = img.reflect_pad_to(7, 7);
        assert_eq!((padded.h, padded.w), (7, 7));
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(padded.get(y + oy, x + ox, 0), img.get(y, x, 0));
            }
        }
    }
}
