//! Sliding-window patch tiling and seam-free stitching.
//!
//! Patch weights are separable tents (ramps toward the patch center), so
//! overlap regions blend linearly and per-pixel normalization makes the
//! identity round-trip exact.

use crate::error::{Error, Result};
use crate::imgbuf::Image;

/// Window placement plus the per-pixel sum of raw blend weights.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub window: usize,
    pub stride: usize,
    /// Top-left corners (y, x) in row-major patch order.
    pub origins: Vec<(usize, usize)>,
    pub h: usize,
    pub w: usize,
    /// Sum of raw tent weights at each pixel; strictly positive once every
    /// pixel is covered.
    pub blend: Vec<f32>,
}

fn axis_origins(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut origins = Vec::new();
    let mut o = 0;
    while o + window <= dim {
        origins.push(o);
        if o + window == dim {
            return origins;
        }
        o += stride;
    }
    // stride overshot: clamp the final window to the far edge
    let last = dim - window;
    if origins.last() != Some(&last) {
        origins.push(last);
    }
    origins
}

/// Tent weight of position `i` inside a window: 1 at the edges, rising to
/// the center. Always positive, so normalization never divides by zero.
#[inline]
fn tent(i: usize, window: usize) -> f32 {
    (i + 1).min(window - i) as f32
}

/// Compute window origins (0, stride, 2*stride, ... plus a final clamped
/// origin) and the per-pixel blend normalizer.
pub fn tile_patches(h: usize, w: usize, window: usize, stride: usize) -> Result<PatchGrid> {
    if window == 0 || stride == 0 {
        return Err(Error::config("tile_patches: window and stride must be >= 1"));
    }
    if stride > window {
        return Err(Error::config(format!(
            "tile_patches: stride {stride} beyond window {window} leaves uncovered pixels"
        )));
    }
    if h < window || w < window {
        return Err(Error::dimension(format!(
            "tile_patches: image {h}x{w} smaller than window {window}"
        )));
    }
    let ys = axis_origins(h, window, stride);
    let xs = axis_origins(w, window, stride);
    let mut origins = Vec::with_capacity(ys.len() * xs.len());
    let mut blend = vec![0.0f32; h * w];
    for &oy in &ys {
        for &ox in &xs {
            origins.push((oy, ox));
            for py in 0..window {
                let wy = tent(py, window);
                let row = (oy + py) * w + ox;
                for px in 0..window {
                    blend[row + px] += wy * tent(px, window);
                }
            }
        }
    }
    debug_assert!(
        blend.iter().all(|&v| v > 0.0),
        "tiling must cover every pixel"
    );
    Ok(PatchGrid {
        window,
        stride,
        origins,
        h,
        w,
        blend,
    })
}

/// Weighted average of restored patches back onto the full canvas. The
/// normalized weights at each pixel sum to exactly 1 by construction.
pub fn stitch_patches(grid: &PatchGrid, patches: &[Image]) -> Result<Image> {
    if patches.len() != grid.origins.len() {
        return Err(Error::contract(format!(
            "stitch_patches: {} patches for {} origins",
            patches.len(),
            grid.origins.len()
        )));
    }
    let win = grid.window;
    let c = patches.first().map(|p| p.c).unwrap_or(3);
    for p in patches {
        if p.h != win || p.w != win || p.c != c {
            return Err(Error::dimension(format!(
                "stitch_patches: patch {}x{}x{} does not match window {win}",
                p.h, p.w, p.c
            )));
        }
    }
    let mut acc = Image::new(grid.h, grid.w, c);
    for ((oy, ox), patch) in grid.origins.iter().zip(patches) {
        for py in 0..win {
            let wy = tent(py, win);
            for px in 0..win {
                let weight = wy * tent(px, win);
                for ch in 0..c {
                    let v = acc.get(oy + py, ox + px, ch) + weight * patch.get(py, px, ch);
                    acc.set(oy + py, ox + px, ch, v);
                }
            }
        }
    }
    for y in 0..grid.h {
        for x in 0..grid.w {
            let norm = grid.blend[y * grid.w + x];
            for ch in 0..c {
                let v = acc.get(y, x, ch) / norm;
                acc.set(y, x, ch, v);
            }
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(h: usize, w: usize) -> Image {
        let mut img = Image::new(h, w, 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    img.set(y, x, ch, (((y * 7 + x * 3 + ch) % 11) as f32) / 11.0);
                }
            }
        }
        img
    }

    #[test]
    fn single_window_when_sizes_match() {
        let grid = tile_patches(128, 128, 128, 100).unwrap();
        assert_eq!(grid.origins, vec![(0, 0)]);
    }

    #[test]
    fn four_patches_at_228() {
        // 228 = 128 + 100: origins {0, 100} on both axes
        let grid = tile_patches(228, 228, 128, 100).unwrap();
        assert_eq!(grid.origins.len(), 4);
        let ys: Vec<usize> = grid.origins.iter().map(|o| o.0).collect();
        assert_eq!(ys, vec![0, 0, 100, 100]);
    }

    #[test]
    fn clamped_final_origin_at_300() {
        // per-axis origins {0, 100, 172}: 172 = 300 - 128
        let grid = tile_patches(300, 300, 128, 100).unwrap();
        assert_eq!(grid.origins.len(), 9);
        let mut xs: Vec<usize> = grid.origins.iter().map(|o| o.1).collect();
        xs.sort_unstable();
        xs.dedup();
        assert_eq!(xs, vec![0, 100, 172]);
    }

    #[test]
    fn window_larger_than_image_errors() {
        assert!(tile_patches(100, 100, 128, 100).is_err());
    }

    #[test]
    fn identity_roundtrip_within_epsilon() {
        let img = checker(97, 130);
        let grid = tile_patches(img.h, img.w, 32, 25).unwrap();
        let patches: Vec<Image> = grid
            .origins
            .iter()
            .map(|&(oy, ox)| img.crop(oy, ox, 32, 32).unwrap())
            .collect();
        let out = stitch_patches(&grid, &patches).unwrap();
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn single_patch_returned_unchanged() {
        let img = checker(32, 32);
        let grid = tile_patches(32, 32, 32, 24).unwrap();
        assert_eq!(grid.origins.len(), 1);
        let out = stitch_patches(&grid, &[img.clone()]).unwrap();
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn stride_beyond_window_rejected() {
        assert!(tile_patches(64, 64, 16, 17).is_err());
    }

    #[test]
    fn overlap_strip_blends_monotonically() {
        // two horizontally overlapping constant patches 0 and 1
        let grid = tile_patches(16, 24, 16, 8).unwrap();
        assert_eq!(grid.origins, vec![(0, 0), (0, 8)]);
        let zeros = Image::filled(16, 16, 1, 0.0);
        let ones = Image::filled(16, 16, 1, 1.0);
        let out = stitch_patches(&grid, &[zeros, ones]).unwrap();
        // overlap columns 8..16: strictly inside (0,1), monotone increasing
        let mut prev = 0.0;
        for x in 8..16 {
            let v = out.get(8, x, 0);
            assert!(v > 0.0 && v < 1.0, "column {x}: {v}");
            assert!(v > prev, "must increase toward the 1-patch");
            prev = v;
        }
        assert_eq!(out.get(8, 0, 0), 0.0);
        assert_eq!(out.get(8, 23, 0), 1.0);
    }

    #[test]
    fn mismatched_patch_count_is_contract_error() {
        let grid = tile_patches(32, 32, 16, 8).unwrap();
        assert!(stitch_patches(&grid, &[Image::new(16, 16, 3)]).is_err());
    }
}
