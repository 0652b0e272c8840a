//! Raster containers and basic geometric/raster ops. `ImageF` stores planar
//! (channel-major) f64 data in [0,1]; `BinaryMask` is a per-pixel bool raster
//! with the morphology needed by segmentation.

use crate::error::{F2pError, F2pResult};
use std::path::Path;

/// Rec. 601 luminance weights, used for grayscale supervision targets.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];
/// Ridge-oriented channel weights (blue > green > red): blue carries the most
/// surface ridge detail, red is dominated by smooth subsurface response.
pub const RIDGE_WEIGHTS: [f64; 3] = [0.15, 0.35, 0.50];

/// Multi-channel float raster, planar layout: `data[c*h*w + y*w + x]`.
/// Producing operations keep every value finite and in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Border policy for resampling ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fill {
    /// Clamp sample coordinates to the image rectangle.
    Replicate,
    /// Out-of-bounds samples read as 0.
    Black,
}

impl ImageF {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        ImageF { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut img = ImageF::zeros(height, width, channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    img.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        img
    }

    /// Single-channel image from a plane buffer.
    pub fn from_plane(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width);
        ImageF { height, width, channels: 1, data }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Borrow one channel plane.
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Extract channel `c` as a new single-channel image.
    pub fn channel(&self, c: usize) -> ImageF {
        ImageF::from_plane(self.height, self.width, self.plane(c).to_vec())
    }

    pub fn same_size(&self, other: &ImageF) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Weighted grayscale: (w_R·R + w_G·G + w_B·B) / Σw, clamped to [0,1].
    pub fn to_weighted_grayscale(&self, weights: [f64; 3]) -> F2pResult<ImageF> {
        if self.channels != 3 {
            return Err(F2pError::invalid("to_weighted_grayscale needs a 3-channel image"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(F2pError::invalid("grayscale weights must be finite and nonnegative"));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(F2pError::invalid("grayscale weights sum to zero"));
        }
        let n = self.height * self.width;
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let v = (weights[0] * r[i] + weights[1] * g[i] + weights[2] * b[i]) / sum;
            out.push(v.clamp(0.0, 1.0));
        }
        Ok(ImageF::from_plane(self.height, self.width, out))
    }

    /// Luminance grayscale (identity for single-channel images).
    pub fn to_luma(&self) -> ImageF {
        if self.channels == 1 {
            self.clone()
        } else {
            self.to_weighted_grayscale(LUMA_WEIGHTS).expect("luma weights are valid")
        }
    }

    /// Bilinear sample at real coordinates (pixel centers at integers).
    pub fn sample_bilinear(&self, c: usize, y: f64, x: f64, fill: Fill) -> f64 {
        let read = |yy: i64, xx: i64| -> f64 {
            match fill {
                Fill::Replicate => {
                    let yy = yy.clamp(0, self.height as i64 - 1) as usize;
                    let xx = xx.clamp(0, self.width as i64 - 1) as usize;
                    self.get(c, yy, xx)
                }
                Fill::Black => {
                    if yy < 0 || xx < 0 || yy >= self.height as i64 || xx >= self.width as i64 {
                        0.0
                    } else {
                        self.get(c, yy as usize, xx as usize)
                    }
                }
            }
        };
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let (y0, x0) = (y0 as i64, x0 as i64);
        let v00 = read(y0, x0);
        let v01 = read(y0, x0 + 1);
        let v10 = read(y0 + 1, x0);
        let v11 = read(y0 + 1, x0 + 1);
        v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
    }

    /// Bilinear resize to (h2, w2), pixel-center convention.
    pub fn resize_bilinear(&self, h2: usize, w2: usize) -> ImageF {
        assert!(h2 > 0 && w2 > 0);
        let sy = self.height as f64 / h2 as f64;
        let sx = self.width as f64 / w2 as f64;
        ImageF::from_fn(h2, w2, self.channels, |c, y, x| {
            let syy = (y as f64 + 0.5) * sy - 0.5;
            let sxx = (x as f64 + 0.5) * sx - 0.5;
            self.sample_bilinear(c, syy, sxx, Fill::Replicate).clamp(0.0, 1.0)
        })
    }

    /// Shift content by (dx, dy): output(x,y) = input(x−dx, y−dy), bilinear.
    pub fn translate_bilinear(&self, dx: f64, dy: f64, fill: Fill) -> ImageF {
        ImageF::from_fn(self.height, self.width, self.channels, |c, y, x| {
            self.sample_bilinear(c, y as f64 - dy, x as f64 - dx, fill).clamp(0.0, 1.0)
        })
    }

    /// Rotate by `angle` radians counter-clockwise about the image center.
    pub fn rotate_bilinear(&self, angle: f64, fill: Fill) -> ImageF {
        let cy = (self.height as f64 - 1.0) / 2.0;
        let cx = (self.width as f64 - 1.0) / 2.0;
        let (s, c0) = angle.sin_cos();
        ImageF::from_fn(self.height, self.width, self.channels, |c, y, x| {
            // Inverse map: rotate output coords by −angle (y axis points down,
            // so CCW in conventional orientation is CW in raster coords).
            let ry = y as f64 - cy;
            let rx = x as f64 - cx;
            let sy = cy + (s * rx + c0 * ry);
            let sx = cx + (c0 * rx - s * ry);
            self.sample_bilinear(c, sy, sx, fill).clamp(0.0, 1.0)
        })
    }

    /// Symmetric border crop.
    pub fn crop_border(&self, border: usize) -> F2pResult<ImageF> {
        if 2 * border >= self.height || 2 * border >= self.width {
            return Err(F2pError::invalid(format!(
                "crop border {border} leaves no pixels on {}x{}",
                self.height, self.width
            )));
        }
        let h2 = self.height - 2 * border;
        let w2 = self.width - 2 * border;
        Ok(ImageF::from_fn(h2, w2, self.channels, |c, y, x| {
            self.get(c, y + border, x + border)
        }))
    }

    /// Aspect-preserving resize so the max dimension equals `side`, centered on
    /// a black square canvas. The mask marks content (non-padding) pixels.
    pub fn pad_to_square(&self, side: usize) -> F2pResult<(ImageF, BinaryMask)> {
        if side == 0 {
            return Err(F2pError::invalid("pad_to_square side must be positive"));
        }
        let (h, w) = (self.height, self.width);
        let (nh, nw) = if h >= w {
            (side, ((w * side) as f64 / h as f64).round().max(1.0) as usize)
        } else {
            (((h * side) as f64 / w as f64).round().max(1.0) as usize, side)
        };
        let resized = self.resize_bilinear(nh, nw);
        let oy = (side - nh) / 2;
        let ox = (side - nw) / 2;
        let mut out = ImageF::zeros(side, side, self.channels);
        let mut mask = BinaryMask::all(side, side, false);
        for c in 0..self.channels {
            for y in 0..nh {
                for x in 0..nw {
                    out.set(c, y + oy, x + ox, resized.get(c, y, x));
                }
            }
        }
        for y in 0..nh {
            for x in 0..nw {
                mask.set(y + oy, x + ox, true);
            }
        }
        Ok((out, mask))
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Load an 8-bit PNG; RGB(A) becomes 3 channels (alpha dropped), gray 1.
    pub fn load_png(path: impl AsRef<Path>) -> F2pResult<ImageF> {
        let dynimg = image::open(path.as_ref()).map_err(|e| F2pError::Codec(e.to_string()))?;
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        match dynimg {
            image::DynamicImage::ImageLuma8(buf) => {
                let data = buf.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
                Ok(ImageF::from_plane(h, w, data))
            }
            image::DynamicImage::ImageLumaA8(buf) => {
                let data = buf.as_raw().chunks_exact(2).map(|px| px[0] as f64 / 255.0).collect();
                Ok(ImageF::from_plane(h, w, data))
            }
            other => {
                let rgb = other.to_rgb8();
                let mut img = ImageF::zeros(h, w, 3);
                for (x, y, px) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        img.set(c, y as usize, x as usize, px.0[c] as f64 / 255.0);
                    }
                }
                Ok(img)
            }
        }
    }

    /// Save as 8-bit PNG (gray or RGB), values mapped by round(v·255).
    pub fn save_png(&self, path: impl AsRef<Path>) -> F2pResult<()> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| q(v)).collect();
                let img = image::GrayImage::from_raw(w, h, buf).expect("buffer size");
                img.save(path.as_ref()).map_err(|e| F2pError::Codec(e.to_string()))
            }
            3 => {
                let n = self.height * self.width;
                let mut buf = Vec::with_capacity(n * 3);
                for i in 0..n {
                    buf.push(q(self.data[i]));
                    buf.push(q(self.data[n + i]));
                    buf.push(q(self.data[2 * n + i]));
                }
                let img = image::RgbImage::from_raw(w, h, buf).expect("buffer size");
                img.save(path.as_ref()).map_err(|e| F2pError::Codec(e.to_string()))
            }
            _ => unreachable!("channels invariant"),
        }
    }
}

/// Per-pixel boolean mask; same dimensions as the raster it annotates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn all(height: usize, width: usize, value: bool) -> Self {
        BinaryMask { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = BinaryMask::all(height, width, false);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x);
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Centroid of true pixels (x, y); None when empty.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Integer-pixel translation; vacated pixels become false.
    pub fn translate(&self, dx: i64, dy: i64) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| {
            let sy = y as i64 - dy;
            let sx = x as i64 - dx;
            sy >= 0 && sx >= 0 && (sy as usize) < self.height && (sx as usize) < self.width
                && self.get(sy as usize, sx as usize)
        })
    }

    /// Nearest-neighbor rotation about the center (matches
    /// `ImageF::rotate_bilinear` geometry); outside reads as false.
    pub fn rotate_nearest(&self, angle: f64) -> BinaryMask {
        let cy = (self.height as f64 - 1.0) / 2.0;
        let cx = (self.width as f64 - 1.0) / 2.0;
        let (s, c0) = angle.sin_cos();
        BinaryMask::from_fn(self.height, self.width, |y, x| {
            let ry = y as f64 - cy;
            let rx = x as f64 - cx;
            let sy = (cy + (s * rx + c0 * ry)).round();
            let sx = (cx + (c0 * rx - s * ry)).round();
            sy >= 0.0 && sx >= 0.0 && sy < self.height as f64 && sx < self.width as f64
                && self.get(sy as usize, sx as usize)
        })
    }

    pub fn crop_border(&self, border: usize) -> F2pResult<BinaryMask> {
        if 2 * border >= self.height || 2 * border >= self.width {
            return Err(F2pError::invalid("mask crop exceeds size"));
        }
        let h2 = self.height - 2 * border;
        let w2 = self.width - 2 * border;
        Ok(BinaryMask::from_fn(h2, w2, |y, x| self.get(y + border, x + border)))
    }

    fn disk_offsets(radius: usize) -> Vec<(i64, i64)> {
        let r = radius as i64;
        let mut offs = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    offs.push((dy, dx));
                }
            }
        }
        offs
    }

    pub fn dilate_disk(&self, radius: usize) -> BinaryMask {
        let offs = Self::disk_offsets(radius);
        let mut out = BinaryMask::all(self.height, self.width, false);
        for y in 0..self.height as i64 {
            for x in 0..self.width as i64 {
                if self.get(y as usize, x as usize) {
                    for &(dy, dx) in &offs {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < self.height && (xx as usize) < self.width {
                            out.set(yy as usize, xx as usize, true);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn erode_disk(&self, radius: usize) -> BinaryMask {
        let offs = Self::disk_offsets(radius);
        BinaryMask::from_fn(self.height, self.width, |y, x| {
            offs.iter().all(|&(dy, dx)| {
                let yy = y as i64 + dy;
                let xx = x as i64 + dx;
                // Treat out-of-bounds as true so edge-touching regions survive.
                yy < 0 || xx < 0 || yy >= self.height as i64 || xx >= self.width as i64
                    || self.get(yy as usize, xx as usize)
            })
        })
    }

    /// Morphological closing (dilate then erode) with a disk element.
    pub fn close_disk(&self, radius: usize) -> BinaryMask {
        self.dilate_disk(radius).erode_disk(radius)
    }

    /// Keep only the largest 8-connected component; None when empty.
    pub fn largest_component(&self) -> Option<BinaryMask> {
        let (h, w) = (self.height, self.width);
        let mut label = vec![0u32; h * w]; // 0 = unvisited/false
        let mut best: (u32, usize) = (0, 0); // (label, size)
        let mut next = 1u32;
        let mut stack = Vec::new();
        for start in 0..h * w {
            if !self.data[start] || label[start] != 0 {
                continue;
            }
            let id = next;
            next += 1;
            let mut size = 0usize;
            stack.push(start);
            label[start] = id;
            while let Some(i) = stack.pop() {
                size += 1;
                let (y, x) = (i / w, i % w);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                            continue;
                        }
                        let j = yy as usize * w + xx as usize;
                        if self.data[j] && label[j] == 0 {
                            label[j] = id;
                            stack.push(j);
                        }
                    }
                }
            }
            if size > best.1 {
                best = (id, size);
            }
        }
        if best.1 == 0 {
            return None;
        }
        Some(BinaryMask {
            height: h,
            width: w,
            data: label.iter().map(|&l| l == best.0).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_grayscale_mean_and_projection() {
        let img = ImageF::from_fn(1, 1, 3, |c, _, _| [0.3, 0.6, 0.9][c]);
        let mean = img.to_weighted_grayscale([1.0, 1.0, 1.0]).unwrap();
        assert!((mean.get(0, 0, 0) - 0.6).abs() < 1e-12);
        let blue = img.to_weighted_grayscale([0.0, 0.0, 1.0]).unwrap();
        assert!((blue.get(0, 0, 0) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn weighted_grayscale_ridge_weights_oracle() {
        // 2x2 image, per-pixel dot product with (0.15,0.35,0.50) (sum 1).
        let r = [0.1, 0.5, 0.9, 0.2];
        let g = [0.3, 0.2, 0.8, 0.6];
        let b = [0.7, 0.9, 0.1, 0.4];
        let img = ImageF::from_fn(2, 2, 3, |c, y, x| [r, g, b][c][y * 2 + x]);
        let out = img.to_weighted_grayscale(RIDGE_WEIGHTS).unwrap();
        for i in 0..4 {
            let want = 0.15 * r[i] + 0.35 * g[i] + 0.50 * b[i];
            assert!((out.data[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_grayscale_rejects_zero_weights() {
        let img = ImageF::zeros(2, 2, 3);
        assert!(img.to_weighted_grayscale([0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn pad_to_square_identity() {
        let img = ImageF::from_fn(64, 64, 1, |_, y, x| ((y * 7 + x * 3) % 11) as f64 / 10.0);
        let (out, mask) = img.pad_to_square(64).unwrap();
        assert_eq!(out.height, 64);
        assert_eq!(mask.count(), 64 * 64);
        for i in 0..out.data.len() {
            assert!((out.data[i] - img.data[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn pad_to_square_300x400() {
        // 300x400 scaled by 512/400 = 1.28 -> 384x512 content, 64-px bands.
        let img = ImageF::from_fn(300, 400, 1, |_, y, x| ((y + x) % 2) as f64);
        let (out, mask) = img.pad_to_square(512).unwrap();
        assert_eq!((out.height, out.width), (512, 512));
        for x in 0..512 {
            assert!(!mask.get(0, x));
            assert!(!mask.get(63, x));
            assert!(mask.get(64, x));
            assert!(mask.get(447, x));
            assert!(!mask.get(448, x));
            assert_eq!(out.get(0, 10, x), 0.0);
        }
        assert_eq!(mask.count(), 384 * 512);
    }

    #[test]
    fn pad_to_square_degenerate_1x1() {
        let img = ImageF::from_fn(1, 1, 1, |_, _, _| 0.75);
        let (out, mask) = img.pad_to_square(8).unwrap();
        assert_eq!(mask.count(), 64);
        assert!(out.data.iter().all(|&v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn png_roundtrip_quantization() {
        let dir = std::env::temp_dir().join("f2p_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let img = ImageF::from_fn(9, 13, 3, |c, y, x| ((c * 37 + y * 5 + x * 11) % 97) as f64 / 96.0);
        let path = dir.join("roundtrip.png");
        img.save_png(&path).unwrap();
        let back = ImageF::load_png(&path).unwrap();
        assert_eq!((back.height, back.width, back.channels), (9, 13, 3));
        for i in 0..img.data.len() {
            assert!((img.data[i] - back.data[i]).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn translate_integer_shift() {
        let img = ImageF::from_fn(16, 16, 1, |_, y, x| ((y * 16 + x) % 7) as f64 / 6.0);
        let out = img.translate_bilinear(3.0, 0.0, Fill::Black);
        for y in 0..16 {
            for x in 3..16 {
                assert!((out.get(0, y, x) - img.get(0, y, x - 3)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotate_roundtrip_interior() {
        let img = ImageF::from_fn(32, 32, 1, |_, y, x| {
            0.5 + 0.4 * ((y as f64) * 0.4).sin() * ((x as f64) * 0.3).cos()
        });
        let there = img.rotate_bilinear(0.3, Fill::Replicate);
        let back = there.rotate_bilinear(-0.3, Fill::Replicate);
        for y in 10..22 {
            for x in 10..22 {
                assert!((back.get(0, y, x) - img.get(0, y, x)).abs() < 0.05);
            }
        }
    }

    #[test]
    fn mask_closing_fills_pinholes() {
        let mut m = BinaryMask::all(21, 21, false);
        for y in 5..16 {
            for x in 5..16 {
                m.set(y, x, true);
            }
        }
        m.set(10, 10, false); // pinhole
        let closed = m.close_disk(2);
        assert!(closed.get(10, 10));
        assert!(!closed.get(0, 0));
    }

    #[test]
    fn largest_component_picks_biggest() {
        let mut m = BinaryMask::all(10, 20, false);
        for y in 1..4 {
            for x in 1..4 {
                m.set(y, x, true); // 9 px blob
            }
        }
        for y in 4..9 {
            for x in 10..19 {
                m.set(y, x, true); // 45 px blob
            }
        }
        let big = m.largest_component().unwrap();
        assert_eq!(big.count(), 45);
        assert!(big.get(6, 12));
        assert!(!big.get(2, 2));
    }

    #[test]
    fn centroid_arithmetic() {
        let mut m = BinaryMask::all(5, 5, false);
        m.set(1, 2, true);
        m.set(3, 4, true);
        let (cx, cy) = m.centroid().unwrap();
        assert!((cx - 3.0).abs() < 1e-12);
        assert!((cy - 2.0).abs() < 1e-12);
    }
}
