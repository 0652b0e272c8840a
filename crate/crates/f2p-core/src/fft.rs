//! 2-D FFT plumbing. Spectra are stored DC-centered so radial frequency masks
//! index naturally; the shift convention is `roll(floor(n/2))` per axis and is
//! undone exactly on the inverse path. Forward transform is unnormalized, the
//! inverse divides by H·W (so `inverse(forward(x)) == x`).

use crate::error::F2pResult;
use crate::image::ImageF;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

thread_local! {
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
        RefCell::new(HashMap::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cache| {
        cache
            .borrow_mut()
            .entry((len, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

/// In-place 2-D FFT over a row-major h×w complex buffer. Unnormalized in both
/// directions; callers handle the 1/(h·w) inverse scale.
pub(crate) fn fft2_inplace(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    assert_eq!(data.len(), h * w);
    let row_plan = plan(w, inverse);
    for row in data.chunks_exact_mut(w) {
        row_plan.process(row);
    }
    let col_plan = plan(h, inverse);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_plan.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
}

/// Roll a row-major 2-D buffer by (sy, sx) with wraparound.
fn roll2<T: Copy + Default>(data: &[T], h: usize, w: usize, sy: usize, sx: usize) -> Vec<T> {
    let mut out = vec![T::default(); data.len()];
    for y in 0..h {
        let ty = (y + sy) % h;
        for x in 0..w {
            out[ty * w + (x + sx) % w] = data[y * w + x];
        }
    }
    out
}

/// Complex 2-D spectrum in DC-centered layout: the DC bin sits at
/// (h/2, w/2) (integer division).
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrum {
    /// Row/col of the DC bin.
    pub fn dc_index(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> Complex<f64> {
        self.data[y * self.width + x]
    }

    /// Radial distance of bin (y, x) from the DC bin.
    pub fn radius(&self, y: usize, x: usize) -> f64 {
        let (cy, cx) = self.dc_index();
        let dy = y as f64 - cy as f64;
        let dx = x as f64 - cx as f64;
        (dy * dy + dx * dx).sqrt()
    }

    pub fn total_energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Real part of the unnormalized-shift inverse, without the [0,1] clamp.
    pub fn to_real_unclamped(&self) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        // Undo the centering roll: forward rolled by floor(n/2), so roll by
        // the complement n - floor(n/2) (exact also for odd sizes).
        let mut buf = roll2(&self.data, h, w, h - h / 2, w - w / 2);
        fft2_inplace(&mut buf, h, w, true);
        let scale = 1.0 / (h * w) as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }
}

/// Forward 2-D transform of a single-channel image, DC-centered.
pub fn forward_fft(img: &ImageF) -> Spectrum {
    assert_eq!(img.channels, 1, "forward_fft takes a single-channel image");
    let (h, w) = (img.height, img.width);
    let mut buf: Vec<Complex<f64>> = img.data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2_inplace(&mut buf, h, w, false);
    let data = roll2(&buf, h, w, h / 2, w / 2);
    Spectrum { height: h, width: w, data }
}

/// Inverse transform, real part clamped back to the [0,1] raster range.
pub fn inverse_fft(s: &Spectrum) -> ImageF {
    let real = s.to_real_unclamped();
    ImageF::from_plane(s.height, s.width, real.iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Ideal low-pass: keep bins with radius ≤ f_c (inclusive), zero the rest,
/// inverse-transform and clamp. f_c = 0 keeps only DC (the image mean).
pub fn low_pass_filter(img: &ImageF, f_c: f64) -> F2pResult<ImageF> {
    if !(f_c >= 0.0) {
        return Err(crate::error::F2pError::invalid("low-pass cutoff must be ≥ 0"));
    }
    let mut s = forward_fft(img);
    for y in 0..s.height {
        for x in 0..s.width {
            if s.radius(y, x) > f_c {
                s.data[y * s.width + x] = Complex::new(0.0, 0.0);
            }
        }
    }
    Ok(inverse_fft(&s))
}
