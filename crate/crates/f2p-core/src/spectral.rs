//! Finger segmentation by R/G color ratio and the flash/non-flash spectral
//! subtraction: I_diff = clamp(I_flash − lowpass(I_nonflash, f_c)) per
//! channel, with the cutoff chosen from the radial energy profile.

use crate::error::{F2pError, F2pResult};
use crate::fft::{forward_fft, low_pass_filter, Spectrum};
use crate::image::{BinaryMask, ImageF};

const RATIO_EPS: f64 = 1e-6;

fn ratio_mask(img: &ImageF, t: f64) -> BinaryMask {
    let n = img.height * img.width;
    let (r, g) = (img.plane(0), img.plane(1));
    let mut m = BinaryMask::all(img.height, img.width, false);
    for i in 0..n {
        m.data[i] = r[i] / (g[i] + RATIO_EPS) > t;
    }
    m
}

fn cleanup(m: BinaryMask) -> F2pResult<BinaryMask> {
    let largest = m
        .largest_component()
        .ok_or_else(|| F2pError::SegmentationFailed("no pixels above ratio threshold".into()))?;
    let closed = largest.close_disk(5);
    if closed.count() == 0 {
        return Err(F2pError::SegmentationFailed("mask empty after morphology".into()));
    }
    Ok(closed)
}

/// Segment finger pixels: R/(G+ε) > T, then largest connected component and
/// morphological closing (disk radius 5).
pub fn segment_rg(img: &ImageF, t: f64) -> F2pResult<BinaryMask> {
    if img.channels != 3 {
        return Err(F2pError::invalid("segment_rg needs a 3-channel image"));
    }
    if !(t > 0.0) {
        return Err(F2pError::invalid("ratio threshold must be positive"));
    }
    cleanup(ratio_mask(img, t))
}

/// Auto-threshold variant: Otsu's method on the R/G ratio histogram picks T.
/// Returns the mask and the chosen threshold.
pub fn segment_rg_otsu(img: &ImageF) -> F2pResult<(BinaryMask, f64)> {
    if img.channels != 3 {
        return Err(F2pError::invalid("segment_rg needs a 3-channel image"));
    }
    let n = img.height * img.width;
    let (r, g) = (img.plane(0), img.plane(1));
    let ratios: Vec<f64> = (0..n).map(|i| r[i] / (g[i] + RATIO_EPS)).collect();
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-9) {
        return Err(F2pError::degenerate("uniform R/G ratio; cannot auto-threshold"));
    }
    const BINS: usize = 256;
    let mut hist = [0usize; BINS];
    for &v in &ratios {
        let b = (((v - lo) / (hi - lo)) * (BINS - 1) as f64).round() as usize;
        hist[b.min(BINS - 1)] += 1;
    }
    // Otsu: maximize between-class variance over split points.
    let total = n as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best_var, mut best_bin) = (-1.0, 0usize);
    for i in 0..BINS - 1 {
        w0 += hist[i] as f64;
        if w0 == 0.0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0.0 {
            break;
        }
        sum0 += i as f64 * hist[i] as f64;
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best_bin = i;
        }
    }
    // Threshold sits between the split bin and the next.
    let t = lo + (best_bin as f64 + 0.5) / (BINS - 1) as f64 * (hi - lo);
    let mask = cleanup(ratio_mask(img, t))?;
    Ok((mask, t))
}

/// Non-finger pixels (mask = false) become white (1.0) in all channels.
pub fn whiten_background(img: &ImageF, mask: &BinaryMask) -> F2pResult<ImageF> {
    if mask.height != img.height || mask.width != img.width {
        return Err(F2pError::invalid("mask dimensions must match image"));
    }
    let mut out = img.clone();
    let n = img.height * img.width;
    for c in 0..img.channels {
        let plane = out.plane_mut(c);
        for i in 0..n {
            if !mask.data[i] {
                plane[i] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Spectral energy accumulated per integer radius bin (DC at bin 0).
#[derive(Clone, Debug)]
pub struct RadialProfile {
    pub energy: Vec<f64>,
}

impl RadialProfile {
    pub fn total(&self) -> f64 {
        self.energy.iter().sum()
    }

    /// Energy strictly above radius `f_c`.
    pub fn energy_above(&self, f_c: usize) -> f64 {
        self.energy.iter().skip(f_c + 1).sum()
    }
}

/// R(f) = Σ|s(u,v)|² over bins with round(radius) = f.
pub fn radial_energy_profile(s: &Spectrum) -> RadialProfile {
    let (cy, cx) = s.dc_index();
    let max_r = {
        let fy = cy.max(s.height - 1 - cy) as f64;
        let fx = cx.max(s.width - 1 - cx) as f64;
        (fy * fy + fx * fx).sqrt().round() as usize
    };
    let mut energy = vec![0.0; max_r + 1];
    for y in 0..s.height {
        for x in 0..s.width {
            let f = s.radius(y, x).round() as usize;
            energy[f] += s.at(y, x).norm_sqr();
        }
    }
    RadialProfile { energy }
}

/// Smallest f whose cumulative non-DC energy reaches fraction ρ of the non-DC
/// total. ρ defaults to 0.15 in callers (the low-frequency illumination band).
pub fn select_cutoff(p: &RadialProfile, rho: f64) -> F2pResult<usize> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(F2pError::invalid("energy fraction must be in (0,1)"));
    }
    let total: f64 = p.energy.iter().skip(1).sum();
    if total <= 0.0 {
        return Err(F2pError::degenerate("no non-DC energy; cutoff undefined"));
    }
    let mut cum = 0.0;
    for (f, &e) in p.energy.iter().enumerate().skip(1) {
        cum += e;
        if cum >= rho * total {
            return Ok(f);
        }
    }
    Ok(p.energy.len() - 1)
}

/// Convenience: cutoff from an image's own radial profile (luma for RGB).
pub fn auto_cutoff(img: &ImageF, rho: f64) -> F2pResult<usize> {
    let gray = img.to_luma();
    select_cutoff(&radial_energy_profile(&forward_fft(&gray)), rho)
}

/// Per-channel spectral subtraction: I_diff = clamp(flash − LP(nonflash, f_c)).
/// Linear in the flash image before clamping.
pub fn spectral_subtract(flash: &ImageF, nonflash: &ImageF, f_c: f64) -> F2pResult<ImageF> {
    if !flash.same_size(nonflash) || flash.channels != nonflash.channels {
        return Err(F2pError::invalid("spectral_subtract needs registered equal-shape images"));
    }
    let mut out = ImageF::zeros(flash.height, flash.width, flash.channels);
    for c in 0..flash.channels {
        let low = low_pass_filter(&nonflash.channel(c), f_c)?;
        let plane = out.plane_mut(c);
        for (i, p) in plane.iter_mut().enumerate() {
            *p = (flash.plane(c)[i] - low.data[i]).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
