//! Pair registration and spatial normalization: phase-correlation translation
//! recovery, boundary-slope upright rotation, block orientation fields with
//! coherence, and Poincaré-index core detection.

use crate::error::{F2pError, F2pResult};
use crate::fft::fft2_inplace;
use crate::filters::sobel_gradients;
use crate::image::{BinaryMask, Fill, ImageF};
use rustfft::num_complex::Complex;

/// Sub-pixel translation (dx = rightward, dy = downward drift of content).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Translation {
    pub dx: f64,
    pub dy: f64,
}

/// Recover the translation t such that `b ≈ translate(a, t)`, via the peak of
/// the normalized cross-power spectrum. Inputs are mean-subtracted and Hann
/// windowed to suppress wraparound leakage; the integer peak is refined with a
/// 3-point parabolic fit per axis.
pub fn phase_correlate(a: &ImageF, b: &ImageF) -> F2pResult<Translation> {
    if !a.same_size(b) || a.channels != 1 || b.channels != 1 {
        return Err(F2pError::invalid("phase_correlate needs equal-size single-channel images"));
    }
    let (h, w) = (a.height, a.width);
    let mean_a = a.mean();
    let mean_b = b.mean();
    let var = |img: &ImageF, m: f64| img.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    if var(a, mean_a) < 1e-12 || var(b, mean_b) < 1e-12 {
        return Err(F2pError::degenerate("constant image has no registration signal"));
    }

    let hann = |i: usize, n: usize| -> f64 {
        if n < 2 {
            1.0
        } else {
            0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        }
    };
    let windowed = |img: &ImageF, mean: f64| -> Vec<Complex<f64>> {
        let mut buf = Vec::with_capacity(h * w);
        for y in 0..h {
            let wy = hann(y, h);
            for x in 0..w {
                buf.push(Complex::new((img.get(0, y, x) - mean) * wy * hann(x, w), 0.0));
            }
        }
        buf
    };

    let mut fa = windowed(a, mean_a);
    let mut fb = windowed(b, mean_b);
    fft2_inplace(&mut fa, h, w, false);
    fft2_inplace(&mut fb, h, w, false);

    // conj(A)·B has phase e^{-2πi u·t/N}; its inverse transform peaks at +t.
    let mut cross: Vec<Complex<f64>> = fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| {
            let c = x.conj() * y;
            let n = c.norm();
            if n < 1e-15 {
                Complex::new(0.0, 0.0)
            } else {
                c / n
            }
        })
        .collect();
    fft2_inplace(&mut cross, h, w, true);
    let surface: Vec<f64> = cross.iter().map(|c| c.re).collect();

    let mut peak = 0usize;
    for (i, &v) in surface.iter().enumerate() {
        if v > surface[peak] {
            peak = i;
        }
    }
    let (py, px) = (peak / w, peak % w);

    // Parabolic refinement with wraparound neighbors, offset clamped to ±0.5.
    let refine = |vm: f64, v0: f64, vp: f64| -> f64 {
        let den = vm - 2.0 * v0 + vp;
        if den.abs() < 1e-15 {
            0.0
        } else {
            (0.5 * (vm - vp) / den).clamp(-0.5, 0.5)
        }
    };
    let at = |y: usize, x: usize| surface[y * w + x];
    let oy = refine(at((py + h - 1) % h, px), at(py, px), at((py + 1) % h, px));
    let ox = refine(at(py, (px + w - 1) % w), at(py, px), at(py, (px + 1) % w));

    let unwrap = |i: usize, n: usize| -> f64 {
        if i > n / 2 {
            i as f64 - n as f64
        } else {
            i as f64
        }
    };
    Ok(Translation { dx: unwrap(px, w) + ox, dy: unwrap(py, h) + oy })
}

/// Bilinear warp by `t` followed by a symmetric border crop.
pub fn translate_crop(img: &ImageF, t: Translation, border: usize) -> F2pResult<ImageF> {
    if !t.dx.is_finite() || !t.dy.is_finite() {
        return Err(F2pError::invalid("non-finite translation"));
    }
    let warped = img.translate_bilinear(t.dx, t.dy, Fill::Replicate);
    warped.crop_border(border)
}

/// Least-squares slopes of the left and right finger boundaries (lateral
/// drift per unit vertical), fitted over the central 60% of finger rows.
pub fn boundary_slopes(mask: &BinaryMask) -> F2pResult<(f64, f64)> {
    let mut rows: Vec<(usize, usize, usize)> = Vec::new(); // (y, left, right)
    for y in 0..mask.height {
        let mut left = None;
        let mut right = None;
        for x in 0..mask.width {
            if mask.get(y, x) {
                if left.is_none() {
                    left = Some(x);
                }
                right = Some(x);
            }
        }
        if let (Some(l), Some(r)) = (left, right) {
            rows.push((y, l, r));
        }
    }
    if rows.len() < 10 {
        return Err(F2pError::degenerate(format!(
            "only {} finger rows; need ≥ 10 for slope fitting",
            rows.len()
        )));
    }
    let lo = rows.len() / 5;
    let hi = rows.len() - rows.len() / 5;
    let central = &rows[lo..hi];

    let fit = |pick: &dyn Fn(&(usize, usize, usize)) -> usize| -> f64 {
        let n = central.len() as f64;
        let my = central.iter().map(|r| r.0 as f64).sum::<f64>() / n;
        let mx = central.iter().map(|r| pick(r) as f64).sum::<f64>() / n;
        let mut cov = 0.0;
        let mut var = 0.0;
        for r in central {
            let dy = r.0 as f64 - my;
            cov += dy * (pick(r) as f64 - mx);
            var += dy * dy;
        }
        cov / var
    };
    Ok((fit(&|r| r.1), fit(&|r| r.2)))
}

/// Estimate the finger tilt θ = ½(arctan m_left + arctan m_right) and rotate
/// image + mask by −θ about the center to upright the finger.
pub fn upright_rotate(img: &ImageF, mask: &BinaryMask) -> F2pResult<(ImageF, BinaryMask, f64)> {
    let (ml, mr) = boundary_slopes(mask)?;
    let theta = 0.5 * (ml.atan() + mr.atan());
    let out = img.rotate_bilinear(-theta, Fill::Black);
    let out_mask = mask.rotate_nearest(-theta);
    Ok((out, out_mask, theta))
}

/// Block-wise ridge orientation field with coherence, doubled-angle sums.
#[derive(Clone, Debug)]
pub struct OrientationField {
    pub block_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub gx_mean: Vec<f64>,
    pub gy_mean: Vec<f64>,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
    /// Ridge orientation per block, radians in [0, π).
    pub angle: Vec<f64>,
    /// Orientation consistency per block, in [0, 1].
    pub coherence: Vec<f64>,
}

impl OrientationField {
    /// Build directly from per-block angles (analytic fields, tests).
    pub fn from_angles(block_size: usize, rows: usize, cols: usize, angle: Vec<f64>, coherence: Vec<f64>) -> Self {
        assert_eq!(angle.len(), rows * cols);
        assert_eq!(coherence.len(), rows * cols);
        let n = rows * cols;
        OrientationField {
            block_size,
            rows,
            cols,
            gx_mean: vec![0.0; n],
            gy_mean: vec![0.0; n],
            vx: vec![0.0; n],
            vy: vec![0.0; n],
            angle: angle.iter().map(|a| a.rem_euclid(std::f64::consts::PI)).collect(),
            coherence,
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }

    /// Pixel coordinates (x, y) of a block center.
    pub fn block_center(&self, r: usize, c: usize) -> (f64, f64) {
        (
            (c as f64 + 0.5) * self.block_size as f64 - 0.5,
            (r as f64 + 0.5) * self.block_size as f64 - 0.5,
        )
    }
}

/// Compute the orientation field over `block`×`block` tiles (remainder pixels
/// beyond the last full block are ignored). Doubled-angle sums per block:
/// V_x = Σ 2·g_x·g_y, V_y = Σ (g_x² − g_y²), coherence =
/// √(V_x²+V_y²) / (Σ(g_x²+g_y²) + 1e-8). The ridge angle is the normal of the
/// mean gradient direction: ½·atan2(V_x, V_y) + π/2, wrapped to [0, π).
pub fn orientation_field(img: &ImageF, block: usize) -> OrientationField {
    assert!(block >= 4, "orientation blocks must be ≥ 4 px");
    assert_eq!(img.channels, 1);
    let (gx, gy) = sobel_gradients(img);
    let (h, w) = (img.height, img.width);
    let rows = h / block;
    let cols = w / block;
    let n = rows * cols;
    let mut field = OrientationField {
        block_size: block,
        rows,
        cols,
        gx_mean: vec![0.0; n],
        gy_mean: vec![0.0; n],
        vx: vec![0.0; n],
        vy: vec![0.0; n],
        angle: vec![0.0; n],
        coherence: vec![0.0; n],
    };
    for r in 0..rows {
        for c in 0..cols {
            let (mut sx, mut sy, mut svx, mut svy, mut pow) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in r * block..(r + 1) * block {
                for x in c * block..(c + 1) * block {
                    let (px, py) = (gx[y * w + x], gy[y * w + x]);
                    sx += px;
                    sy += py;
                    svx += 2.0 * px * py;
                    svy += px * px - py * py;
                    pow += px * px + py * py;
                }
            }
            let i = field.at(r, c);
            let npix = (block * block) as f64;
            field.gx_mean[i] = sx / npix;
            field.gy_mean[i] = sy / npix;
            field.vx[i] = svx;
            field.vy[i] = svy;
            field.coherence[i] = ((svx * svx + svy * svy).sqrt() / (pow + 1e-8)).clamp(0.0, 1.0);
            field.angle[i] = (0.5 * svx.atan2(svy) + std::f64::consts::FRAC_PI_2)
                .rem_euclid(std::f64::consts::PI);
        }
    }
    field
}

/// Detected singular point.
#[derive(Clone, Copy, Debug)]
pub struct CorePoint {
    pub x_c: f64,
    pub y_c: f64,
    pub coherence: f64,
    pub poincare: f64,
}

/// Wrap an orientation difference into (−π/2, π/2].
fn wrap_half_pi(mut d: f64) -> f64 {
    while d > std::f64::consts::FRAC_PI_2 {
        d -= std::f64::consts::PI;
    }
    while d <= -std::f64::consts::FRAC_PI_2 {
        d += std::f64::consts::PI;
    }
    d
}

/// Poincaré index of an interior block: wrapped angle differences summed
/// around the closed 8-neighbor loop, divided by 2π.
pub fn poincare_index(field: &OrientationField, r: usize, c: usize) -> f64 {
    debug_assert!(r >= 1 && c >= 1 && r + 1 < field.rows && c + 1 < field.cols);
    // Closed loop around (r, c), position angle increasing in raster coords.
    const LOOP: [(i64, i64); 8] = [
        (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1),
    ];
    let mut sum = 0.0;
    for i in 0..8 {
        let (dr0, dc0) = LOOP[i];
        let (dr1, dc1) = LOOP[(i + 1) % 8];
        let a0 = field.angle[field.at((r as i64 + dr0) as usize, (c as i64 + dc0) as usize)];
        let a1 = field.angle[field.at((r as i64 + dr1) as usize, (c as i64 + dc1) as usize)];
        sum += wrap_half_pi(a1 - a0);
    }
    sum / (2.0 * std::f64::consts::PI)
}

/// Find the core: the block with Poincaré index in 0.5 ± 0.1 and maximum
/// coherence among such candidates, mapped to its pixel-center coordinates.
pub fn poincare_core(field: &OrientationField) -> F2pResult<CorePoint> {
    if field.rows < 3 || field.cols < 3 {
        return Err(F2pError::invalid("orientation field must be at least 3x3 blocks"));
    }
    let mut best: Option<CorePoint> = None;
    for r in 1..field.rows - 1 {
        for c in 1..field.cols - 1 {
            let idx = poincare_index(field, r, c);
            if (idx - 0.5).abs() <= 0.1 {
                let coh = field.coherence[field.at(r, c)];
                if best.map_or(true, |b| coh > b.coherence) {
                    let (x, y) = field.block_center(r, c);
                    best = Some(CorePoint { x_c: x, y_c: y, coherence: coh, poincare: idx });
                }
            }
        }
    }
    best.ok_or(F2pError::CoreNotFound)
}

/// Fallback anchor when no Poincaré candidate exists: the mask centroid.
pub fn centroid_core(mask: &BinaryMask) -> Option<CorePoint> {
    mask.centroid().map(|(x, y)| CorePoint { x_c: x, y_c: y, coherence: 0.0, poincare: 0.0 })
}

/// Integer translation that moves the core to the image center (W/2, H/2);
/// vacated pixels are black / false.
pub fn center_on_core(img: &ImageF, mask: &BinaryMask, core: &CorePoint) -> (ImageF, BinaryMask) {
    let dx = (img.width / 2) as i64 - core.x_c.round() as i64;
    let dy = (img.height / 2) as i64 - core.y_c.round() as i64;
    let out = img.translate_bilinear(dx as f64, dy as f64, Fill::Black);
    let out_mask = mask.translate(dx, dy);
    (out, out_mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::gaussian_blur;
    use crate::rng::SeededRng;

    /// Smooth random texture: blurred noise has broadband but correlated
    /// content, similar to natural images for registration purposes.
    fn texture(h: usize, w: usize, seed: u64) -> ImageF {
        let mut rng = SeededRng::new(seed);
        let noise = ImageF::from_fn(h, w, 1, |_, _, _| rng.uniform());
        gaussian_blur(&noise, 1.5)
    }

    fn circular_shift(img: &ImageF, dx: i64, dy: i64) -> ImageF {
        ImageF::from_fn(img.height, img.width, 1, |_, y, x| {
            let sy = (y as i64 - dy).rem_euclid(img.height as i64) as usize;
            let sx = (x as i64 - dx).rem_euclid(img.width as i64) as usize;
            img.get(0, sy, sx)
        })
    }

    #[test]
    fn phase_correlate_zero_shift() {
        let img = texture(64, 64, 1);
        let t = phase_correlate(&img, &img).unwrap();
        assert!(t.dx.abs() < 0.05 && t.dy.abs() < 0.05);
    }

    #[test]
    fn phase_correlate_integer_shift() {
        let img = texture(64, 64, 2);
        let shifted = circular_shift(&img, 5, 3);
        let t = phase_correlate(&img, &shifted).unwrap();
        assert!((t.dx - 5.0).abs() < 0.1, "dx {}", t.dx);
        assert!((t.dy - 3.0).abs() < 0.1, "dy {}", t.dy);
    }

    #[test]
    fn phase_correlate_fractional_shift() {
        let img = texture(96, 96, 3);
        let shifted = img.translate_bilinear(2.5, -1.25, Fill::Replicate);
        let t = phase_correlate(&img, &shifted).unwrap();
        assert!((t.dx - 2.5).abs() < 0.3, "dx {}", t.dx);
        assert!((t.dy + 1.25).abs() < 0.3, "dy {}", t.dy);
    }

    #[test]
    fn phase_correlate_rejects_constant() {
        let flat = ImageF::from_fn(32, 32, 1, |_, _, _| 0.5);
        let img = texture(32, 32, 4);
        assert!(matches!(phase_correlate(&flat, &img), Err(F2pError::DegenerateInput(_))));
    }

    #[test]
    fn translate_crop_identity_and_shift() {
        let img = texture(32, 32, 5);
        let out = translate_crop(&img, Translation { dx: 0.0, dy: 0.0 }, 0).unwrap();
        assert_eq!(out.data, img.data);

        let out = translate_crop(&img, Translation { dx: 3.0, dy: 0.0 }, 4).unwrap();
        // out(y,x) = warped(y+4, x+4) = img(y+4, x+1)
        for y in 0..out.height {
            for x in 0..out.width {
                assert!((out.get(0, y, x) - img.get(0, y + 4, x + 1)).abs() < 1e-12);
            }
        }
        assert!(translate_crop(&img, Translation { dx: 0.0, dy: 0.0 }, 16).is_err());
    }

    #[test]
    fn translate_crop_roundtrip() {
        // Bilinear resampling loses high frequencies, so the roundtrip bound
        // holds on smooth content.
        let noise = texture(48, 48, 6);
        let img = gaussian_blur(&noise, 3.0);
        let t = Translation { dx: 1.7, dy: -2.3 };
        let back = translate_crop(
            &translate_crop(&img, t, 0).unwrap(),
            Translation { dx: -t.dx, dy: -t.dy },
            0,
        )
        .unwrap();
        for y in 8..40 {
            for x in 8..40 {
                assert!((back.get(0, y, x) - img.get(0, y, x)).abs() < 2.0 / 255.0);
            }
        }
    }

    fn parallelogram_mask(h: usize, w: usize, m_left: f64, m_right: f64, x_left: f64, x_right: f64) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| {
            let l = x_left + m_left * y as f64;
            let r = x_right + m_right * y as f64;
            (x as f64) >= l && (x as f64) <= r
        })
    }

    #[test]
    fn boundary_slopes_rectangle_and_shear() {
        let rect = parallelogram_mask(40, 40, 0.0, 0.0, 10.0, 30.0);
        let (ml, mr) = boundary_slopes(&rect).unwrap();
        assert!(ml.abs() < 1e-9 && mr.abs() < 1e-9);

        let shear = parallelogram_mask(40, 90, 1.0, 1.0, 5.0, 25.0);
        let (ml, mr) = boundary_slopes(&shear).unwrap();
        assert!((ml - 1.0).abs() < 0.02, "ml {ml}");
        assert!((mr - 1.0).abs() < 0.02, "mr {mr}");

        let para = parallelogram_mask(40, 90, 0.0, 1.0, 5.0, 25.0);
        let (ml, mr) = boundary_slopes(&para).unwrap();
        assert!(ml.abs() < 0.02 && (mr - 1.0).abs() < 0.02);
    }

    #[test]
    fn boundary_slopes_needs_rows() {
        let mut m = BinaryMask::all(20, 20, false);
        for y in 0..5 {
            m.set(y, 10, true);
        }
        assert!(matches!(boundary_slopes(&m), Err(F2pError::DegenerateInput(_))));
    }

    #[test]
    fn upright_rotate_angles() {
        let img = ImageF::zeros(40, 40, 1);
        let rect = parallelogram_mask(40, 40, 0.0, 0.0, 10.0, 30.0);
        let (_, _, theta) = upright_rotate(&img, &rect).unwrap();
        assert!(theta.abs() < 1e-6);

        let img = ImageF::zeros(40, 90, 1);
        let shear = parallelogram_mask(40, 90, 1.0, 1.0, 5.0, 25.0);
        let (_, _, theta) = upright_rotate(&img, &shear).unwrap();
        assert!((theta - std::f64::consts::FRAC_PI_4).abs() < 0.02, "theta {theta}");

        let para = parallelogram_mask(40, 90, 0.0, 1.0, 5.0, 25.0);
        let (_, _, theta) = upright_rotate(&img, &para).unwrap();
        assert!((theta - std::f64::consts::FRAC_PI_8).abs() < 0.02);
    }

    #[test]
    fn upright_rotate_near_fixpoint() {
        // A moderately tilted band: after one upright pass the residual tilt
        // estimated by a second pass is under 1°.
        let img = ImageF::zeros(96, 96, 1);
        let m = tan_mask(96, 96, 0.25);
        let (img2, m2, theta1) = upright_rotate(&img, &m).unwrap();
        assert!((theta1 - 0.25f64.atan()).abs() < 0.03);
        let (_, _, theta2) = upright_rotate(&img2, &m2).unwrap();
        assert!(theta2.abs() < 1.0_f64.to_radians(), "second pass {theta2}");
    }

    fn tan_mask(h: usize, w: usize, m: f64) -> BinaryMask {
        parallelogram_mask(h, w, m, m, w as f64 * 0.3, w as f64 * 0.55)
    }

    #[test]
    fn orientation_ramp_fully_coherent() {
        let img = ImageF::from_fn(32, 32, 1, |_, y, x| ((x + y) as f64) / 64.0);
        let f = orientation_field(&img, 8);
        for r in 0..f.rows {
            for c in 0..f.cols {
                // Replicate padding bends border-block gradients slightly.
                assert!(f.coherence[f.at(r, c)] > 0.95);
            }
        }
        assert!(f.coherence[f.at(1, 1)] > 0.9999);
    }

    #[test]
    fn orientation_noise_incoherent() {
        // Sobel responses on iid noise are 3×3-correlated, so large blocks
        // are needed for the directional average to wash out.
        let mut rng = SeededRng::new(12);
        let img = ImageF::from_fn(128, 128, 1, |_, _, _| rng.uniform());
        let f = orientation_field(&img, 32);
        for (i, &c) in f.coherence.iter().enumerate() {
            assert!(c < 0.2, "block {i} coherence {c}");
        }
    }

    #[test]
    fn orientation_recovers_30_degrees() {
        // Ridges along 30° in raster coords: wave normal at 120°.
        let phi = 30f64.to_radians();
        let (nx, ny) = (-phi.sin(), phi.cos());
        let img = ImageF::from_fn(64, 64, 1, |_, y, x| {
            0.5 + 0.4 * (2.0 * std::f64::consts::PI * (nx * x as f64 + ny * y as f64) / 8.0).cos()
        });
        let f = orientation_field(&img, 16);
        for r in 0..f.rows {
            for c in 0..f.cols {
                let mut diff = (f.angle[f.at(r, c)] - phi).abs();
                diff = diff.min(std::f64::consts::PI - diff);
                assert!(diff < 2f64.to_radians(), "angle {}", f.angle[f.at(r, c)].to_degrees());
            }
        }
    }

    fn loop_field(n: usize, r0: f64, c0: f64) -> OrientationField {
        let mut angle = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                angle[r * n + c] = 0.5 * (r as f64 - r0).atan2(c as f64 - c0);
            }
        }
        OrientationField::from_angles(8, n, n, angle, vec![1.0; n * n])
    }

    #[test]
    fn poincare_loop_plus_half() {
        let f = loop_field(9, 4.3, 4.6);
        let idx = poincare_index(&f, 4, 4);
        assert!((idx - 0.5).abs() < 0.05, "index {idx}");
        // Away from the singularity the index vanishes.
        assert!(poincare_index(&f, 1, 1).abs() < 0.05);
        let core = poincare_core(&f).unwrap();
        assert!((core.x_c - (4.5 * 8.0 - 0.5)).abs() < 1e-9);
        assert!((core.poincare - 0.5).abs() < 0.05);
    }

    #[test]
    fn poincare_delta_minus_half() {
        // Negated construction: θ = −½·atan2 has index −0.5.
        let n = 9;
        let mut angle = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                angle[r * n + c] = -0.5 * (r as f64 - 4.3).atan2(c as f64 - 4.6);
            }
        }
        let f = OrientationField::from_angles(8, n, n, angle, vec![1.0; n * n]);
        let idx = poincare_index(&f, 4, 4);
        assert!((idx + 0.5).abs() < 0.05, "index {idx}");
        assert!(matches!(poincare_core(&f), Err(F2pError::CoreNotFound)));
    }

    #[test]
    fn poincare_constant_field_has_no_core() {
        let f = OrientationField::from_angles(8, 5, 5, vec![0.7; 25], vec![1.0; 25]);
        for r in 1..4 {
            for c in 1..4 {
                assert!(poincare_index(&f, r, c).abs() < 1e-9);
            }
        }
        assert!(matches!(poincare_core(&f), Err(F2pError::CoreNotFound)));
    }

    #[test]
    fn poincare_smooth_field_zero_everywhere() {
        // Singularity-free smooth field: indices ~0 on every interior block.
        let n = 10;
        let mut angle = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                angle[r * n + c] = 0.4 * ((r as f64 * 0.3).sin() + (c as f64 * 0.25).cos());
            }
        }
        let f = OrientationField::from_angles(8, n, n, angle, vec![1.0; n * n]);
        for r in 1..n - 1 {
            for c in 1..n - 1 {
                assert!(poincare_index(&f, r, c).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn center_on_core_arithmetic() {
        let img = ImageF::from_fn(100, 100, 1, |_, y, x| if y == 0 && x == 0 { 1.0 } else { 0.0 });
        let mask = BinaryMask::all(100, 100, true);
        let core = CorePoint { x_c: 0.0, y_c: 0.0, coherence: 1.0, poincare: 0.5 };
        let (out, _) = center_on_core(&img, &mask, &core);
        assert_eq!(out.get(0, 50, 50), 1.0);
        assert_eq!(out.get(0, 0, 0), 0.0);

        // Core already centered → identity.
        let core = CorePoint { x_c: 50.0, y_c: 50.0, coherence: 1.0, poincare: 0.5 };
        let (out, _) = center_on_core(&img, &mask, &core);
        assert_eq!(out.data, img.data);
    }
}
