//! Classic spatial filtering: Sobel/Laplacian/Gaussian kernels, CLAHE,
//! adaptive binarization, an oriented Gabor bank, SSIM, and Canny edges.
//! Every convolution uses replicate padding ('same' output) so finger
//! boundaries do not ring.

use crate::error::{F2pError, F2pResult};
use crate::image::{BinaryMask, ImageF};

/// Direct 2-D correlation with replicate-padded borders, 'same' output.
pub(crate) fn conv2_replicate(plane: &[f64], h: usize, w: usize, k: &[f64], kh: usize, kw: usize) -> Vec<f64> {
    assert_eq!(plane.len(), h * w);
    assert_eq!(k.len(), kh * kw);
    let (ry, rx) = (kh as i64 / 2, kw as i64 / 2);
    let mut out = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for i in 0..kh as i64 {
                let yy = (y + i - ry).clamp(0, h as i64 - 1) as usize;
                for j in 0..kw as i64 {
                    let xx = (x + j - rx).clamp(0, w as i64 - 1) as usize;
                    acc += k[(i * kw as i64 + j) as usize] * plane[yy * w + xx];
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// Standard 3×3 Sobel pair, normalized by 1/8 so a unit ramp has unit
/// gradient. Row-major kernels (kx, ky).
pub(crate) fn sobel_kernels() -> (Vec<f64>, Vec<f64>) {
    let kx: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let ky: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    (
        kx.iter().map(|v| v / 8.0).collect(),
        ky.iter().map(|v| v / 8.0).collect(),
    )
}

/// Sobel responses of a single-channel image. Returns signed row-major
/// rasters (gx, gy).
pub fn sobel_gradients(img: &ImageF) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(img.channels, 1, "sobel_gradients takes a single channel");
    let (kx, ky) = sobel_kernels();
    let gx = conv2_replicate(img.plane(0), img.height, img.width, &kx, 3, 3);
    let gy = conv2_replicate(img.plane(0), img.height, img.width, &ky, 3, 3);
    (gx, gy)
}

/// 3×3 Laplacian response (signed).
pub fn laplacian(img: &ImageF) -> Vec<f64> {
    assert_eq!(img.channels, 1);
    let k: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
    conv2_replicate(img.plane(0), img.height, img.width, &k, 3, 3)
}

pub(crate) fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0);
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur on all channels, replicate borders.
pub fn gaussian_blur(img: &ImageF, sigma: f64) -> ImageF {
    let k = gaussian_kernel_1d(sigma);
    let klen = k.len();
    let mut out = img.clone();
    for c in 0..img.channels {
        let horiz = conv2_replicate(img.plane(c), img.height, img.width, &k, 1, klen);
        let vert = conv2_replicate(&horiz, img.height, img.width, &k, klen, 1);
        out.plane_mut(c).copy_from_slice(&vert);
    }
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Contrast-limited adaptive histogram equalization (256 bins, bilinear
/// blending between per-tile lookup tables, clipped excess redistributed
/// uniformly).
pub fn clahe(img: &ImageF, clip_limit: f64, tiles: usize) -> ImageF {
    assert_eq!(img.channels, 1);
    assert!(tiles >= 1 && clip_limit > 0.0);
    let (h, w) = (img.height, img.width);
    let tiles = tiles.min(h).min(w);
    const BINS: usize = 256;
    let q = |v: f64| ((v.clamp(0.0, 1.0) * (BINS - 1) as f64).round()) as usize;

    // Per-tile clipped-equalization LUTs.
    let mut luts = vec![vec![0.0f64; BINS]; tiles * tiles];
    for ty in 0..tiles {
        for tx in 0..tiles {
            let y0 = ty * h / tiles;
            let y1 = (ty + 1) * h / tiles;
            let x0 = tx * w / tiles;
            let x1 = (tx + 1) * w / tiles;
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let mut hist = [0.0f64; BINS];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[q(img.get(0, y, x))] += 1.0;
                }
            }
            let cap = (clip_limit * n / BINS as f64).max(1.0);
            let mut excess = 0.0;
            for b in hist.iter_mut() {
                if *b > cap {
                    excess += *b - cap;
                    *b = cap;
                }
            }
            let add = excess / BINS as f64;
            let mut cdf = 0.0;
            let lut = &mut luts[ty * tiles + tx];
            for v in 0..BINS {
                cdf += hist[v] + add;
                lut[v] = cdf / n;
            }
        }
    }

    // Bilinear interpolation between the four surrounding tile LUTs.
    let mut out = ImageF::zeros(h, w, 1);
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * tiles as f64 / h as f64 - 0.5).clamp(0.0, tiles as f64 - 1.0);
        let ty0 = fy.floor() as usize;
        let ty1 = (ty0 + 1).min(tiles - 1);
        let wy = fy - ty0 as f64;
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * tiles as f64 / w as f64 - 0.5).clamp(0.0, tiles as f64 - 1.0);
            let tx0 = fx.floor() as usize;
            let tx1 = (tx0 + 1).min(tiles - 1);
            let wx = fx - tx0 as f64;
            let b = q(img.get(0, y, x));
            let v = luts[ty0 * tiles + tx0][b] * (1.0 - wy) * (1.0 - wx)
                + luts[ty0 * tiles + tx1][b] * (1.0 - wy) * wx
                + luts[ty1 * tiles + tx0][b] * wy * (1.0 - wx)
                + luts[ty1 * tiles + tx1][b] * wy * wx;
            out.set(0, y, x, v.clamp(0.0, 1.0));
        }
    }
    out
}

/// Adaptive binarization: pixel → 1 when brighter than its Gaussian-weighted
/// local mean minus `offset`, else 0 (dark ridges map to 0).
pub fn adaptive_binarize(img: &ImageF, block: usize, offset: f64) -> F2pResult<ImageF> {
    assert_eq!(img.channels, 1);
    if block < 3 {
        return Err(F2pError::invalid("binarization block must be ≥ 3"));
    }
    if block > img.height || block > img.width {
        return Err(F2pError::invalid(format!(
            "binarization block {block} exceeds image {}x{}",
            img.height, img.width
        )));
    }
    // Gaussian-weighted block mean: symmetric kernel spanning the block,
    // σ = block/6 so the support covers ±3σ.
    let sigma = block as f64 / 6.0;
    let r = block as i64 / 2;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    let klen = k.len();
    let horiz = conv2_replicate(img.plane(0), img.height, img.width, &k, 1, klen);
    let local_mean = conv2_replicate(&horiz, img.height, img.width, &k, klen, 1);
    let mut out = ImageF::zeros(img.height, img.width, 1);
    for i in 0..img.data.len() {
        out.data[i] = if img.data[i] > local_mean[i] - offset { 1.0 } else { 0.0 };
    }
    Ok(out)
}

/// Oriented Gabor bank configuration.
#[derive(Clone, Copy, Debug)]
pub struct GaborParams {
    pub orientations: usize,
    /// Pixels per ridge cycle.
    pub wavelength: f64,
    pub sigma: f64,
    /// Odd kernel side length.
    pub kernel_size: usize,
}

impl Default for GaborParams {
    fn default() -> Self {
        GaborParams { orientations: 8, wavelength: 8.0, sigma: 4.0, kernel_size: 21 }
    }
}

impl GaborParams {
    pub fn validate(&self) -> F2pResult<()> {
        if self.orientations < 1 {
            return Err(F2pError::invalid("gabor bank needs ≥ 1 orientation"));
        }
        if !(self.wavelength > 0.0) || !(self.sigma > 0.0) {
            return Err(F2pError::invalid("gabor wavelength and sigma must be positive"));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(F2pError::invalid("gabor kernel size must be odd"));
        }
        Ok(())
    }
}

/// Even (cosine) Gabor kernel at wave-normal angle θ, mean-subtracted so the
/// response to constants is exactly zero.
fn gabor_kernel(theta: f64, p: &GaborParams) -> Vec<f64> {
    let r = p.kernel_size as i64 / 2;
    let (s, c) = theta.sin_cos();
    let mut k = Vec::with_capacity(p.kernel_size * p.kernel_size);
    for y in -r..=r {
        for x in -r..=r {
            let xr = c * x as f64 + s * y as f64;
            let yr = -s * x as f64 + c * y as f64;
            let env = (-(xr * xr + yr * yr) / (2.0 * p.sigma * p.sigma)).exp();
            let wave = (2.0 * std::f64::consts::PI * xr / p.wavelength).cos();
            k.push(env * wave);
        }
    }
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    for v in &mut k {
        *v -= mean;
    }
    k
}

/// Signed response to a single orientation (wave normal at `theta`).
pub fn gabor_response(img: &ImageF, theta: f64, p: &GaborParams) -> F2pResult<Vec<f64>> {
    p.validate()?;
    assert_eq!(img.channels, 1);
    let k = gabor_kernel(theta, p);
    Ok(conv2_replicate(img.plane(0), img.height, img.width, &k, p.kernel_size, p.kernel_size))
}

/// Per-pixel maximum signed response over the orientation bank, pre-rescale.
/// Invariant to adding a constant to the input (zero-mean kernels).
pub fn gabor_bank_raw(img: &ImageF, p: &GaborParams) -> F2pResult<Vec<f64>> {
    p.validate()?;
    assert_eq!(img.channels, 1);
    let mut best = vec![f64::NEG_INFINITY; img.height * img.width];
    for i in 0..p.orientations {
        let theta = i as f64 * std::f64::consts::PI / p.orientations as f64;
        let resp = gabor_response(img, theta, p)?;
        for (b, r) in best.iter_mut().zip(&resp) {
            *b = b.max(*r);
        }
    }
    Ok(best)
}

/// Bank response min-max rescaled to [0,1]; a flat response maps to 0.5.
pub fn gabor_bank(img: &ImageF, p: &GaborParams) -> F2pResult<ImageF> {
    let raw = gabor_bank_raw(img, p)?;
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let data = if hi - lo < 1e-12 {
        vec![0.5; raw.len()]
    } else {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    Ok(ImageF::from_plane(img.height, img.width, data))
}

/// Settings for [`ridge_refine`].
#[derive(Clone, Copy, Debug)]
pub struct RefineConfig {
    pub clahe_clip: f64,
    pub clahe_tiles: usize,
    pub thresh_block: usize,
    pub thresh_offset: f64,
    pub gauss_sigma: f64,
    pub gabor: GaborParams,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            clahe_clip: 2.0,
            clahe_tiles: 8,
            thresh_block: 31,
            thresh_offset: 0.02,
            gauss_sigma: 1.0,
            gabor: GaborParams::default(),
        }
    }
}

/// Classic ridge-map refinement: CLAHE → adaptive binarization → Gaussian
/// smoothing → Gabor filtering, then background (mask = false) forced white.
/// Output has dark ridges on a light field.
pub fn ridge_refine(img: &ImageF, mask: &BinaryMask, cfg: &RefineConfig) -> F2pResult<ImageF> {
    assert_eq!(img.channels, 1);
    if mask.height != img.height || mask.width != img.width {
        return Err(F2pError::invalid("mask dimensions must match image"));
    }
    let eq = clahe(img, cfg.clahe_clip, cfg.clahe_tiles);
    let bin = adaptive_binarize(&eq, cfg.thresh_block, cfg.thresh_offset)?;
    let smooth = gaussian_blur(&bin, cfg.gauss_sigma);
    let ridges = gabor_bank(&smooth, &cfg.gabor)?;
    let mut out = ImageF::zeros(img.height, img.width, 1);
    for y in 0..img.height {
        for x in 0..img.width {
            // Bank peaks on ridge centers; invert so ridges read dark.
            let v = if mask.get(y, x) { 1.0 - ridges.get(0, y, x) } else { 1.0 };
            out.set(0, y, x, v);
        }
    }
    Ok(out)
}

/// Mean SSIM between two single-channel images: 11×11 Gaussian window
/// (σ = 1.5), stabilizers k1 = 0.01, k2 = 0.03 on unit dynamic range.
pub fn ssim(a: &ImageF, b: &ImageF) -> F2pResult<f64> {
    if !a.same_size(b) || a.channels != 1 || b.channels != 1 {
        return Err(F2pError::invalid("ssim needs two single-channel images of equal size"));
    }
    let map = ssim_map(a.plane(0), b.plane(0), a.height, a.width);
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// One axis of the structural-similarity window: 11 taps of a σ=1.5
/// Gaussian, normalized. The 2-d window is its outer product.
pub(crate) fn ssim_window_1d() -> Vec<f64> {
    let sigma = 1.5f64;
    let k: Vec<f64> = (-5i64..=5)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter().map(|v| v / s).collect()
}

/// 11×11 σ=1.5 Gaussian window, normalized.
pub(crate) fn ssim_window() -> Vec<f64> {
    let g = ssim_window_1d();
    let mut k = Vec::with_capacity(121);
    for y in 0..11 {
        for x in 0..11 {
            k.push(g[y] * g[x]);
        }
    }
    k
}

pub(crate) fn ssim_map(a: &[f64], b: &[f64], h: usize, w: usize) -> Vec<f64> {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let win = ssim_window();
    let conv = |p: &[f64]| conv2_replicate(p, h, w, &win, 11, 11);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = conv(a);
    let mu_b = conv(b);
    let m_aa = conv(&aa);
    let m_bb = conv(&bb);
    let m_ab = conv(&ab);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let va = m_aa[i] - mu_a[i] * mu_a[i];
        let vb = m_bb[i] - mu_b[i] * mu_b[i];
        let cov = m_ab[i] - mu_a[i] * mu_b[i];
        let num = (2.0 * mu_a[i] * mu_b[i] + C1) * (2.0 * cov + C2);
        let den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + C1) * (va + vb + C2);
        out.push(num / den);
    }
    out
}

/// Canny edge detection; hysteresis thresholds are fractions of the maximum
/// gradient magnitude.
pub fn canny_edges(img: &ImageF, low_frac: f64, high_frac: f64) -> BinaryMask {
    assert_eq!(img.channels, 1);
    let (h, w) = (img.height, img.width);
    let (gx, gy) = sobel_gradients(img);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(x, y)| (x * x + y * y).sqrt()).collect();
    let max_mag = mag.iter().cloned().fold(0.0, f64::max);
    if max_mag <= 0.0 {
        return BinaryMask::all(h, w, false);
    }
    let lo = low_frac * max_mag;
    let hi = high_frac * max_mag;

    // Non-maximum suppression along the quantized gradient direction.
    let mut thin = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if mag[i] < lo {
                continue;
            }
            let ang = gy[i].atan2(gx[i]);
            // Quantize to 0°, 45°, 90°, 135° sectors.
            let sector = ((ang / std::f64::consts::PI * 4.0).round() as i64).rem_euclid(4);
            let (dy, dx) = match sector {
                0 => (0i64, 1i64),
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            };
            let read = |yy: i64, xx: i64| -> f64 {
                if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                    0.0
                } else {
                    mag[yy as usize * w + xx as usize]
                }
            };
            let fwd = read(y as i64 + dy, x as i64 + dx);
            let bwd = read(y as i64 - dy, x as i64 - dx);
            if mag[i] >= fwd && mag[i] >= bwd {
                thin[i] = mag[i];
            }
        }
    }

    // Hysteresis: flood from strong pixels through weak ones.
    let mut out = BinaryMask::all(h, w, false);
    let mut stack = Vec::new();
    for i in 0..h * w {
        if thin[i] >= hi && !out.data[i] {
            out.data[i] = true;
            stack.push(i);
            while let Some(j) = stack.pop() {
                let (y, x) = (j / w, j % w);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                            continue;
                        }
                        let k = yy as usize * w + xx as usize;
                        if !out.data[k] && thin[k] >= lo {
                            out.data[k] = true;
                            stack.push(k);
                        }
                    }
                }
            }
        }
    }
    out
}
