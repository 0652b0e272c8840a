//! Graph builders shared by the trainable networks: masked means, the
//! structural-similarity map, Sobel edge magnitudes, spectral band energies
//! and the frequency-amplification head. Everything here works on NCHW
//! variables with batch size 1 (losses are assembled per sample).

use crate::filters::{sobel_kernels, ssim_window_1d};
use crate::image::BinaryMask;
use crate::nn::{Graph, Tensor, Var};

/// 0/1 mask as a [1,1,H,W] constant.
pub(crate) fn mask_leaf(g: &mut Graph, mask: &BinaryMask) -> Var {
    let data: Vec<f64> = mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    g.leaf(Tensor::new(vec![1, 1, mask.height, mask.width], data))
}

/// 1-mask as a [1,1,H,W] constant (background indicator).
pub(crate) fn inv_mask_leaf(g: &mut Graph, mask: &BinaryMask) -> Var {
    let data: Vec<f64> = mask.data.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
    g.leaf(Tensor::new(vec![1, 1, mask.height, mask.width], data))
}

/// x*M + (1-M): background forced to white before perceptual/structural
/// comparison, so out-of-mask pixels cannot influence the loss.
pub(crate) fn whiten(g: &mut Graph, x: Var, m: Var, bg: Var) -> Var {
    let inside = g.mul_bcast(x, m);
    g.add_bcast(inside, bg)
}

/// Weighted channel mix as a 1x1 convolution; `weights` must already be
/// normalized. [1,C,H,W] -> [1,1,H,W].
pub(crate) fn channel_mix(g: &mut Graph, x: Var, weights: &[f64]) -> Var {
    let c = g.value(x).dims4().1;
    assert_eq!(weights.len(), c);
    let w = g.leaf(Tensor::new(vec![1, c, 1, 1], weights.to_vec()));
    g.conv2d(x, w, None, 1)
}

/// Masked mean absolute difference: sum(|a-b| * M) / (channels * count).
pub(crate) fn masked_mean_abs(g: &mut Graph, a: Var, b: Var, m: Var, count: f64) -> Var {
    let c = g.value(a).dims4().1;
    let d = g.sub(a, b);
    let ad = g.abs(d);
    let masked = g.mul_bcast(ad, m);
    let s = g.sum(masked);
    g.mul_scalar(s, 1.0 / (c as f64 * count))
}

/// Depthwise convolution with a fixed separable window (outer product of
/// `taps` with itself), matching a full 2-d window under replicate padding.
fn depthwise_separable(g: &mut Graph, x: Var, taps: &[f64]) -> Var {
    let c = g.value(x).dims4().1;
    let k = taps.len();
    let mut kv = vec![0.0; c * c * k];
    for ci in 0..c {
        for (i, &t) in taps.iter().enumerate() {
            kv[(ci * c + ci) * k + i] = t;
        }
    }
    let kcol = g.leaf(Tensor::new(vec![c, c, k, 1], kv.clone()));
    let krow = g.leaf(Tensor::new(vec![c, c, 1, k], kv));
    let y = g.conv2d(x, kcol, None, 1);
    g.conv2d(y, krow, None, 1)
}

/// 1 - masked mean of the structural-similarity map between `a` and `b`
/// (Gaussian 11x11 window, C1=1e-4, C2=9e-4). Inputs should already be
/// whitened/masked so border windows cannot leak unmasked pixels.
pub(crate) fn ssim_loss_masked(g: &mut Graph, a: Var, b: Var, m: Var, count: f64) -> Var {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let taps = ssim_window_1d();
    let c = g.value(a).dims4().1 as f64;
    let mu_a = depthwise_separable(g, a, &taps);
    let mu_b = depthwise_separable(g, b, &taps);
    let aa = g.mul(a, a);
    let bb = g.mul(b, b);
    let ab = g.mul(a, b);
    let e_aa = depthwise_separable(g, aa, &taps);
    let e_bb = depthwise_separable(g, bb, &taps);
    let e_ab = depthwise_separable(g, ab, &taps);
    let mu_a2 = g.mul(mu_a, mu_a);
    let mu_b2 = g.mul(mu_b, mu_b);
    let mu_ab = g.mul(mu_a, mu_b);
    let var_a = g.sub(e_aa, mu_a2);
    let var_b = g.sub(e_bb, mu_b2);
    let cov = g.sub(e_ab, mu_ab);
    let n1 = g.mul_scalar(mu_ab, 2.0);
    let n1 = g.add_scalar(n1, C1);
    let n2 = g.mul_scalar(cov, 2.0);
    let n2 = g.add_scalar(n2, C2);
    let num = g.mul(n1, n2);
    let d1 = g.add(mu_a2, mu_b2);
    let d1 = g.add_scalar(d1, C1);
    let d2 = g.add(var_a, var_b);
    let d2 = g.add_scalar(d2, C2);
    let den = g.mul(d1, d2);
    let map = g.div(num, den);
    let masked = g.mul_bcast(map, m);
    let s = g.sum(masked);
    let mean = g.mul_scalar(s, 1.0 / (c * count));
    let neg = g.mul_scalar(mean, -1.0);
    g.add_scalar(neg, 1.0)
}

/// Sobel gradient magnitude of a single-channel variable, with a small
/// floor keeping sqrt differentiable at zero-gradient pixels.
pub(crate) fn sobel_magnitude(g: &mut Graph, x: Var) -> Var {
    let (kx, ky) = sobel_kernels();
    let wx = g.leaf(Tensor::new(vec![1, 1, 3, 3], kx));
    let wy = g.leaf(Tensor::new(vec![1, 1, 3, 3], ky));
    let gx = g.conv2d(x, wx, None, 1);
    let gy = g.conv2d(x, wy, None, 1);
    let gx2 = g.mul(gx, gx);
    let gy2 = g.mul(gy, gy);
    let s = g.add(gx2, gy2);
    let s = g.add_scalar(s, 1e-24);
    g.sqrt(s)
}

/// Indicator of radial-frequency bins strictly above `f_c`, laid out in the
/// unshifted DFT order, as a [1,1,H,W] constant.
pub(crate) fn highband_leaf(g: &mut Graph, h: usize, w: usize, f_c: usize) -> Var {
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        let fy = if y <= h / 2 { y as f64 } else { y as f64 - h as f64 };
        for x in 0..w {
            let fx = if x <= w / 2 { x as f64 } else { x as f64 - w as f64 };
            let bin = (fy * fy + fx * fx).sqrt().round() as usize;
            if bin > f_c {
                data[y * w + x] = 1.0;
            }
        }
    }
    g.leaf(Tensor::new(vec![1, 1, h, w], data))
}

/// Per-pixel spectral energy above the cutoff band, normalized by pixel
/// count: sum(band * |F(x)|^2) / (H*W).
pub(crate) fn highband_energy(g: &mut Graph, x: Var, band: Var) -> Var {
    let (_, _, h, w) = g.value(x).dims4();
    let re = g.fft2_re(x);
    let im = g.fft2_im(x);
    let re2 = g.mul(re, re);
    let im2 = g.mul(im, im);
    let p = g.add(re2, im2);
    let banded = g.mul_bcast(p, band);
    let s = g.sum(banded);
    g.mul_scalar(s, 1.0 / (h * w) as f64)
}

/// All-ones map with the DC bin zeroed, unshifted layout.
pub(crate) fn dc_zero_leaf(g: &mut Graph, h: usize, w: usize) -> Var {
    let mut data = vec![1.0; h * w];
    data[0] = 0.0;
    g.leaf(Tensor::new(vec![1, 1, h, w], data))
}

/// Frequency amplification of a [1,C,H,W] raster:
/// out = x * (1 + lambda * log(1 + m) / (max(m) + eps)) where m is the
/// spatial magnitude of the inverse transform of the DC-suppressed
/// magnitude spectrum of x. lambda = 0 returns `x` unchanged.
pub(crate) fn freq_amplify_graph(g: &mut Graph, x: Var, lambda: f64, eps: f64) -> Var {
    if lambda == 0.0 {
        return x;
    }
    let (n, _, h, w) = g.value(x).dims4();
    assert_eq!(n, 1, "amplification is applied per sample");
    // Floors keep sqrt differentiable at exactly-zero bins; the composite
    // derivative re/sqrt(re^2+im^2+floor) is bounded by 1 regardless of the
    // floor, so it can sit far below any real signal energy.
    let re = g.fft2_re(x);
    let im = g.fft2_im(x);
    let re2 = g.mul(re, re);
    let im2 = g.mul(im, im);
    let p = g.add(re2, im2);
    let p = g.add_scalar(p, 1e-40);
    let mag = g.sqrt(p);
    let dc = dc_zero_leaf(g, h, w);
    let magh = g.mul_bcast(mag, dc);
    let sre = g.ifft2_re(magh);
    let sim = g.ifft2_im(magh);
    let sre2 = g.mul(sre, sre);
    let sim2 = g.mul(sim, sim);
    let sp = g.add(sre2, sim2);
    let sp = g.add_scalar(sp, 1e-40);
    let m = g.sqrt(sp);
    let mx = g.max_all(m);
    let den = g.add_scalar(mx, eps);
    let denb = g.bcast_scalar(den, g.value(m).shape.clone());
    let m1 = g.add_scalar(m, 1.0);
    let lg = g.log(m1);
    let ratio = g.div(lg, denb);
    let gain = g.mul_scalar(ratio, lambda);
    let factor = g.add_scalar(gain, 1.0);
    g.mul(x, factor)
}

/// Population standard deviation per non-overlapping patch, weighted by the
/// per-patch mean of `wmap`, averaged over patches:
/// mean_p(sigma_p(x) * wbar_p). `x` and `wmap` are [1,1,H,W].
pub(crate) fn patch_contrast_reward(g: &mut Graph, x: Var, wmap: Var, patch: usize) -> Var {
    let mean_p = g.patch_avg_pool(x, patch);
    let x2 = g.mul(x, x);
    let mean_p2 = g.patch_avg_pool(x2, patch);
    let m2 = g.mul(mean_p, mean_p);
    let var = g.sub(mean_p2, m2);
    let var = g.relu(var); // guard tiny negative rounding
    let var = g.add_scalar(var, 1e-24);
    let sigma = g.sqrt(var);
    let wbar = g.patch_avg_pool(wmap, patch);
    let weighted = g.mul(sigma, wbar);
    g.mean(weighted)
}
