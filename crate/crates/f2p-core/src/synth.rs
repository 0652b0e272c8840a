//! Synthetic flash/non-flash fingerprint corpus generation.
//!
//! Ridge patterns are grown from analytic orientation fields (loop, whorl,
//! arch) by iterated oriented Gabor filtering of seeded noise, then rendered
//! into a bright high-contrast flash frame (with a low-frequency glow and a
//! specular blob) and a dim, blurred, geometrically jittered non-flash frame.
//! The jitter applied to the non-flash frame is returned as ground truth so
//! registration can be scored exactly. All randomness flows from explicit
//! seeds; regenerating a corpus with the same config is byte-identical.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{F2pError, F2pResult};
use crate::geometry::OrientationField;
use crate::image::{BinaryMask, Fill, ImageF};
use crate::rng::SeededRng;

/// Global ridge-flow topology of a synthetic print.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatternKind {
    /// Half-turn singularity at the core (Poincaré index +1/2).
    Loop,
    /// Concentric ridges around the core (Poincaré index +1).
    Whorl,
    /// Smooth bowed ridges, no singularity (Poincaré index 0 everywhere).
    Arch,
}

impl PatternKind {
    pub const ALL: [PatternKind; 3] = [PatternKind::Loop, PatternKind::Whorl, PatternKind::Arch];
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PatternKind::Loop => "loop",
            PatternKind::Whorl => "whorl",
            PatternKind::Arch => "arch",
        };
        f.write_str(s)
    }
}

impl FromStr for PatternKind {
    type Err = F2pError;

    fn from_str(s: &str) -> F2pResult<Self> {
        match s {
            "loop" => Ok(PatternKind::Loop),
            "whorl" => Ok(PatternKind::Whorl),
            "arch" => Ok(PatternKind::Arch),
            other => Err(F2pError::invalid(format!("unknown pattern kind '{other}'"))),
        }
    }
}

/// Ridge tangent angle in [0, π) for a phase gradient (gx, gy): ridges are
/// level sets of the phase, so the tangent is the gradient rotated by π/2.
fn tangent(gx: f64, gy: f64) -> f64 {
    gx.atan2(-gy).rem_euclid(PI)
}

/// Analytic ridge orientation at pixel (x, y) for a pattern kind with core
/// (cx, cy). `span` is the image side, used to scale the arch bow.
fn analytic_orientation(kind: PatternKind, core: (f64, f64), span: f64, x: f64, y: f64) -> f64 {
    let (cx, cy) = core;
    let dx = x - cx;
    let dy = y - cy;
    match kind {
        // Phase ∝ Im √z around the core: gradient direction is φ/2 + π/2,
        // so the ridge tangent is φ/2. Winding of π per turn → index +1/2.
        PatternKind::Loop => (dy.atan2(dx) * 0.5).rem_euclid(PI),
        // Concentric phase ∝ r: gradient is radial, tangent is φ + π/2.
        // Winding of 2π per turn → index +1.
        PatternKind::Whorl => (dy.atan2(dx) + PI / 2.0).rem_euclid(PI),
        // Phase ∝ y − d·cos(πx/W): smooth, near-horizontal bowed ridges.
        PatternKind::Arch => {
            let d = span / 6.0;
            let gx = d * (PI / span) * (PI * x / span).sin();
            tangent(gx, 1.0)
        }
    }
}

/// Build the analytic orientation field of a pattern on a block grid.
/// `size` must be a positive multiple of `block` and `block` ≥ 4 so the
/// field is compatible with the measured-orientation block contract.
pub fn synth_orientation(
    kind: PatternKind,
    core: (f64, f64),
    size: usize,
    block: usize,
) -> F2pResult<OrientationField> {
    if block < 4 {
        return Err(F2pError::invalid("orientation block must be >= 4"));
    }
    if size == 0 || size % block != 0 {
        return Err(F2pError::invalid(format!(
            "size {size} must be a positive multiple of block {block}"
        )));
    }
    let rows = size / block;
    let mut angle = Vec::with_capacity(rows * rows);
    let mut coherence = Vec::with_capacity(rows * rows);
    for r in 0..rows {
        for c in 0..rows {
            // Block angle = doubled-angle mean over the block's pixels, the
            // same aggregate a measured orientation field reports; its
            // magnitude is the block's true analytic coherence.
            let mut sx = 0.0;
            let mut sy = 0.0;
            for py in 0..block {
                for px in 0..block {
                    let x = (c * block + px) as f64;
                    let y = (r * block + py) as f64;
                    let a = 2.0 * analytic_orientation(kind, core, size as f64, x, y);
                    sx += a.cos();
                    sy += a.sin();
                }
            }
            let nblk = (block * block) as f64;
            angle.push((0.5 * sy.atan2(sx)).rem_euclid(PI));
            coherence.push((sx * sx + sy * sy).sqrt() / nblk);
        }
    }
    Ok(OrientationField::from_angles(block, rows, rows, angle, coherence))
}

/// Per-pixel ridge orientation by bilinear interpolation of the block field
/// in the doubled-angle plane (smooth across the mod-π wrap).
fn pixel_orientation(field: &OrientationField, h: usize, w: usize) -> Vec<f64> {
    let b = field.block_size as f64;
    let mut theta = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let fr = ((y as f64 + 0.5) / b - 0.5).clamp(0.0, field.rows as f64 - 1.0);
            let fc = ((x as f64 + 0.5) / b - 0.5).clamp(0.0, field.cols as f64 - 1.0);
            let r0 = fr.floor() as usize;
            let c0 = fc.floor() as usize;
            let r1 = (r0 + 1).min(field.rows - 1);
            let c1 = (c0 + 1).min(field.cols - 1);
            let (ty, tx) = (fr - r0 as f64, fc - c0 as f64);
            let mut sx = 0.0;
            let mut sy = 0.0;
            for (rr, cc, wgt) in [
                (r0, c0, (1.0 - ty) * (1.0 - tx)),
                (r0, c1, (1.0 - ty) * tx),
                (r1, c0, ty * (1.0 - tx)),
                (r1, c1, ty * tx),
            ] {
                let a = 2.0 * field.angle[field.at(rr, cc)];
                sx += wgt * a.cos();
                sy += wgt * a.sin();
            }
            theta[y * w + x] = (0.5 * sy.atan2(sx)).rem_euclid(PI);
        }
    }
    theta
}

/// Branch cuts for the sign lift: `x[i]` drops the edge (y,x)–(y,x+1),
/// `y[i]` drops (y,x)–(y+1,x).
struct CutSet {
    x: Vec<bool>,
    y: Vec<bool>,
    /// Centers of the detected half-integer singular plaquettes.
    cores: Vec<(f64, f64)>,
}

fn wrap_pi(a: f64) -> f64 {
    let mut d = (a + PI).rem_euclid(2.0 * PI) - PI;
    if d <= -PI {
        d += 2.0 * PI;
    }
    d
}

/// Find half-integer orientation singularities on the pixel lattice (odd
/// doubled-angle winding around a 2×2 plaquette) and cut a straight ray
/// from each to the nearest image boundary. Half-integer cores admit no
/// globally consistent normal sign; the even cosine rendering hides the
/// phase flip across the cut, and a straight cut keeps the least-squares
/// solution near its odd-symmetric ideal.
fn branch_cuts(theta: &[f64], h: usize, w: usize) -> CutSet {
    let mut cuts = CutSet { x: vec![false; h * w], y: vec![false; h * w], cores: Vec::new() };
    for py in 0..h - 1 {
        for px in 0..w - 1 {
            let quad = [py * w + px, py * w + px + 1, (py + 1) * w + px + 1, (py + 1) * w + px];
            let mut winding = 0.0;
            for k in 0..4 {
                winding += wrap_pi(2.0 * theta[quad[(k + 1) % 4]] - 2.0 * theta[quad[k]]);
            }
            let doubled = (winding / (2.0 * PI)).round() as i64;
            if doubled % 2 == 0 {
                continue;
            }
            cuts.cores.push((px as f64 + 0.5, py as f64 + 0.5));
            // Distances from the plaquette to each boundary; cut toward the
            // nearest one, tie-broken in a fixed order.
            let options = [
                (px + 1, 0usize),          // left
                (w - 1 - px, 1),           // right
                (py + 1, 2),               // up
                (h - 1 - py, 3),           // down
            ];
            let &(_, dir) = options.iter().min_by_key(|(d, o)| (*d, *o)).unwrap();
            match dir {
                0 => {
                    for x in 0..=px {
                        cuts.y[py * w + x] = true;
                    }
                }
                1 => {
                    for x in px + 1..w {
                        cuts.y[py * w + x] = true;
                    }
                }
                2 => {
                    for y in 0..=py {
                        cuts.x[y * w + px] = true;
                    }
                }
                _ => {
                    for y in py + 1..h {
                        cuts.x[y * w + px] = true;
                    }
                }
            }
        }
    }
    cuts
}

/// Choose a consistent sign for the ridge normal at every pixel by BFS
/// propagation on the cut-open grid (orientations are mod π, so the normal
/// direction is only defined up to ±1 locally). Any residual conflict edges
/// are appended to the cut set.
fn propagate_normal_signs(theta: &[f64], h: usize, w: usize, cuts: &mut CutSet) -> Vec<f64> {
    let mut sign = vec![0.0f64; h * w];
    let mut queue = std::collections::VecDeque::new();
    sign[0] = 1.0;
    queue.push_back(0usize);
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / w, i % w);
        let (ny, nx) = ((theta[i] + PI / 2.0).sin(), (theta[i] + PI / 2.0).cos());
        let mut visit = |j: usize, sign: &mut Vec<f64>, queue: &mut std::collections::VecDeque<usize>| {
            if sign[j] != 0.0 {
                return;
            }
            let (my, mx) = ((theta[j] + PI / 2.0).sin(), (theta[j] + PI / 2.0).cos());
            let dot = nx * mx + ny * my;
            sign[j] = if dot >= 0.0 { sign[i] } else { -sign[i] };
            queue.push_back(j);
        };
        if x + 1 < w && !cuts.x[i] {
            visit(i + 1, &mut sign, &mut queue);
        }
        if x > 0 && !cuts.x[i - 1] {
            visit(i - 1, &mut sign, &mut queue);
        }
        if y + 1 < h && !cuts.y[i] {
            visit(i + w, &mut sign, &mut queue);
        }
        if y > 0 && !cuts.y[i - w] {
            visit(i - w, &mut sign, &mut queue);
        }
    }
    // Unreached pixels (cut-isolated corners) default to +1; conflicts left
    // over from even-index structure join the cut.
    for s in sign.iter_mut() {
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    let conflict = |i: usize, j: usize| -> bool {
        let (a, b) = (theta[i] + PI / 2.0, theta[j] + PI / 2.0);
        sign[i] * sign[j] * (a.cos() * b.cos() + a.sin() * b.sin()) < 0.0
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w && !cuts.x[i] && conflict(i, i + 1) {
                cuts.x[i] = true;
            }
            if y + 1 < h && !cuts.y[i] && conflict(i, i + w) {
                cuts.y[i] = true;
            }
        }
    }
    sign
}

/// FFT Poisson solve of ∇²ψ = div with Neumann boundaries via an even
/// mirror extension (5-point Laplacian eigenvalues 2cos(πk/n) − 2 per axis).
/// Used as the initial guess for the cracked least-squares solve.
fn poisson_fft(div: &[f64], h: usize, w: usize) -> Vec<f64> {
    use rustfft::num_complex::Complex;
    let (hh, ww) = (2 * h, 2 * w);
    let mut buf = vec![Complex::new(0.0, 0.0); hh * ww];
    for y in 0..hh {
        let my = if y < h { y } else { hh - 1 - y };
        for x in 0..ww {
            let mx = if x < w { x } else { ww - 1 - x };
            buf[y * ww + x] = Complex::new(div[my * w + mx], 0.0);
        }
    }
    crate::fft::fft2_inplace(&mut buf, hh, ww, false);
    for ky_i in 0..hh {
        let ly = 2.0 * (PI * ky_i as f64 / h as f64).cos() - 2.0;
        for kx_i in 0..ww {
            let lx = 2.0 * (PI * kx_i as f64 / w as f64).cos() - 2.0;
            let lam = ly + lx;
            let i = ky_i * ww + kx_i;
            if lam.abs() < 1e-12 {
                buf[i] = Complex::new(0.0, 0.0);
            } else {
                buf[i] /= lam;
            }
        }
    }
    crate::fft::fft2_inplace(&mut buf, hh, ww, true);
    let scale = 1.0 / (hh * ww) as f64;
    let mut psi = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            psi[y * w + x] = buf[y * ww + x].re * scale;
        }
    }
    psi
}

/// Retained-edge flux targets for the least-squares integration. Edges whose
/// endpoint normals disagree in sign (the branch cut of a half-integer
/// singularity) are dropped entirely: the phase is allowed to jump there and
/// the even cosine rendering keeps the image continuous.
struct EdgeFlux {
    /// Flux between (y,x) and (y,x+1); NaN marks a dropped edge.
    fx: Vec<f64>,
    /// Flux between (y,x) and (y+1,x); NaN marks a dropped edge.
    fy: Vec<f64>,
}

fn edge_flux(kx: &[f64], ky: &[f64], cuts: &CutSet, h: usize, w: usize) -> EdgeFlux {
    let mut fx = vec![f64::NAN; h * w];
    let mut fy = vec![f64::NAN; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w && !cuts.x[i] {
                fx[i] = 0.5 * (kx[i] + kx[i + 1]);
            }
            if y + 1 < h && !cuts.y[i] {
                fy[i] = 0.5 * (ky[i] + ky[i + w]);
            }
        }
    }
    EdgeFlux { fx, fy }
}

/// Least-squares phase integration over the cracked grid: minimize
/// Σ_retained (ψ_q − ψ_p − f_pq)² + μ Σ_cut (ψ_p + ψ_q − f̃_pq)² by conjugate
/// gradients, warm-started from the uncracked FFT solution. Crossing the cut
/// flips the branch, so the continuation of the far side at p is −ψ; the
/// second term with f̃ = ½(k_q − k_p) makes ψ_p match that continuation one
/// half-step past the cut, which keeps the even cosine rendering continuous
/// there without stamping a crest line along the cut. It also fixes the
/// gauge whenever a cut exists.
fn poisson_integrate(kx: &[f64], ky: &[f64], flux: &EdgeFlux, h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    // Seam edges (cut dual edges between in-bounds neighbours) and their
    // antiperiodic targets.
    let mut seam: Vec<(usize, usize, f64)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w && flux.fx[i].is_nan() {
                seam.push((i, i + 1, 0.5 * (kx[i + 1] - kx[i])));
            }
            if y + 1 < h && flux.fy[i].is_nan() {
                seam.push((i, i + w, 0.5 * (ky[i + w] - ky[i])));
            }
        }
    }

    // Right-hand side b[p] = −Σ_q f_pq and the divergence for the warm start.
    let mut b = vec![0.0; n];
    let mut div = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut acc = 0.0;
            if x + 1 < w && flux.fx[i].is_finite() {
                acc += flux.fx[i];
            }
            if x > 0 && flux.fx[i - 1].is_finite() {
                acc -= flux.fx[i - 1];
            }
            if y + 1 < h && flux.fy[i].is_finite() {
                acc += flux.fy[i];
            }
            if y > 0 && flux.fy[i - w].is_finite() {
                acc -= flux.fy[i - w];
            }
            b[i] = -acc;
            let right = if x + 1 < w { 0.5 * (kx[i] + kx[i + 1]) } else { 0.0 };
            let left = if x > 0 { 0.5 * (kx[i] + kx[i - 1]) } else { 0.0 };
            let down = if y + 1 < h { 0.5 * (ky[i] + ky[i + w]) } else { 0.0 };
            let up = if y > 0 { 0.5 * (ky[i] + ky[i - w]) } else { 0.0 };
            div[i] = right - left + down - up;
        }
    }

    // A = retained-edge graph Laplacian plus the seam coupling
    // (+μ on both diagonals and the off-diagonal of each seam pair).
    let mu = 1.0;
    for &(i, j, f) in &seam {
        b[i] += mu * f;
        b[j] += mu * f;
    }
    let apply = |x: &[f64], out: &mut [f64]| {
        for y in 0..h {
            for xx in 0..w {
                let i = y * w + xx;
                let mut acc = 0.0;
                if xx + 1 < w && flux.fx[i].is_finite() {
                    acc += x[i] - x[i + 1];
                }
                if xx > 0 && flux.fx[i - 1].is_finite() {
                    acc += x[i] - x[i - 1];
                }
                if y + 1 < h && flux.fy[i].is_finite() {
                    acc += x[i] - x[i + w];
                }
                if y > 0 && flux.fy[i - w].is_finite() {
                    acc += x[i] - x[i - w];
                }
                out[i] = acc;
            }
        }
        for &(i, j, _) in &seam {
            let s = mu * (x[i] + x[j]);
            out[i] += s;
            out[j] += s;
        }
    };
    let demean = |v: &mut [f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        for t in v.iter_mut() {
            *t -= m;
        }
    };
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(p, q)| p * q).sum::<f64>();

    // Without a seam the Laplacian nullspace is the constants: work in the
    // mean-zero subspace. With a seam the system is strictly SPD.
    let pinned = !seam.is_empty();
    if !pinned {
        demean(&mut b);
    }

    let mut x = poisson_fft(&div, h, w);
    if !pinned {
        demean(&mut x);
    }
    let mut r = vec![0.0; n];
    apply(&x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    if !pinned {
        demean(&mut r);
    }
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let tol = 1e-16 * n as f64;
    let mut ap = vec![0.0; n];
    for _ in 0..8 * (h + w) {
        if rs <= tol {
            break;
        }
        apply(&p, &mut ap);
        let denom = dot(&p, &ap);
        if denom <= 0.0 {
            break;
        }
        let alpha = rs / denom;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if !pinned {
            demean(&mut r);
        }
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    x
}

/// Render a ridge pattern that follows `field` at the given wavelength.
/// The mod-π orientation is lifted to a signed wavevector (BFS sign
/// propagation), integrated into a smooth ridge phase by a least-squares
/// Poisson solve, perturbed by a few seeded smooth phase bumps (minutiae),
/// and rendered as `0.5 + 0.5·cos(ψ)`. Output is single-channel in [0, 1]
/// of side `field.rows * field.block_size`.
pub fn synth_fingerprint(
    field: &OrientationField,
    wavelength: f64,
    seed: u64,
) -> F2pResult<ImageF> {
    if wavelength < 4.0 {
        return Err(F2pError::invalid(format!(
            "ridge wavelength {wavelength} must be >= 4 px"
        )));
    }
    if field.rows == 0 || field.cols == 0 {
        return Err(F2pError::degenerate("empty orientation field"));
    }
    let h = field.rows * field.block_size;
    let w = field.cols * field.block_size;

    let theta = pixel_orientation(field, h, w);
    let mut cuts = branch_cuts(&theta, h, w);
    let sign = propagate_normal_signs(&theta, h, w, &mut cuts);
    let k0 = 2.0 * PI / wavelength;
    let n = h * w;

    // The constant-magnitude wavevector of a curved field is not curl-free
    // (a loop's true phase gradient varies like 1/√r), so a single
    // least-squares pass trades direction error for the magnitude
    // constraint. Iterate with the magnitude re-estimated from the previous
    // solution (renormalized so the mean stays at 2π/λ) and only the
    // direction pinned to the field: the fixpoint has ∇ψ ∥ field exactly.
    let mut amp = vec![k0; n];
    let mut psi = vec![0.0; n];
    let mut flux = EdgeFlux { fx: vec![f64::NAN; n], fy: vec![f64::NAN; n] };
    let mut kx = vec![0.0; n];
    let mut ky = vec![0.0; n];
    for pass in 0..4 {
        for i in 0..n {
            let nu = theta[i] + PI / 2.0;
            kx[i] = amp[i] * sign[i] * nu.cos();
            ky[i] = amp[i] * sign[i] * nu.sin();
        }
        flux = edge_flux(&kx, &ky, &cuts, h, w);
        psi = poisson_integrate(&kx, &ky, &flux, h, w);
        if pass == 3 {
            break;
        }
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let mut gx = 0.0;
                let mut nx = 0.0f64;
                if x + 1 < w && flux.fx[i].is_finite() {
                    gx += psi[i + 1] - psi[i];
                    nx += 1.0;
                }
                if x > 0 && flux.fx[i - 1].is_finite() {
                    gx += psi[i] - psi[i - 1];
                    nx += 1.0;
                }
                let mut gy = 0.0;
                let mut ny = 0.0f64;
                if y + 1 < h && flux.fy[i].is_finite() {
                    gy += psi[i + w] - psi[i];
                    ny += 1.0;
                }
                if y > 0 && flux.fy[i - w].is_finite() {
                    gy += psi[i] - psi[i - w];
                    ny += 1.0;
                }
                let g = ((gx / nx.max(1.0)).powi(2) + (gy / ny.max(1.0)).powi(2)).sqrt();
                amp[i] = g.clamp(0.3 * k0, 3.0 * k0);
                total += amp[i];
            }
        }
        let scale = k0 * n as f64 / total;
        for a in amp.iter_mut() {
            *a = (*a * scale).clamp(0.3 * k0, 3.0 * k0);
        }
    }

    // Seeded minutiae: a few gentle localized phase bumps that displace
    // ridges by a fraction of a period. Their amplitude/width ratio keeps
    // the induced local orientation tilt under the field tolerance.
    let mut rng = SeededRng::derive(seed, 0x5f17);
    let n_bumps = 3 + rng.below(3) as usize;
    let mut bumps = Vec::with_capacity(n_bumps);
    let clear = 1.8 * wavelength;
    for _ in 0..n_bumps {
        let mut cx = w as f64 * rng.uniform_in(0.2, 0.8);
        let mut cy = h as f64 * rng.uniform_in(0.2, 0.8);
        // Keep minutiae off the singular core, where the orientation budget
        // is already spent on curvature.
        for _ in 0..24 {
            let near_core = cuts
                .cores
                .iter()
                .any(|&(qx, qy)| ((cx - qx).powi(2) + (cy - qy).powi(2)).sqrt() < clear);
            let near_bump = bumps
                .iter()
                .any(|&(qx, qy, _, _): &(f64, f64, f64, f64)| {
                    ((cx - qx).powi(2) + (cy - qy).powi(2)).sqrt() < clear * 1.5
                });
            if !near_core && !near_bump {
                break;
            }
            cx = w as f64 * rng.uniform_in(0.2, 0.8);
            cy = h as f64 * rng.uniform_in(0.2, 0.8);
        }
        let amp = rng.uniform_in(0.12 * PI, 0.22 * PI) * if rng.below(2) == 0 { 1.0 } else { -1.0 };
        let sigma = wavelength * rng.uniform_in(1.6, 2.0);
        bumps.push((cx, cy, amp, sigma));
    }
    let mut out = ImageF::zeros(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let mut p = psi[y * w + x];
            for &(cx, cy, amp, sigma) in &bumps {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                p += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            out.set(0, y, x, 0.5 + 0.5 * p.cos());
        }
    }
    Ok(out)
}

/// Full appearance model for one capture pair.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub size: usize,
    pub kind: PatternKind,
    /// Core position (x, y) in pixels.
    pub core: (f64, f64),
    pub wavelength: f64,
    /// Finger ellipse (cx, cy, rx, ry) in pixels; outside is background.
    pub ellipse: (f64, f64, f64, f64),
    /// Per-channel ridge contrast gains (R, G, B). Blue carries the
    /// strongest ridge modulation under flash illumination.
    pub ridge_gain: (f64, f64, f64),
    /// Extra red in the flash skin base (blood under skin).
    pub red_bias: f64,
    /// Peak amplitude of the low-frequency flash glow.
    pub glow_amp: f64,
    /// Gaussian radius of the glow, in pixels.
    pub glow_scale: f64,
    /// Peak amplitude of the small specular highlight (flash only).
    pub specular_amp: f64,
    /// Non-flash translation jitter is drawn uniformly from ±jitter_px.
    pub jitter_px: f64,
    /// Non-flash rotation jitter is drawn uniformly from ±jitter_deg.
    pub jitter_deg: f64,
    /// Per-pixel Gaussian sensor noise σ (both frames).
    pub noise_sigma: f64,
}

impl SynthSpec {
    /// Neutral defaults for a given canvas side.
    pub fn new(size: usize, kind: PatternKind) -> SynthSpec {
        let s = size as f64;
        SynthSpec {
            size,
            kind,
            core: (s * 0.5, s * 0.5),
            wavelength: (s / 8.0).max(4.5),
            ellipse: (s * 0.5, s * 0.5, s * 0.42, s * 0.46),
            ridge_gain: (0.17, 0.24, 0.31),
            red_bias: 0.06,
            glow_amp: 0.10,
            glow_scale: s / 3.0,
            specular_amp: 0.04,
            jitter_px: s / 16.0,
            jitter_deg: 3.0,
            noise_sigma: 0.008,
        }
    }

    pub fn validate(&self) -> F2pResult<()> {
        if self.size < 32 || self.size % 8 != 0 {
            return Err(F2pError::invalid("size must be >= 32 and a multiple of 8"));
        }
        if self.wavelength < 4.0 {
            return Err(F2pError::invalid("wavelength must be >= 4 px"));
        }
        let s = self.size as f64;
        if !(0.0..s).contains(&self.core.0) || !(0.0..s).contains(&self.core.1) {
            return Err(F2pError::invalid("core must lie inside the canvas"));
        }
        let (_, _, rx, ry) = self.ellipse;
        if rx < self.wavelength || ry < self.wavelength {
            return Err(F2pError::invalid("ellipse radii must exceed the ridge wavelength"));
        }
        for g in [self.ridge_gain.0, self.ridge_gain.1, self.ridge_gain.2] {
            if !(0.0..=0.4).contains(&g) {
                return Err(F2pError::invalid("ridge gains must lie in [0, 0.4]"));
            }
        }
        // Brightest possible flash pixel per channel must stay inside [0, 1]
        // with ~3σ noise headroom, so clamping never eats signal.
        let gains = [self.ridge_gain.0, self.ridge_gain.1, self.ridge_gain.2];
        for c in 0..3 {
            let bias = if c == 0 { self.red_bias } else { 0.0 };
            let peak = FLASH_BASE + bias + gains[c] + self.glow_amp * GLOW_TINT[c]
                + self.specular_amp + 3.0 * self.noise_sigma;
            if peak > 1.0 {
                return Err(F2pError::invalid(format!(
                    "flash amplitude budget exceeded in channel {c}: peak {peak:.3} > 1"
                )));
            }
        }
        if self.jitter_px < 0.0 || self.jitter_deg < 0.0 || self.noise_sigma < 0.0 {
            return Err(F2pError::invalid("jitter and noise parameters must be >= 0"));
        }
        Ok(())
    }

    /// Orientation block size used for this canvas.
    pub fn block(&self) -> usize {
        (self.size / 8).max(4)
    }
}

const FLASH_BASE: f64 = 0.50;
/// Channel weighting of the near-white flash glow.
const GLOW_TINT: [f64; 3] = [1.0, 0.95, 0.88];
const NONFLASH_BASE_SCALE: f64 = 0.55;
const NONFLASH_GAIN_SCALE: f64 = 0.45;
const NONFLASH_GLOW_SCALE: f64 = 0.30;
const BACKGROUND: f64 = 0.06;

/// A rendered capture pair with its ground-truth misalignment: the
/// non-flash frame is the flash scene rotated by `angle` radians and then
/// translated by (`dx`, `dy`) pixels. `mask` is the finger region in the
/// flash frame.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub flash: ImageF,
    pub nonflash: ImageF,
    pub mask: BinaryMask,
    pub dx: f64,
    pub dy: f64,
    pub angle: f64,
}

fn box_blur3(img: &ImageF) -> ImageF {
    ImageF::from_fn(img.height, img.width, img.channels, |c, y, x| {
        let mut acc = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let sy = (y as i64 + dy).clamp(0, img.height as i64 - 1) as usize;
                let sx = (x as i64 + dx).clamp(0, img.width as i64 - 1) as usize;
                acc += img.get(c, sy, sx);
            }
        }
        acc / 9.0
    })
}

/// Render a flash/non-flash pair from a clean single-channel print.
/// The flash frame is bright with strong ridge contrast (strongest in the
/// blue channel), a low-frequency glow and a specular blob; the non-flash
/// frame is dim, lower-contrast, slightly defocused, with the same scene
/// rotated and translated by a seeded jitter that is returned as ground
/// truth. Both frames carry seeded Gaussian sensor noise.
pub fn synth_pair(print: &ImageF, spec: &SynthSpec, seed: u64) -> F2pResult<SynthPair> {
    spec.validate()?;
    if print.channels != 1 || print.height != spec.size || print.width != spec.size {
        return Err(F2pError::invalid(format!(
            "print must be 1x{0}x{0} for this spec, got {1}x{2}x{3}",
            spec.size, print.channels, print.height, print.width
        )));
    }
    let s = spec.size;
    let (ecx, ecy, erx, ery) = spec.ellipse;
    let inside = |x: f64, y: f64| -> bool {
        let u = (x - ecx) / erx;
        let v = (y - ecy) / ery;
        u * u + v * v <= 1.0
    };
    let mask = BinaryMask::from_fn(s, s, |y, x| inside(x as f64, y as f64));

    let mut rng = SeededRng::derive(seed, 0x9a13);
    // Glow center wanders a little around the ellipse center per capture.
    let gx = ecx + rng.uniform_in(-0.08, 0.08) * s as f64;
    let gy = ecy + rng.uniform_in(-0.08, 0.08) * s as f64;
    // Specular blob somewhere in the inner half of the finger.
    let px = ecx + rng.uniform_in(-0.5, 0.5) * erx;
    let py = ecy + rng.uniform_in(-0.5, 0.5) * ery;
    let spec_sigma = s as f64 / 12.0;

    let glow = |x: f64, y: f64| -> f64 {
        let d2 = (x - gx) * (x - gx) + (y - gy) * (y - gy);
        (-d2 / (2.0 * spec.glow_scale * spec.glow_scale)).exp()
    };
    let highlight = |x: f64, y: f64| -> f64 {
        let d2 = (x - px) * (x - px) + (y - py) * (y - py);
        (-d2 / (2.0 * spec_sigma * spec_sigma)).exp()
    };

    let gains = [spec.ridge_gain.0, spec.ridge_gain.1, spec.ridge_gain.2];
    let base = [FLASH_BASE + spec.red_bias, FLASH_BASE, FLASH_BASE];
    let glow_w = GLOW_TINT;

    let blurred = box_blur3(print);
    let mut flash = ImageF::from_fn(s, s, 3, |c, y, x| {
        let (xf, yf) = (x as f64, y as f64);
        if !inside(xf, yf) {
            return BACKGROUND;
        }
        let ridge = 2.0 * (print.get(0, y, x) - 0.5);
        base[c] + gains[c] * ridge + spec.glow_amp * glow_w[c] * glow(xf, yf)
            + spec.specular_amp * highlight(xf, yf)
    });
    let mut nonflash = ImageF::from_fn(s, s, 3, |c, y, x| {
        let (xf, yf) = (x as f64, y as f64);
        if !inside(xf, yf) {
            return BACKGROUND * 0.7;
        }
        let ridge = 2.0 * (blurred.get(0, y, x) - 0.5);
        base[c] * NONFLASH_BASE_SCALE
            + gains[c] * NONFLASH_GAIN_SCALE * ridge
            + spec.glow_amp * NONFLASH_GLOW_SCALE * glow_w[c] * glow(xf, yf)
    });

    // Seeded capture misalignment of the non-flash frame.
    let angle = spec.jitter_deg.to_radians();
    let theta = if spec.jitter_deg > 0.0 { rng.uniform_in(-angle, angle) } else { 0.0 };
    let dx = if spec.jitter_px > 0.0 { rng.uniform_in(-spec.jitter_px, spec.jitter_px) } else { 0.0 };
    let dy = if spec.jitter_px > 0.0 { rng.uniform_in(-spec.jitter_px, spec.jitter_px) } else { 0.0 };
    if theta != 0.0 {
        nonflash = nonflash.rotate_bilinear(theta, Fill::Black);
    }
    if dx != 0.0 || dy != 0.0 {
        nonflash = nonflash.translate_bilinear(dx, dy, Fill::Black);
    }

    // Sensor noise on both frames, then clamp as a pure safety net (the
    // amplitude budget keeps signal inside [0, 1] already).
    for t in flash.data.iter_mut() {
        *t += spec.noise_sigma * rng.normal();
    }
    for t in nonflash.data.iter_mut() {
        *t += spec.noise_sigma * rng.normal();
    }
    let flash = flash.clamp01();
    let nonflash = nonflash.clamp01();

    Ok(SynthPair { flash, nonflash, mask, dx, dy, angle: theta })
}

/// Corpus layout parameters.
#[derive(Clone, Debug)]
pub struct CorpusConfig {
    pub n_ids: usize,
    pub sessions: usize,
    /// Capture pairs per identity per session.
    pub impressions: usize,
    pub size: usize,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn validate(&self) -> F2pResult<()> {
        if self.n_ids < 2 {
            return Err(F2pError::invalid("corpus needs at least 2 identities"));
        }
        if self.sessions == 0 || self.impressions == 0 {
            return Err(F2pError::invalid("sessions and impressions must be >= 1"));
        }
        if self.size < 32 || self.size % 8 != 0 {
            return Err(F2pError::invalid("size must be >= 32 and a multiple of 8"));
        }
        Ok(())
    }
}

/// One manifest row: a capture pair on disk plus its generation ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub identity: String,
    pub session: u32,
    pub impression: u32,
    pub kind: PatternKind,
    pub core: (f64, f64),
    pub wavelength: f64,
    /// Ground-truth non-flash misalignment (pixels, degrees).
    pub dx: f64,
    pub dy: f64,
    pub angle_deg: f64,
    /// Paths relative to the corpus root.
    pub flash: PathBuf,
    pub nonflash: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusManifest {
    pub records: Vec<PairRecord>,
}

const MANIFEST_HEADER: &str =
    "id\tsession\timpression\tkind\tcore_x\tcore_y\twavelength\tdx\tdy\tangle_deg\tflash\tnonflash\tmask";

impl CorpusManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.identity,
                r.session,
                r.impression,
                r.kind,
                r.core.0,
                r.core.1,
                r.wavelength,
                r.dx,
                r.dy,
                r.angle_deg,
                r.flash.display(),
                r.nonflash.display(),
                r.mask.display(),
            ));
        }
        out
    }

    pub fn parse(text: &str) -> F2pResult<CorpusManifest> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h == MANIFEST_HEADER => {}
            _ => return Err(F2pError::invalid("manifest missing header line")),
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 13 {
                return Err(F2pError::invalid(format!(
                    "manifest row {} has {} fields, expected 13",
                    i + 1,
                    f.len()
                )));
            }
            let num = |s: &str, what: &str| -> F2pResult<f64> {
                s.parse::<f64>()
                    .map_err(|_| F2pError::invalid(format!("manifest row {}: bad {what} '{s}'", i + 1)))
            };
            records.push(PairRecord {
                identity: f[0].to_string(),
                session: f[1]
                    .parse()
                    .map_err(|_| F2pError::invalid(format!("manifest row {}: bad session", i + 1)))?,
                impression: f[2]
                    .parse()
                    .map_err(|_| F2pError::invalid(format!("manifest row {}: bad impression", i + 1)))?,
                kind: f[3].parse()?,
                core: (num(f[4], "core_x")?, num(f[5], "core_y")?),
                wavelength: num(f[6], "wavelength")?,
                dx: num(f[7], "dx")?,
                dy: num(f[8], "dy")?,
                angle_deg: num(f[9], "angle_deg")?,
                flash: PathBuf::from(f[10]),
                nonflash: PathBuf::from(f[11]),
                mask: PathBuf::from(f[12]),
            });
        }
        Ok(CorpusManifest { records })
    }

    pub fn save(&self, path: &Path) -> F2pResult<()> {
        std::fs::write(path, self.to_text())
            .map_err(|e| F2pError::Checkpoint(format!("write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> F2pResult<CorpusManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| F2pError::Checkpoint(format!("read {}: {e}", path.display())))?;
        CorpusManifest::parse(&text)
    }
}

/// Identity-level pattern parameters, drawn deterministically from the
/// corpus seed. Kinds cycle so small corpora still cover all three.
fn identity_spec(cfg: &CorpusConfig, id: usize) -> SynthSpec {
    let mut rng = SeededRng::derive(cfg.seed, 0x1d00_0000 + id as u64);
    let s = cfg.size as f64;
    let kind = PatternKind::ALL[id % PatternKind::ALL.len()];
    let mut spec = SynthSpec::new(cfg.size, kind);
    spec.core = (
        s * 0.5 + rng.uniform_in(-0.12, 0.12) * s,
        s * 0.5 + rng.uniform_in(-0.12, 0.12) * s,
    );
    let lo = (s / 10.0).max(4.5);
    let hi = (s / 6.5).max(lo + 1.0);
    spec.wavelength = rng.uniform_in(lo, hi);
    spec.red_bias = rng.uniform_in(0.03, 0.08);
    spec
}

fn pair_label(id: usize, session: usize, imp: usize) -> u64 {
    0x7000_0000_0000 | ((id as u64) << 24) | ((session as u64) << 12) | imp as u64
}

fn mask_to_image(mask: &BinaryMask) -> ImageF {
    ImageF::from_fn(mask.height, mask.width, 1, |_, y, x| {
        if mask.get(y, x) {
            1.0
        } else {
            0.0
        }
    })
}

/// Generate a corpus under `root`:
///
/// ```text
/// root/manifest.tsv
/// root/subjects/<id>/session<k>/<imp>_flash.png
/// root/subjects/<id>/session<k>/<imp>_nonflash.png
/// root/subjects/<id>/session<k>/<imp>_mask.png
/// ```
///
/// Each identity keeps one ridge pattern across all sessions; every capture
/// pair draws its own glow placement, jitter, and sensor noise. The returned
/// manifest is also written to `root/manifest.tsv`.
pub fn synth_corpus(root: &Path, cfg: &CorpusConfig) -> F2pResult<CorpusManifest> {
    cfg.validate()?;
    let io = |e: std::io::Error, what: &str| F2pError::Checkpoint(format!("{what}: {e}"));
    std::fs::create_dir_all(root).map_err(|e| io(e, "create corpus root"))?;

    let mut manifest = CorpusManifest::default();
    for id in 0..cfg.n_ids {
        let spec = identity_spec(cfg, id);
        let field = synth_orientation(spec.kind, spec.core, spec.size, spec.block())?;
        let print = synth_fingerprint(&field, spec.wavelength, SeededRng::derive(cfg.seed, 0x2e00_0000 + id as u64).next_u64())?;
        let identity = format!("s{id:03}");
        for session in 1..=cfg.sessions {
            let dir = root.join("subjects").join(&identity).join(format!("session{session}"));
            std::fs::create_dir_all(&dir).map_err(|e| io(e, "create session dir"))?;
            for imp in 0..cfg.impressions {
                let pair = synth_pair(&print, &spec, SeededRng::derive(cfg.seed, pair_label(id, session, imp)).next_u64())?;
                let rel = PathBuf::from("subjects")
                    .join(&identity)
                    .join(format!("session{session}"));
                let flash_rel = rel.join(format!("{imp:02}_flash.png"));
                let nonflash_rel = rel.join(format!("{imp:02}_nonflash.png"));
                let mask_rel = rel.join(format!("{imp:02}_mask.png"));
                pair.flash.save_png(&root.join(&flash_rel))?;
                pair.nonflash.save_png(&root.join(&nonflash_rel))?;
                mask_to_image(&pair.mask).save_png(&root.join(&mask_rel))?;
                manifest.records.push(PairRecord {
                    identity: identity.clone(),
                    session: session as u32,
                    impression: imp as u32,
                    kind: spec.kind,
                    core: spec.core,
                    wavelength: spec.wavelength,
                    dx: pair.dx,
                    dy: pair.dy,
                    angle_deg: pair.angle.to_degrees(),
                    flash: flash_rel,
                    nonflash: nonflash_rel,
                    mask: mask_rel,
                });
            }
        }
    }
    manifest.save(&root.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enhancer::channel_local_contrast;
    use crate::evaluation::ridge_quality;
    use crate::fft::forward_fft;
    use crate::geometry::{orientation_field, phase_correlate, poincare_index};
    use crate::spectral::{radial_energy_profile, spectral_subtract};

    fn angle_diff(a: f64, b: f64) -> f64 {
        let mut d = (a - b).rem_euclid(PI);
        if d > PI / 2.0 {
            d = PI - d;
        }
        d
    }

    fn core_cell(field: &OrientationField, core: (f64, f64)) -> (usize, usize) {
        let b = field.block_size as f64;
        let r = ((core.1 / b) as usize).clamp(1, field.rows - 2);
        let c = ((core.0 / b) as usize).clamp(1, field.cols - 2);
        (r, c)
    }

    #[test]
    fn analytic_fields_carry_the_right_singularities() {
        let core = (33.0, 31.0);
        for (kind, want) in [
            (PatternKind::Loop, 0.5),
            (PatternKind::Whorl, 1.0),
            (PatternKind::Arch, 0.0),
        ] {
            let field = synth_orientation(kind, core, 64, 8).unwrap();
            let (r, c) = core_cell(&field, core);
            let idx = poincare_index(&field, r, c);
            assert!(
                (idx - want).abs() < 0.26,
                "{kind}: index {idx} at core, want {want}"
            );
            // Away from the core every cell of a print is ordinary.
            let far = poincare_index(&field, if r > 3 { 1 } else { field.rows - 2 }, c);
            let far_want = if kind == PatternKind::Whorl { 0.0 } else { 0.0 };
            assert!(
                (far - far_want).abs() < 0.26,
                "{kind}: far index {far}"
            );
        }
    }

    #[test]
    fn synth_orientation_contract() {
        assert!(synth_orientation(PatternKind::Loop, (10.0, 10.0), 60, 8).is_err());
        assert!(synth_orientation(PatternKind::Loop, (10.0, 10.0), 64, 2).is_err());
        let f = synth_orientation(PatternKind::Arch, (32.0, 32.0), 64, 8).unwrap();
        assert_eq!((f.rows, f.cols), (8, 8));
        assert!(f.angle.iter().all(|a| (0.0..PI).contains(a)));
        assert!(f.coherence.iter().all(|&c| c == 1.0));
    }

    #[test]
    fn fingerprint_follows_the_field() {
        for kind in PatternKind::ALL {
            let core = (31.0, 33.0);
            let field = synth_orientation(kind, core, 64, 8).unwrap();
            let img = synth_fingerprint(&field, 8.0, 7).unwrap();
            assert_eq!((img.height, img.width, img.channels), (64, 64, 1));
            let (lo, hi) = img.min_max();
            assert!(lo >= 0.0 && hi <= 1.0);
            assert!(hi - lo > 0.5, "{kind}: ridge contrast collapsed");

            let measured = orientation_field(&img, 8);
            let mut n = 0;
            let mut worst: f64 = 0.0;
            for r in 1..field.rows - 1 {
                for c in 1..field.cols - 1 {
                    let i = field.at(r, c);
                    if measured.coherence[i] <= 0.8 {
                        continue;
                    }
                    // Blocks at the singularity have no single orientation.
                    let (bx, by) = field.block_center(r, c);
                    if ((bx - core.0).powi(2) + (by - core.1).powi(2)).sqrt() < 10.0 {
                        continue;
                    }
                    n += 1;
                    worst = worst.max(angle_diff(measured.angle[i], field.angle[i]));
                }
            }
            assert!(n >= 10, "{kind}: only {n} coherent blocks");
            assert!(
                worst <= 5.0f64.to_radians(),
                "{kind}: worst orientation error {:.2}°",
                worst.to_degrees()
            );
        }
    }

    #[test]
    fn fingerprint_is_deterministic_and_checks_wavelength() {
        let field = synth_orientation(PatternKind::Loop, (30.0, 30.0), 64, 8).unwrap();
        let a = synth_fingerprint(&field, 8.0, 11).unwrap();
        let b = synth_fingerprint(&field, 8.0, 11).unwrap();
        assert_eq!(a.data, b.data);
        let c = synth_fingerprint(&field, 8.0, 12).unwrap();
        assert_ne!(a.data, c.data);
        assert!(synth_fingerprint(&field, 3.5, 11).is_err());
    }

    #[test]
    fn arch_spectrum_peaks_at_the_ridge_frequency() {
        let field = synth_orientation(PatternKind::Arch, (32.0, 32.0), 64, 8).unwrap();
        let lambda = 8.0;
        let img = synth_fingerprint(&field, lambda, 3).unwrap();
        let spec = forward_fft(&img);
        let prof = radial_energy_profile(&spec);
        let lo = 3;
        let peak = (lo..prof.energy.len())
            .max_by(|&a, &b| prof.energy[a].partial_cmp(&prof.energy[b]).unwrap())
            .unwrap();
        let want = 64.0 / lambda;
        assert!(
            (peak as f64 - want).abs() <= 2.0,
            "spectral peak at radius {peak}, want ≈ {want}"
        );
    }

    #[test]
    fn pair_contract_and_zero_jitter_registration() {
        let mut spec = SynthSpec::new(64, PatternKind::Whorl);
        spec.jitter_px = 0.0;
        spec.jitter_deg = 0.0;
        spec.noise_sigma = 0.002;
        let field = synth_orientation(spec.kind, spec.core, 64, 8).unwrap();
        let print = synth_fingerprint(&field, spec.wavelength, 5).unwrap();
        let pair = synth_pair(&print, &spec, 21).unwrap();
        assert_eq!(pair.flash.channels, 3);
        assert_eq!(pair.nonflash.channels, 3);
        assert_eq!((pair.dx, pair.dy, pair.angle), (0.0, 0.0, 0.0));
        assert!(pair.mask.count() > 64 * 64 / 3);

        let t = phase_correlate(&pair.flash.to_luma(), &pair.nonflash.to_luma()).unwrap();
        assert!(
            t.dx.abs() <= 0.2 && t.dy.abs() <= 0.2,
            "zero-jitter pair registered at ({}, {})",
            t.dx,
            t.dy
        );

        // Determinism and seed sensitivity.
        let again = synth_pair(&print, &spec, 21).unwrap();
        assert_eq!(pair.flash.data, again.flash.data);
        assert_eq!(pair.nonflash.data, again.nonflash.data);
        let other = synth_pair(&print, &spec, 22).unwrap();
        assert_ne!(pair.flash.data, other.flash.data);

        // Jittered pair reports the truth it applied.
        let mut jspec = SynthSpec::new(64, PatternKind::Whorl);
        jspec.jitter_px = 3.0;
        let jp = synth_pair(&print, &jspec, 9).unwrap();
        assert!(jp.dx.abs() <= 3.0 && jp.dy.abs() <= 3.0);
        assert!(jp.angle.to_degrees().abs() <= jspec.jitter_deg);

        // Shape mismatch is rejected.
        let small = ImageF::zeros(32, 32, 1);
        assert!(synth_pair(&small, &spec, 1).is_err());
    }

    #[test]
    fn flash_dominates_nonflash_and_blue_carries_contrast() {
        let mut spec = SynthSpec::new(64, PatternKind::Loop);
        spec.jitter_px = 0.0;
        spec.jitter_deg = 0.0;
        let field = synth_orientation(spec.kind, spec.core, 64, 8).unwrap();
        let print = synth_fingerprint(&field, spec.wavelength, 13).unwrap();
        let pair = synth_pair(&print, &spec, 4).unwrap();

        let (r, g, b) = channel_local_contrast(&pair.flash, 8).unwrap();
        assert!(b > g && g > r, "flash channel contrast r={r:.4} g={g:.4} b={b:.4}");

        let qf = ridge_quality(&pair.flash.to_luma(), 8).unwrap();
        let qn = ridge_quality(&pair.nonflash.to_luma(), 8).unwrap();
        assert!(
            qf.local_contrast > qn.local_contrast,
            "flash contrast {} vs nonflash {}",
            qf.local_contrast,
            qn.local_contrast
        );
        assert!(qf.sharpness > qn.sharpness);
    }

    #[test]
    fn spectral_difference_keeps_the_ridge_band() {
        let mut spec = SynthSpec::new(64, PatternKind::Whorl);
        spec.jitter_px = 0.0;
        spec.jitter_deg = 0.0;
        spec.noise_sigma = 0.0;
        let field = synth_orientation(spec.kind, spec.core, 64, 8).unwrap();
        let print = synth_fingerprint(&field, spec.wavelength, 17).unwrap();
        let pair = synth_pair(&print, &spec, 6).unwrap();

        let f_c = 64.0 / spec.wavelength / 2.0;
        let diff = spectral_subtract(&pair.flash, &pair.nonflash, f_c).unwrap();

        let band = |img: &ImageF| -> (f64, f64) {
            let prof = radial_energy_profile(&forward_fft(&img.to_luma()));
            let center = 64.0 / spec.wavelength;
            let (blo, bhi) = ((center - 2.0) as usize, (center + 2.0).ceil() as usize);
            let ridge: f64 = (blo..=bhi.min(prof.energy.len() - 1)).map(|i| prof.energy[i]).sum();
            let low: f64 = (1..blo.min(prof.energy.len())).map(|i| prof.energy[i]).sum();
            (ridge, low)
        };
        let (ridge_f, low_f) = band(&pair.flash);
        let (ridge_d, low_d) = band(&diff);
        assert!(
            ridge_d >= 0.8 * ridge_f,
            "ridge band retained {:.1}%",
            100.0 * ridge_d / ridge_f
        );
        assert!(low_d < low_f, "low band should shrink: {low_d} vs {low_f}");
    }

    #[test]
    fn corpus_layout_counts_and_determinism() {
        let cfg = CorpusConfig { n_ids: 3, sessions: 2, impressions: 2, size: 64, seed: 77 };
        let root_a = std::env::temp_dir().join("f2p_synth_corpus_a");
        let root_b = std::env::temp_dir().join("f2p_synth_corpus_b");
        for r in [&root_a, &root_b] {
            let _ = std::fs::remove_dir_all(r);
        }
        let ma = synth_corpus(&root_a, &cfg).unwrap();
        let mb = synth_corpus(&root_b, &cfg).unwrap();
        assert_eq!(ma.records.len(), 3 * 2 * 2);
        assert_eq!(ma, mb);

        // Byte-identical regeneration, file by file.
        for rec in &ma.records {
            for rel in [&rec.flash, &rec.nonflash, &rec.mask] {
                let a = std::fs::read(root_a.join(rel)).unwrap();
                let b = std::fs::read(root_b.join(rel)).unwrap();
                assert_eq!(a, b, "{} differs between runs", rel.display());
            }
        }

        // Manifest round-trips through disk.
        let loaded = CorpusManifest::load(&root_a.join("manifest.tsv")).unwrap();
        assert_eq!(loaded, ma);

        // Identities get distinct patterns.
        let mut seen = std::collections::BTreeSet::new();
        for rec in &ma.records {
            seen.insert((
                rec.identity.clone(),
                rec.kind.to_string(),
                format!("{:.6},{:.6}", rec.core.0, rec.core.1),
            ));
        }
        let per_id: std::collections::BTreeSet<_> =
            seen.iter().map(|(i, _, _)| i.clone()).collect();
        assert_eq!(per_id.len(), 3);
        assert_eq!(seen.len(), 3, "one pattern per identity");
        let kinds: std::collections::BTreeSet<_> =
            seen.iter().map(|(_, k, _)| k.clone()).collect();
        assert_eq!(kinds.len(), 3, "kinds should cycle across identities");

        for r in [&root_a, &root_b] {
            let _ = std::fs::remove_dir_all(r);
        }
    }

    #[test]
    fn corpus_config_rejections() {
        let bad = CorpusConfig { n_ids: 1, sessions: 1, impressions: 1, size: 64, seed: 0 };
        assert!(synth_corpus(&std::env::temp_dir().join("f2p_synth_never"), &bad).is_err());
        let bad_size = CorpusConfig { n_ids: 2, sessions: 1, impressions: 1, size: 20, seed: 0 };
        assert!(bad_size.validate().is_err());
        assert!("delta".parse::<PatternKind>().is_err());
        assert!(CorpusManifest::parse("bogus\n").is_err());
        assert!(CorpusManifest::parse(&format!("{MANIFEST_HEADER}\na\tb\n")).is_err());
    }
}
