//! Verification and ridge-quality metrics: cosine scoring, cross-session
//! pair protocols, ROC/AUC/EER with two independent AUC implementations,
//! intra/inter separation statistics, and CSV/JSON/PNG export.

use std::path::Path;

use serde::Serialize;

use crate::embedding::Embedding;
use crate::error::{F2pError, F2pResult};
use crate::image::ImageF;

/// Genuine and impostor cosine similarities from a matching protocol.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    /// Fraction of impostor scores accepted at this threshold.
    pub far: f64,
    /// Fraction of genuine scores rejected at this threshold.
    pub frr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    /// Pairwise (Mann-Whitney) AUC in [0,1].
    pub auc: f64,
    /// Equal error rate as a percentage in [0,100].
    pub eer_percent: f64,
    /// Threshold where |FAR - FRR| is smallest.
    pub eer_threshold: f64,
    /// FAR/FRR at every swept threshold, ascending.
    pub curve: Vec<RocPoint>,
}

#[derive(Debug, Clone, Copy)]
pub struct RidgeQuality {
    /// Mean per-block population standard deviation.
    pub local_contrast: f64,
    /// Variance of the 3x3 Laplacian response over interior pixels.
    pub sharpness: f64,
    /// Fraction of pixels marked as edges by Canny hysteresis.
    pub edge_clarity: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SeparationStats {
    pub intra: f64,
    pub inter: f64,
    /// Inter/Intra with the denominator floored at 1e-9.
    pub ratio: f64,
    /// Set when the intra mean collapsed below the floor.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SeparationReport {
    pub euclidean: SeparationStats,
    pub cosine: SeparationStats,
}

const INTRA_FLOOR: f64 = 1e-9;

/// Patch-wise intensity variation, Laplacian focus and Canny edge fraction.
pub fn ridge_quality(img: &ImageF, block: usize) -> F2pResult<RidgeQuality> {
    if img.channels != 1 {
        return Err(F2pError::invalid("ridge quality expects a grayscale image"));
    }
    if block < 2 {
        return Err(F2pError::invalid("quality block must be >= 2"));
    }
    if img.height < block || img.width < block {
        return Err(F2pError::invalid("image smaller than the quality block"));
    }
    Ok(RidgeQuality {
        local_contrast: mean_block_std(img, block),
        sharpness: laplacian_variance(img),
        edge_clarity: canny_edge_fraction(img),
    })
}

fn mean_block_std(img: &ImageF, block: usize) -> f64 {
    let (by, bx) = (img.height / block, img.width / block);
    let mut total = 0.0;
    let inv = 1.0 / (block * block) as f64;
    for y0 in 0..by {
        for x0 in 0..bx {
            let mut mean = 0.0;
            for dy in 0..block {
                for dx in 0..block {
                    mean += img.get(0, y0 * block + dy, x0 * block + dx);
                }
            }
            mean *= inv;
            let mut var = 0.0;
            for dy in 0..block {
                for dx in 0..block {
                    let d = img.get(0, y0 * block + dy, x0 * block + dx) - mean;
                    var += d * d;
                }
            }
            total += (var * inv).sqrt();
        }
    }
    total / (by * bx) as f64
}

fn laplacian_variance(img: &ImageF) -> f64 {
    if img.height < 3 || img.width < 3 {
        return 0.0;
    }
    let mut responses = Vec::with_capacity((img.height - 2) * (img.width - 2));
    for y in 1..img.height - 1 {
        for x in 1..img.width - 1 {
            let r = img.get(0, y - 1, x) + img.get(0, y + 1, x) + img.get(0, y, x - 1)
                + img.get(0, y, x + 1)
                - 4.0 * img.get(0, y, x);
            responses.push(r);
        }
    }
    let n = responses.len() as f64;
    let mean = responses.iter().sum::<f64>() / n;
    responses.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n
}

/// Sobel gradients -> non-maximum suppression -> hysteresis with thresholds
/// at 0.1/0.3 of the gradient-magnitude range.
fn canny_edge_fraction(img: &ImageF) -> f64 {
    let (h, w) = (img.height, img.width);
    if h < 3 || w < 3 {
        return 0.0;
    }
    let at = |y: usize, x: usize| img.get(0, y, x);
    let mut mag = vec![0.0; h * w];
    let mut dir = vec![0u8; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            mag[y * w + x] = gx.hypot(gy);
            // Quantize the gradient direction to 0/45/90/135 degrees.
            let angle = gy.atan2(gx).to_degrees();
            let a = ((angle + 180.0) % 180.0 + 180.0) % 180.0;
            dir[y * w + x] = if !(22.5..157.5).contains(&a) {
                0
            } else if a < 67.5 {
                1
            } else if a < 112.5 {
                2
            } else {
                3
            };
        }
    }
    let (lo_m, hi_m) = mag.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    // Guard against pure floating-point residue on near-constant images.
    let range = hi_m - lo_m;
    if range <= 1e-9 {
        return 0.0;
    }
    let lo_t = lo_m + 0.1 * range;
    let hi_t = lo_m + 0.3 * range;
    // Non-maximum suppression along the quantized gradient direction.
    let mut thin = vec![0.0; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let m = mag[y * w + x];
            let (a, b) = match dir[y * w + x] {
                0 => (mag[y * w + x - 1], mag[y * w + x + 1]),
                1 => (mag[(y - 1) * w + x + 1], mag[(y + 1) * w + x - 1]),
                2 => (mag[(y - 1) * w + x], mag[(y + 1) * w + x]),
                _ => (mag[(y - 1) * w + x - 1], mag[(y + 1) * w + x + 1]),
            };
            if m >= a && m >= b {
                thin[y * w + x] = m;
            }
        }
    }
    // Hysteresis: strong pixels seed, weak pixels join when 8-connected.
    let mut state = vec![0u8; h * w]; // 0 none, 1 weak, 2 edge
    let mut stack = Vec::new();
    for i in 0..h * w {
        if thin[i] >= hi_t {
            state[i] = 2;
            stack.push(i);
        } else if thin[i] >= lo_t {
            state[i] = 1;
        }
    }
    while let Some(i) = stack.pop() {
        let (y, x) = (i / w, i % w);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if state[j] == 1 {
                    state[j] = 2;
                    stack.push(j);
                }
            }
        }
    }
    state.iter().filter(|&&s| s == 2).count() as f64 / (h * w) as f64
}

/// S(a, b) = a.b / (|a||b|).
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> F2pResult<f64> {
    if a.dim() != b.dim() {
        return Err(F2pError::invalid("embedding dimensions differ"));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(F2pError::invalid("cosine similarity of a zero vector"));
    }
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Cross-session protocol: session 1 enrolls, session 2 probes. Genuine =
/// same identity across sessions, impostor = different identity; full cross
/// product of both.
pub fn pair_scores(session1: &[Embedding], session2: &[Embedding]) -> F2pResult<ScoreSet> {
    if session1.is_empty() || session2.is_empty() {
        return Err(F2pError::invalid("both sessions need embeddings"));
    }
    let overlap = session1
        .iter()
        .any(|a| session2.iter().any(|b| a.identity == b.identity));
    if !overlap {
        return Err(F2pError::invalid("no identity appears in both sessions"));
    }
    let mut scores = ScoreSet::default();
    for a in session1 {
        for b in session2 {
            let s = cosine_similarity(a, b)?;
            if a.identity == b.identity {
                scores.genuine.push(s);
            } else {
                scores.impostor.push(s);
            }
        }
    }
    Ok(scores)
}

fn check_scores(s: &ScoreSet) -> F2pResult<()> {
    if s.genuine.is_empty() || s.impostor.is_empty() {
        return Err(F2pError::invalid("need both genuine and impostor scores"));
    }
    if s.genuine.iter().chain(&s.impostor).any(|v| !v.is_finite()) {
        return Err(F2pError::invalid("scores must be finite"));
    }
    Ok(())
}

/// AUC, EER and the FAR/FRR curve from an exhaustive threshold sweep.
pub fn verification_metrics(s: &ScoreSet) -> F2pResult<VerificationReport> {
    check_scores(s)?;
    // Pairwise AUC: fraction of (genuine, impostor) pairs ranked correctly,
    // ties worth one half.
    let mut wins = 0.0;
    for &g in &s.genuine {
        for &i in &s.impostor {
            if g > i {
                wins += 1.0;
            } else if g == i {
                wins += 0.5;
            }
        }
    }
    let auc = wins / (s.genuine.len() * s.impostor.len()) as f64;

    let mut thresholds: Vec<f64> = s.genuine.iter().chain(&s.impostor).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let mut curve = Vec::with_capacity(thresholds.len());
    let mut best = (f64::INFINITY, 0usize);
    for (k, &t) in thresholds.iter().enumerate() {
        let far = s.impostor.iter().filter(|&&v| v >= t).count() as f64 / s.impostor.len() as f64;
        let frr = s.genuine.iter().filter(|&&v| v < t).count() as f64 / s.genuine.len() as f64;
        curve.push(RocPoint { threshold: t, far, frr });
        let gap = (far - frr).abs();
        if gap < best.0 {
            best = (gap, k);
        }
    }
    let at = curve[best.1];
    Ok(VerificationReport {
        auc,
        eer_percent: 50.0 * (at.far + at.frr),
        eer_threshold: at.threshold,
        curve,
    })
}

/// Independent AUC via trapezoidal integration of the ROC polyline; used to
/// cross-check the pairwise implementation.
pub fn roc_auc_trapezoid(s: &ScoreSet) -> F2pResult<f64> {
    check_scores(s)?;
    let mut thresholds: Vec<f64> = s.genuine.iter().chain(&s.impostor).copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    // Descending thresholds walk the ROC from (0,0) to (1,1).
    let mut pts = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let fpr = s.impostor.iter().filter(|&&v| v >= t).count() as f64 / s.impostor.len() as f64;
        let tpr = s.genuine.iter().filter(|&&v| v >= t).count() as f64 / s.genuine.len() as f64;
        pts.push((fpr, tpr));
    }
    let mut auc = 0.0;
    for pair in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        auc += (x1 - x0) * (y0 + y1) * 0.5;
    }
    Ok(auc)
}

fn mean_pairwise(
    embs: &[Embedding],
    same: bool,
    dist: &dyn Fn(&Embedding, &Embedding) -> F2pResult<f64>,
) -> F2pResult<Option<f64>> {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            if (embs[i].identity == embs[j].identity) == same {
                total += dist(&embs[i], &embs[j])?;
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Intra/inter identity separation in Euclidean and cosine distance.
pub fn separation_stats(embs: &[Embedding]) -> F2pResult<SeparationReport> {
    let euclid = |a: &Embedding, b: &Embedding| -> F2pResult<f64> {
        if a.dim() != b.dim() {
            return Err(F2pError::invalid("embedding dimensions differ"));
        }
        Ok(a.vector
            .iter()
            .zip(&b.vector)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt())
    };
    let cos = |a: &Embedding, b: &Embedding| Ok(1.0 - cosine_similarity(a, b)?);
    let build = |dist: &dyn Fn(&Embedding, &Embedding) -> F2pResult<f64>| -> F2pResult<SeparationStats> {
        let intra = mean_pairwise(embs, true, dist)?
            .ok_or_else(|| F2pError::invalid("no same-identity pair for intra distance"))?;
        let inter = mean_pairwise(embs, false, dist)?
            .ok_or_else(|| F2pError::invalid("need >= 2 identities for inter distance"))?;
        let degenerate = intra < INTRA_FLOOR;
        Ok(SeparationStats { intra, inter, ratio: inter / intra.max(INTRA_FLOOR), degenerate })
    };
    Ok(SeparationReport { euclidean: build(&euclid)?, cosine: build(&cos)? })
}

/// One CSV row per swept threshold.
pub fn curve_csv(report: &VerificationReport) -> String {
    let mut out = String::from("threshold,far,frr\n");
    for p in &report.curve {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.far, p.frr));
    }
    out
}

/// Summary document with the headline numbers (the curve lives in the CSV).
pub fn summary_json(report: &VerificationReport, separation: Option<&SeparationReport>) -> String {
    let mut doc = serde_json::json!({
        "auc": report.auc,
        "eer_percent": report.eer_percent,
        "eer_threshold": report.eer_threshold,
        "thresholds_swept": report.curve.len(),
    });
    if let Some(sep) = separation {
        doc["separation"] = serde_json::to_value(sep).expect("separation serializes");
    }
    serde_json::to_string_pretty(&doc).expect("summary serializes")
}

pub fn write_curve_csv(report: &VerificationReport, path: impl AsRef<Path>) -> F2pResult<()> {
    std::fs::write(path.as_ref(), curve_csv(report))
        .map_err(|e| F2pError::invalid(format!("cannot write CSV: {e}")))
}

pub fn write_summary_json(
    report: &VerificationReport,
    separation: Option<&SeparationReport>,
    path: impl AsRef<Path>,
) -> F2pResult<()> {
    std::fs::write(path.as_ref(), summary_json(report, separation))
        .map_err(|e| F2pError::invalid(format!("cannot write JSON: {e}")))
}

// ---- plotting ---------------------------------------------------------

const PLOT_SIDE: usize = 480;
const PLOT_MARGIN: usize = 40;

struct Plot {
    img: ImageF,
}

impl Plot {
    fn new() -> Self {
        let mut img = ImageF::zeros(PLOT_SIDE, PLOT_SIDE, 3);
        for v in &mut img.data {
            *v = 1.0;
        }
        let mut p = Plot { img };
        // Axis frame.
        let lo = PLOT_MARGIN;
        let hi = PLOT_SIDE - PLOT_MARGIN;
        p.line(lo, lo, lo, hi, [0.0, 0.0, 0.0]);
        p.line(lo, hi, hi, hi, [0.0, 0.0, 0.0]);
        p.line(hi, lo, hi, hi, [0.0, 0.0, 0.0]);
        p.line(lo, lo, hi, lo, [0.0, 0.0, 0.0]);
        p
    }

    /// Map unit coordinates (origin bottom-left) to pixel coordinates.
    fn to_px(u: f64, v: f64) -> (usize, usize) {
        let span = (PLOT_SIDE - 2 * PLOT_MARGIN) as f64;
        let x = PLOT_MARGIN as f64 + u.clamp(0.0, 1.0) * span;
        let y = PLOT_MARGIN as f64 + (1.0 - v.clamp(0.0, 1.0)) * span;
        (x.round() as usize, y.round() as usize)
    }

    fn line(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, color: [f64; 3]) {
        let (mut x0, mut y0) = (x0 as i64, y0 as i64);
        let (x1, y1) = (x1 as i64, y1 as i64);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            if (0..PLOT_SIDE as i64).contains(&x0) && (0..PLOT_SIDE as i64).contains(&y0) {
                for (c, &v) in color.iter().enumerate() {
                    self.img.set(c, y0 as usize, x0 as usize, v);
                }
            }
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: [f64; 3]) {
        for pair in pts.windows(2) {
            let (x0, y0) = Self::to_px(pair[0].0, pair[0].1);
            let (x1, y1) = Self::to_px(pair[1].0, pair[1].1);
            self.line(x0, y0, x1, y1, color);
        }
    }
}

/// ROC polyline (FAR vs 1-FRR) with the chance diagonal, as a PNG.
pub fn plot_roc(report: &VerificationReport, path: impl AsRef<Path>) -> F2pResult<()> {
    let mut plot = Plot::new();
    plot.polyline(&[(0.0, 0.0), (1.0, 1.0)], [0.8, 0.8, 0.8]);
    let mut pts: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    let mut roc: Vec<(f64, f64)> = report.curve.iter().map(|p| (p.far, 1.0 - p.frr)).collect();
    roc.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.extend(roc);
    pts.push((1.0, 1.0));
    plot.polyline(&pts, [0.1, 0.2, 0.7]);
    plot.img.save_png(path)
}

/// FAR and FRR against the swept threshold (normalized to [0,1]), as a PNG.
pub fn plot_far_frr(report: &VerificationReport, path: impl AsRef<Path>) -> F2pResult<()> {
    let mut plot = Plot::new();
    let lo = report.curve.first().map(|p| p.threshold).unwrap_or(0.0);
    let hi = report.curve.last().map(|p| p.threshold).unwrap_or(1.0);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let norm = |t: f64| (t - lo) / span;
    let far: Vec<(f64, f64)> = report.curve.iter().map(|p| (norm(p.threshold), p.far)).collect();
    let frr: Vec<(f64, f64)> = report.curve.iter().map(|p| (norm(p.threshold), p.frr)).collect();
    plot.polyline(&far, [0.8, 0.2, 0.1]);
    plot.polyline(&frr, [0.1, 0.5, 0.2]);
    plot.img.save_png(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::gaussian_blur;
    use crate::rng::SeededRng;

    fn emb(v: Vec<f64>, id: &str) -> Embedding {
        Embedding { vector: v, identity: id.into(), session: 0 }
    }

    fn unit(mut v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= n;
        }
        v
    }

    #[test]
    fn ridge_quality_oracles() {
        let flat = ImageF::from_fn(16, 16, 1, |_, _, _| 0.42);
        let q = ridge_quality(&flat, 4).unwrap();
        assert_eq!((q.local_contrast, q.sharpness, q.edge_clarity), (0.0, 0.0, 0.0));
        // 1-pixel checkerboard, block 2: every block holds two 0s and two
        // 1s, population std = 0.5.
        let checker = ImageF::from_fn(16, 16, 1, |_, y, x| ((y + x) % 2) as f64);
        let q = ridge_quality(&checker, 2).unwrap();
        assert!((q.local_contrast - 0.5).abs() < 1e-12);
        assert!(q.sharpness > 0.0);
        // A step edge produces a thin Canny response.
        let step = ImageF::from_fn(16, 16, 1, |_, _, x| if x < 8 { 0.0 } else { 1.0 });
        let q = ridge_quality(&step, 4).unwrap();
        assert!(q.edge_clarity > 0.0 && q.edge_clarity <= 1.0);
        // Blur strictly reduces Laplacian variance on a texture.
        let mut rng = SeededRng::new(5);
        let tex = ImageF::from_fn(32, 32, 1, |_, _, _| rng.uniform());
        let sharp = ridge_quality(&tex, 4).unwrap().sharpness;
        let blurred = ridge_quality(&gaussian_blur(&tex, 1.5), 4).unwrap().sharpness;
        assert!(blurred < sharp);
        // Contract violations.
        assert!(ridge_quality(&tex, 1).is_err());
        assert!(ridge_quality(&ImageF::zeros(8, 8, 3), 2).is_err());
        assert!(ridge_quality(&ImageF::zeros(4, 4, 1), 8).is_err());
    }

    #[test]
    fn cosine_similarity_oracles() {
        let a = emb(vec![1.0, 0.0], "a");
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        let b = emb(vec![0.0, 1.0], "b");
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        let mut rng = SeededRng::new(7);
        for _ in 0..20 {
            let u: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let v: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let oracle: f64 = unit(u.clone()).iter().zip(&unit(v.clone())).map(|(x, y)| x * y).sum();
            let got = cosine_similarity(&emb(u, "u"), &emb(v, "v")).unwrap();
            assert!((got - oracle).abs() < 1e-12);
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&got));
        }
        assert!(cosine_similarity(&emb(vec![0.0, 0.0], "z"), &a).is_err());
        assert!(cosine_similarity(&emb(vec![1.0], "short"), &a).is_err());
    }

    #[test]
    fn pair_scores_counting_and_permutation_invariance() {
        // 2 ids x 1 sample per session.
        let s1 = vec![emb(unit(vec![1.0, 0.2]), "a"), emb(unit(vec![0.1, 1.0]), "b")];
        let s2 = vec![emb(unit(vec![1.0, 0.3]), "a"), emb(unit(vec![0.2, 1.0]), "b")];
        let sc = pair_scores(&s1, &s2).unwrap();
        assert_eq!((sc.genuine.len(), sc.impostor.len()), (2, 2));
        // n ids x k samples per session: n k^2 genuine, n(n-1) k^2 impostor.
        let mut rng = SeededRng::new(9);
        let mk = |rng: &mut SeededRng, n: usize, k: usize| -> Vec<Embedding> {
            let mut out = Vec::new();
            for id in 0..n {
                for _ in 0..k {
                    out.push(emb(unit((0..4).map(|_| rng.normal()).collect()), &format!("i{id}")));
                }
            }
            out
        };
        let (n, k) = (3, 2);
        let s1 = mk(&mut rng, n, k);
        let s2 = mk(&mut rng, n, k);
        let sc = pair_scores(&s1, &s2).unwrap();
        assert_eq!(sc.genuine.len(), n * k * k);
        assert_eq!(sc.impostor.len(), n * (n - 1) * k * k);
        // Shuffling input order leaves the score multisets unchanged.
        let mut p1 = s1.clone();
        let mut p2 = s2.clone();
        p1.reverse();
        p2.rotate_left(2);
        let sp = pair_scores(&p1, &p2).unwrap();
        let sorted = |mut v: Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v
        };
        assert_eq!(sorted(sc.genuine), sorted(sp.genuine));
        assert_eq!(sorted(sc.impostor), sorted(sp.impostor));
        // Disjoint identities cannot form genuine pairs.
        let s3 = vec![emb(vec![1.0, 0.0], "zz")];
        assert!(pair_scores(&s1, &s3).is_err());
    }

    #[test]
    fn verification_metrics_oracles() {
        let perfect = ScoreSet { genuine: vec![0.9, 0.8], impostor: vec![0.1, 0.2] };
        let r = verification_metrics(&perfect).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.eer_percent, 0.0);
        // Hand-worked overlap case: 8 of 9 pairs rank correctly.
        let s = ScoreSet { genuine: vec![0.9, 0.7, 0.6], impostor: vec![0.65, 0.3, 0.2] };
        let r = verification_metrics(&s).unwrap();
        assert!((r.auc - 8.0 / 9.0).abs() < 1e-12);
        // Sweep: FAR = FRR = 1/3 exactly at threshold 0.65.
        assert_eq!(r.eer_threshold, 0.65);
        assert!((r.eer_percent - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(r.curve.len(), 6);
        // Swapping roles mirrors the AUC.
        let swapped = ScoreSet { genuine: s.impostor.clone(), impostor: s.genuine.clone() };
        let r2 = verification_metrics(&swapped).unwrap();
        assert!((r2.auc - (1.0 - r.auc)).abs() < 1e-12);
        // Errors.
        assert!(verification_metrics(&ScoreSet::default()).is_err());
        let bad = ScoreSet { genuine: vec![f64::NAN], impostor: vec![0.1] };
        assert!(verification_metrics(&bad).is_err());
    }

    #[test]
    fn pairwise_auc_matches_trapezoid_with_ties() {
        let mut rng = SeededRng::new(31);
        for trial in 0..10 {
            let ng = 5 + rng.below(40);
            let ni = 5 + rng.below(40);
            // Quantized scores force plenty of ties.
            let q = |v: f64| (v * 8.0).round() / 8.0;
            let s = ScoreSet {
                genuine: (0..ng).map(|_| q(0.3 + 0.7 * rng.uniform())).collect(),
                impostor: (0..ni).map(|_| q(0.7 * rng.uniform())).collect(),
            };
            let pairwise = verification_metrics(&s).unwrap().auc;
            let trap = roc_auc_trapezoid(&s).unwrap();
            assert!(
                (pairwise - trap).abs() < 1e-9,
                "trial {trial}: {pairwise} vs {trap}"
            );
        }
    }

    #[test]
    fn eer_gap_is_minimal_over_the_sweep() {
        let mut rng = SeededRng::new(13);
        let s = ScoreSet {
            genuine: (0..30).map(|_| 0.4 + 0.6 * rng.uniform()).collect(),
            impostor: (0..30).map(|_| 0.6 * rng.uniform()).collect(),
        };
        let r = verification_metrics(&s).unwrap();
        let at = r
            .curve
            .iter()
            .find(|p| p.threshold == r.eer_threshold)
            .expect("threshold from the sweep");
        let min_gap = r
            .curve
            .iter()
            .map(|p| (p.far - p.frr).abs())
            .fold(f64::INFINITY, f64::min);
        assert_eq!((at.far - at.frr).abs(), min_gap);
        assert!((r.eer_percent - 50.0 * (at.far + at.frr)).abs() < 1e-12);
    }

    #[test]
    fn separation_stats_oracles() {
        // Two identities on the unit circle; brute-force oracle.
        let e = |theta: f64, id: &str| emb(vec![theta.cos(), theta.sin()], id);
        let embs = vec![e(0.0, "a"), e(std::f64::consts::FRAC_PI_2, "a"), e(std::f64::consts::PI, "b")];
        let rep = separation_stats(&embs).unwrap();
        // Cosine: intra = 1 - cos(pi/2) = 1; inter = mean(1-cos(pi), 1-cos(pi/2)) = 1.5.
        assert!((rep.cosine.intra - 1.0).abs() < 1e-12);
        assert!((rep.cosine.inter - 1.5).abs() < 1e-12);
        assert!((rep.cosine.ratio - 1.5).abs() < 1e-12);
        assert!(!rep.cosine.degenerate);
        // Euclidean: intra = sqrt(2); inter = (2 + sqrt(2)) / 2.
        assert!((rep.euclidean.intra - 2f64.sqrt()).abs() < 1e-12);
        assert!((rep.euclidean.inter - (2.0 + 2f64.sqrt()) / 2.0).abs() < 1e-12);
        // Degenerate: identical within identity, orthogonal across.
        let embs = vec![
            emb(vec![1.0, 0.0], "a"),
            emb(vec![1.0, 0.0], "a"),
            emb(vec![0.0, 1.0], "b"),
        ];
        let rep = separation_stats(&embs).unwrap();
        assert!(rep.cosine.degenerate && rep.euclidean.degenerate);
        assert!(rep.cosine.ratio >= 1.0 / INTRA_FLOOR * 0.9);
        // Global rotation leaves both ratios unchanged.
        let rot = |v: &[f64]| vec![0.6 * v[0] - 0.8 * v[1], 0.8 * v[0] + 0.6 * v[1]];
        let embs = vec![e(0.3, "a"), e(1.1, "a"), e(2.0, "b"), e(2.9, "b")];
        let rotated: Vec<Embedding> = embs
            .iter()
            .map(|x| emb(rot(&x.vector), &x.identity))
            .collect();
        let (r1, r2) = (separation_stats(&embs).unwrap(), separation_stats(&rotated).unwrap());
        assert!((r1.cosine.ratio - r2.cosine.ratio).abs() < 1e-12);
        assert!((r1.euclidean.ratio - r2.euclidean.ratio).abs() < 1e-12);
        // Error paths: singleton identities, single identity.
        assert!(separation_stats(&[e(0.0, "a"), e(1.0, "b")]).is_err());
        assert!(separation_stats(&[e(0.0, "a"), e(1.0, "a")]).is_err());
    }

    #[test]
    fn exports_and_plots() {
        let s = ScoreSet { genuine: vec![0.9, 0.7, 0.6], impostor: vec![0.65, 0.3, 0.2] };
        let r = verification_metrics(&s).unwrap();
        let csv = curve_csv(&r);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "threshold,far,frr");
        assert_eq!(lines.len(), 1 + r.curve.len());
        let json = summary_json(&r, None);
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!((parsed["auc"].as_f64().unwrap() - r.auc).abs() < 1e-12);
        assert!(parsed.get("separation").is_none());
        let embs = vec![
            emb(unit(vec![1.0, 0.1]), "a"),
            emb(unit(vec![1.0, 0.2]), "a"),
            emb(unit(vec![0.0, 1.0]), "b"),
        ];
        let sep = separation_stats(&embs).unwrap();
        let json = summary_json(&r, Some(&sep));
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(parsed["separation"]["cosine"]["ratio"].as_f64().unwrap() > 0.0);

        let dir = std::env::temp_dir().join("f2p_eval");
        std::fs::create_dir_all(&dir).unwrap();
        let roc = dir.join("roc.png");
        let ff = dir.join("far_frr.png");
        plot_roc(&r, &roc).unwrap();
        plot_far_frr(&r, &ff).unwrap();
        // Decodable, expected size, deterministic bytes.
        let img = ImageF::load_png(&roc).unwrap();
        assert_eq!((img.height, img.width, img.channels), (PLOT_SIDE, PLOT_SIDE, 3));
        let first = std::fs::read(&roc).unwrap();
        plot_roc(&r, &roc).unwrap();
        assert_eq!(first, std::fs::read(&roc).unwrap());
        write_curve_csv(&r, dir.join("curve.csv")).unwrap();
        write_summary_json(&r, Some(&sep), dir.join("summary.json")).unwrap();
        assert!(dir.join("curve.csv").exists() && dir.join("summary.json").exists());
    }
}
