//! DualEncoderFusionNet: two convolutional encoders over the flash and
//! non-flash exposures, a logistic spatial attention gate at the bottleneck,
//! a nearest-neighbour-upsampling decoder fed by flash skip connections,
//! frequency amplification and an edge-residual head. Training minimises a
//! five-term weighted loss (masked L1, structural, spectral hinge, edge,
//! perceptual).

use crate::error::{F2pError, F2pResult};
use crate::fft::forward_fft;
use crate::image::{BinaryMask, ImageF, LUMA_WEIGHTS};
use crate::loss_common as lc;
use crate::nn::{
    batch_norm, bn_init, clip_grad_norm, conv2d_layer, conv_init, Adam, AdamConfig, BnUpdate,
    Bound, Graph, ParamSet, PlateauScheduler, Tensor, Var,
};
use crate::rng::SeededRng;
use crate::spectral::{radial_energy_profile, select_cutoff};

pub const BN_MOMENTUM: f64 = 0.1;

/// Weights of the five loss terms plus the spectral-hinge cutoff (`None`
/// derives the cutoff from the target's radial energy profile at the 0.15
/// cumulative fraction).
#[derive(Debug, Clone)]
pub struct FusionLossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub epsilon_p: f64,
    pub fourier_cutoff: Option<usize>,
}

impl Default for FusionLossWeights {
    fn default() -> Self {
        FusionLossWeights {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.3,
            delta: 0.5,
            epsilon_p: 0.1,
            fourier_cutoff: None,
        }
    }
}

impl FusionLossWeights {
    fn validate(&self) -> F2pResult<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("epsilon_p", self.epsilon_p),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(F2pError::invalid(format!("loss weight {name} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FusionConfig {
    /// Side length of the square inputs the model accepts.
    pub input_size: usize,
    pub encoder_channels: Vec<usize>,
    /// Frequency-amplification gain.
    pub lambda_amp: f64,
    /// Edge-residual gain.
    pub edge_gain: f64,
    /// Numerical floor for the amplification denominator.
    pub eps_num: f64,
    pub weights: FusionLossWeights,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip applied before each optimizer step.
    pub clip_norm: f64,
    /// Train/validation/test fractions; must sum to 1.
    pub split: (f64, f64, f64),
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            input_size: 512,
            encoder_channels: vec![32, 64, 128],
            lambda_amp: 0.5,
            edge_gain: 0.1,
            eps_num: 1e-6,
            weights: FusionLossWeights::default(),
            lr: 1e-4,
            weight_decay: 1e-5,
            epochs: 30,
            batch_size: 4,
            clip_norm: 1.0,
            split: (0.70, 0.15, 0.15),
        }
    }
}

impl FusionConfig {
    /// Config sized for fast CPU experiments.
    pub fn desk(input_size: usize) -> Self {
        FusionConfig {
            input_size,
            encoder_channels: vec![8, 16, 32],
            ..FusionConfig::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn validate(&self) -> F2pResult<()> {
        if self.encoder_channels.is_empty() {
            return Err(F2pError::invalid("encoder_channels must be non-empty"));
        }
        let down = 1usize << self.levels();
        if self.input_size == 0 || self.input_size % down != 0 {
            return Err(F2pError::invalid(format!(
                "input_size {} must be a positive multiple of {down}",
                self.input_size
            )));
        }
        if self.lambda_amp < 0.0 {
            return Err(F2pError::invalid("lambda_amp must be >= 0"));
        }
        if self.eps_num <= 0.0 {
            return Err(F2pError::invalid("eps_num must be > 0"));
        }
        self.weights.validate()?;
        let (a, b, c) = self.split;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(F2pError::invalid("split fractions must be >= 0 and sum to 1"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(F2pError::invalid("batch_size and epochs must be >= 1"));
        }
        if self.clip_norm <= 0.0 {
            return Err(F2pError::invalid("clip_norm must be > 0"));
        }
        Ok(())
    }
}

/// Fixed convolutional feature extractor for the perceptual term: four conv
/// layers (strides 2,2,2,1) with rectified taps after each. Never trained;
/// either seeded at random or loaded from a checkpoint.
pub struct FeatureNet {
    params: ParamSet,
    layers: usize,
}

impl FeatureNet {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let mut params = ParamSet::new();
        let chans = [3usize, 16, 32, 64, 64];
        for i in 0..4 {
            conv_init(&mut params, &format!("l{i}"), chans[i + 1], chans[i], 3, true, &mut rng);
        }
        FeatureNet { params, layers: 4 }
    }

    pub fn save(&self, path: &std::path::Path) -> F2pResult<()> {
        crate::checkpoint::save_checkpoint(path, "featurenet", &self.params)
    }

    pub fn from_checkpoint(path: &std::path::Path) -> F2pResult<Self> {
        let params = crate::checkpoint::load_checkpoint(path, "featurenet")?;
        let mut layers = 0;
        while params.contains(&format!("l{layers}.w")) {
            layers += 1;
        }
        if layers == 0 {
            return Err(F2pError::Checkpoint("feature net has no layers".into()));
        }
        Ok(FeatureNet { params, layers })
    }

    /// Rectified feature taps of each layer; parameters enter as constants.
    fn taps(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let bound = Bound::bind(g, &self.params, &|_| true);
        let mut taps = Vec::with_capacity(self.layers);
        let mut h = x;
        for i in 0..self.layers {
            let stride = if i < 3 { 2 } else { 1 };
            let c = conv2d_layer(g, &bound, &self.params, &format!("l{i}"), h, stride);
            h = g.relu(c);
            taps.push(h);
        }
        taps
    }
}

/// Learned fusion model: parameters plus the architecture config they were
/// built for.
pub struct FusionModel {
    pub cfg: FusionConfig,
    pub params: ParamSet,
}

pub const FUSION_TAG: &str = "fusion";

impl FusionModel {
    pub fn init(cfg: FusionConfig, seed: u64) -> F2pResult<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut params = ParamSet::new();
        let chans = &cfg.encoder_channels;
        for enc in ["e1", "e2"] {
            let mut ic = 3;
            for (i, &oc) in chans.iter().enumerate() {
                conv_init(&mut params, &format!("{enc}.l{i}.conv"), oc, ic, 3, false, &mut rng);
                bn_init(&mut params, &format!("{enc}.l{i}.bn"), oc);
                ic = oc;
            }
        }
        let bott = *chans.last().unwrap();
        conv_init(&mut params, "att.conv", 1, 2 * bott, 3, true, &mut rng);
        // Decoder: deepest level first; level i consumes the upsampled state
        // concatenated with the flash skip of the matching resolution. The
        // final stage runs at full resolution with the raw flash exposure as
        // its skip, so the output path keeps per-pixel detail.
        let mut ic = bott;
        for i in 0..chans.len() - 1 {
            let skip = chans[chans.len() - 2 - i];
            conv_init(&mut params, &format!("dec.l{i}.conv"), skip, ic + skip, 3, false, &mut rng);
            bn_init(&mut params, &format!("dec.l{i}.bn"), skip);
            ic = skip;
        }
        conv_init(&mut params, "out.conv", 3, ic + 3, 3, true, &mut rng);
        conv_init(&mut params, "edge.conv", 3, 3, 3, true, &mut rng);
        Ok(FusionModel { cfg, params })
    }

    pub fn save(&self, path: &std::path::Path) -> F2pResult<()> {
        crate::checkpoint::save_checkpoint(path, FUSION_TAG, &self.params)
    }

    pub fn load(path: &std::path::Path, cfg: FusionConfig) -> F2pResult<Self> {
        cfg.validate()?;
        let params = crate::checkpoint::load_checkpoint(path, FUSION_TAG)?;
        let expected = Self::init(cfg.clone(), 0)?;
        for name in expected.params.names() {
            if !params.contains(name) {
                return Err(F2pError::Checkpoint(format!(
                    "checkpoint is missing tensor {name:?} for this architecture"
                )));
            }
            if params.get(name).shape != expected.params.get(name).shape {
                return Err(F2pError::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    params.get(name).shape,
                    expected.params.get(name).shape
                )));
            }
        }
        Ok(FusionModel { cfg, params })
    }
}

fn encode(
    g: &mut Graph,
    bound: &Bound,
    params: &ParamSet,
    prefix: &str,
    x: Var,
    levels: usize,
    train: bool,
    ups: &mut Vec<BnUpdate>,
) -> Vec<Var> {
    let mut feats = Vec::with_capacity(levels);
    let mut h = x;
    for i in 0..levels {
        let c = conv2d_layer(g, bound, params, &format!("{prefix}.l{i}.conv"), h, 2);
        let b = batch_norm(g, bound, &format!("{prefix}.l{i}.bn"), c, train, ups);
        h = g.relu(b);
        feats.push(h);
    }
    feats
}

pub(crate) struct ForwardVars {
    /// Raw decoder output [N,3,h,w] before amplification/edge refinement.
    pub(crate) decoder: Var,
    /// Final clamped outputs, one [1,3,h,w] per sample.
    pub(crate) fused: Vec<Var>,
    /// Amplified (pre-edge) outputs per sample.
    #[allow(dead_code)]
    pub(crate) amplified: Vec<Var>,
    /// Attention map [N,1,h/2^L,w/2^L].
    pub(crate) w1: Var,
}

pub(crate) fn forward_graph(
    g: &mut Graph,
    bound: &Bound,
    model: &FusionModel,
    flash: Var,
    nonflash: Var,
    train: bool,
    ups: &mut Vec<BnUpdate>,
) -> ForwardVars {
    let cfg = &model.cfg;
    let levels = cfg.levels();
    let f1 = encode(g, bound, &model.params, "e1", flash, levels, train, ups);
    let f2 = encode(g, bound, &model.params, "e2", nonflash, levels, train, ups);
    // Attention gate at the bottleneck.
    let cat = g.concat_chan(f1[levels - 1], f2[levels - 1]);
    let a = conv2d_layer(g, bound, &model.params, "att.conv", cat, 1);
    let w1 = g.sigmoid(a);
    let neg = g.mul_scalar(w1, -1.0);
    let w2 = g.add_scalar(neg, 1.0);
    let g1 = g.mul_bcast(f1[levels - 1], w1);
    let g2 = g.mul_bcast(f2[levels - 1], w2);
    let mut h = g.add(g1, g2);
    // Decoder with flash skips.
    for i in 0..levels - 1 {
        let up = g.upsample2(h);
        let cat = g.concat_chan(up, f1[levels - 2 - i]);
        let c = conv2d_layer(g, bound, &model.params, &format!("dec.l{i}.conv"), cat, 1);
        let b = batch_norm(g, bound, &format!("dec.l{i}.bn"), c, train, ups);
        h = g.relu(b);
    }
    let up = g.upsample2(h);
    let full = g.concat_chan(up, flash);
    let decoder = conv2d_layer(g, bound, &model.params, "out.conv", full, 1);
    // Amplification needs a per-sample spectral max, so the head runs on
    // batch slices.
    let n = g.value(decoder).dims4().0;
    let mut fused = Vec::with_capacity(n);
    let mut amplified = Vec::with_capacity(n);
    for s in 0..n {
        let d = g.slice_batch(decoder, s, 1);
        let amp = lc::freq_amplify_graph(g, d, cfg.lambda_amp, cfg.eps_num);
        let e = conv2d_layer(g, bound, &model.params, "edge.conv", amp, 1);
        let scaled = g.mul_scalar(e, cfg.edge_gain);
        let refined = g.add(amp, scaled);
        fused.push(g.clamp01(refined));
        amplified.push(amp);
    }
    ForwardVars { decoder, fused, amplified, w1 }
}

pub(crate) fn image_leaf(g: &mut Graph, img: &ImageF) -> Var {
    g.leaf(Tensor::new(
        vec![1, img.channels, img.height, img.width],
        img.data.clone(),
    ))
}

fn var_to_image(g: &Graph, v: Var) -> ImageF {
    let t = g.value(v);
    let (n, c, h, w) = t.dims4();
    assert_eq!(n, 1);
    ImageF { height: h, width: w, channels: c, data: t.data.clone() }
}

fn check_pair(cfg: &FusionConfig, flash: &ImageF, nonflash: &ImageF) -> F2pResult<()> {
    for (name, img) in [("flash", flash), ("nonflash", nonflash)] {
        if img.channels != 3 {
            return Err(F2pError::invalid(format!("{name} input must have 3 channels")));
        }
        if img.height != cfg.input_size || img.width != cfg.input_size {
            return Err(F2pError::invalid(format!(
                "{name} input is {}x{}, model expects {}x{} (square)",
                img.height, img.width, cfg.input_size, cfg.input_size
            )));
        }
    }
    Ok(())
}

/// Intermediate rasters of one fusion pass, for ablation and inspection.
pub struct FusionStages {
    /// Raw decoder output (unclamped).
    pub decoder: ImageF,
    /// After frequency amplification, before the edge residual.
    pub amplified: ImageF,
    /// Final fused image, clamped to [0,1].
    pub fused: ImageF,
    /// Bottleneck attention map in [0,1].
    pub w1: ImageF,
}

/// Full forward pass returning all stages (evaluation mode).
pub fn fusion_forward_stages(
    model: &FusionModel,
    flash: &ImageF,
    nonflash: &ImageF,
) -> F2pResult<FusionStages> {
    check_pair(&model.cfg, flash, nonflash)?;
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, &model.params, &|_| true);
    let fl = image_leaf(&mut g, flash);
    let nf = image_leaf(&mut g, nonflash);
    let mut ups = Vec::new();
    let fv = forward_graph(&mut g, &bound, model, fl, nf, false, &mut ups);
    Ok(FusionStages {
        decoder: var_to_image(&g, fv.decoder),
        amplified: var_to_image(&g, fv.amplified[0]),
        fused: var_to_image(&g, fv.fused[0]),
        w1: var_to_image(&g, fv.w1),
    })
}

/// Fuse one registered flash/non-flash pair. Returns the fused image and
/// the bottleneck attention map W1.
pub fn fusion_forward(
    model: &FusionModel,
    flash: &ImageF,
    nonflash: &ImageF,
) -> F2pResult<(ImageF, ImageF)> {
    let stages = fusion_forward_stages(model, flash, nonflash)?;
    Ok((stages.fused, stages.w1))
}

/// Logistic attention over two equally-shaped feature stacks:
/// W1 = sigmoid(conv([a ‖ b])), W2 = 1 - W1.
pub fn attention_weights(
    model: &FusionModel,
    f_flash: &Tensor,
    f_nf: &Tensor,
) -> F2pResult<(Tensor, Tensor)> {
    if f_flash.shape != f_nf.shape {
        return Err(F2pError::invalid("attention inputs must have equal shapes"));
    }
    if f_flash.shape.len() != 4 {
        return Err(F2pError::invalid("attention inputs must be NCHW feature stacks"));
    }
    let expect = 2 * *model.cfg.encoder_channels.last().unwrap();
    if 2 * f_flash.shape[1] != expect {
        return Err(F2pError::invalid(format!(
            "attention expects {} channels per stream, got {}",
            expect / 2,
            f_flash.shape[1]
        )));
    }
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, &model.params, &|_| true);
    let a = g.leaf(f_flash.clone());
    let b = g.leaf(f_nf.clone());
    let cat = g.concat_chan(a, b);
    let conv = conv2d_layer(&mut g, &bound, &model.params, "att.conv", cat, 1);
    let w1 = g.sigmoid(conv);
    let neg = g.mul_scalar(w1, -1.0);
    let w2 = g.add_scalar(neg, 1.0);
    Ok((g.value(w1).clone(), g.value(w2).clone()))
}

/// Frequency amplification of a raster: each pixel is scaled by
/// 1 + lambda * log(1+m) / (max(m)+eps) where m is the spatial magnitude
/// map of the DC-suppressed magnitude spectrum. lambda = 0 is the identity.
pub fn freq_amplify(x: &ImageF, lambda: f64, eps_num: f64) -> F2pResult<ImageF> {
    if lambda < 0.0 {
        return Err(F2pError::invalid("lambda must be >= 0"));
    }
    if eps_num <= 0.0 {
        return Err(F2pError::invalid("eps_num must be > 0"));
    }
    let mut g = Graph::new();
    let v = image_leaf(&mut g, x);
    let out = lc::freq_amplify_graph(&mut g, v, lambda, eps_num);
    Ok(var_to_image(&g, out))
}

/// Individual loss components; `total` is their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FusionLossTerms {
    pub l1: f64,
    pub ssim: f64,
    pub fourier: f64,
    pub edge: f64,
    pub perceptual: f64,
    pub total: f64,
}

impl FusionLossTerms {
    fn add(&mut self, o: &FusionLossTerms) {
        self.l1 += o.l1;
        self.ssim += o.ssim;
        self.fourier += o.fourier;
        self.edge += o.edge;
        self.perceptual += o.perceptual;
        self.total += o.total;
    }

    fn scale(&mut self, k: f64) {
        self.l1 *= k;
        self.ssim *= k;
        self.fourier *= k;
        self.edge *= k;
        self.perceptual *= k;
        self.total *= k;
    }
}

struct LossVars {
    total: Var,
    l1: Var,
    ssim: Var,
    fourier: Var,
    edge: Var,
    perceptual: Var,
}

/// Resolve the spectral-hinge cutoff for a target image: configured value,
/// or the radial-profile knee of the masked target. Targets without non-DC
/// energy disable the hinge (None).
fn resolve_cutoff(
    weights: &FusionLossWeights,
    target: &ImageF,
    mask: &BinaryMask,
) -> F2pResult<Option<usize>> {
    if let Some(fc) = weights.fourier_cutoff {
        return Ok(Some(fc));
    }
    let gray = target.to_weighted_grayscale(LUMA_WEIGHTS)?;
    let mut masked = gray.clone();
    for (v, &inside) in masked.data.iter_mut().zip(mask.data.iter()) {
        if !inside {
            *v = 0.0;
        }
    }
    let profile = radial_energy_profile(&forward_fft(&masked));
    match select_cutoff(&profile, 0.15) {
        Ok(fc) => Ok(Some(fc)),
        Err(F2pError::DegenerateInput(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Assemble the five-term loss for one [1,3,H,W] prediction against its
/// target; every term sees only in-mask content.
#[allow(clippy::too_many_arguments)]
fn fusion_loss_graph(
    g: &mut Graph,
    pred: Var,
    target: Var,
    mask: &BinaryMask,
    phi: &FeatureNet,
    weights: &FusionLossWeights,
    cutoff: Option<usize>,
) -> LossVars {
    let (_, _, h, w) = g.value(pred).dims4();
    let count = mask.count() as f64;
    let m = lc::mask_leaf(g, mask);
    let bg = lc::inv_mask_leaf(g, mask);

    let l1 = lc::masked_mean_abs(g, pred, target, m, count);

    let pw = lc::whiten(g, pred, m, bg);
    let tw = lc::whiten(g, target, m, bg);
    let ssim = lc::ssim_loss_masked(g, pw, tw, m, count);

    let pl = lc::channel_mix(g, pred, &LUMA_WEIGHTS);
    let tl = lc::channel_mix(g, target, &LUMA_WEIGHTS);
    let plm = g.mul_bcast(pl, m);
    let tlm = g.mul_bcast(tl, m);
    let fourier = match cutoff {
        Some(fc) => {
            let band = lc::highband_leaf(g, h, w, fc);
            let ep = lc::highband_energy(g, plm, band);
            let et = lc::highband_energy(g, tlm, band);
            let d = g.sub(et, ep);
            g.relu(d)
        }
        None => g.leaf(Tensor::scalar(0.0)),
    };

    let pmag = lc::sobel_magnitude(g, plm);
    let tmag = lc::sobel_magnitude(g, tlm);
    let edge = lc::masked_mean_abs(g, pmag, tmag, m, count);

    let ptaps = phi.taps(g, pw);
    let ttaps = phi.taps(g, tw);
    let mut acc: Option<Var> = None;
    for (pt, tt) in ptaps.iter().zip(&ttaps) {
        let d = g.sub(*pt, *tt);
        let ad = g.abs(d);
        let mean = g.mean(ad);
        acc = Some(match acc {
            Some(a) => g.add(a, mean),
            None => mean,
        });
    }
    let perceptual = {
        let s = acc.expect("feature net has at least one tap");
        g.mul_scalar(s, 1.0 / ptaps.len() as f64)
    };

    let t0 = g.mul_scalar(l1, weights.alpha);
    let t1 = g.mul_scalar(ssim, weights.beta);
    let t2 = g.mul_scalar(fourier, weights.gamma);
    let t3 = g.mul_scalar(edge, weights.delta);
    let t4 = g.mul_scalar(perceptual, weights.epsilon_p);
    let s01 = g.add(t0, t1);
    let s012 = g.add(s01, t2);
    let s0123 = g.add(s012, t3);
    let total = g.add(s0123, t4);
    LossVars { total, l1, ssim, fourier, edge, perceptual }
}

fn extract_terms(g: &Graph, lv: &LossVars) -> FusionLossTerms {
    FusionLossTerms {
        l1: g.scalar_value(lv.l1),
        ssim: g.scalar_value(lv.ssim),
        fourier: g.scalar_value(lv.fourier),
        edge: g.scalar_value(lv.edge),
        perceptual: g.scalar_value(lv.perceptual),
        total: g.scalar_value(lv.total),
    }
}

fn check_loss_inputs(pred: &ImageF, target: &ImageF, mask: &BinaryMask) -> F2pResult<()> {
    if pred.channels != 3 || target.channels != 3 {
        return Err(F2pError::invalid("fusion loss expects 3-channel rasters"));
    }
    if !pred.same_size(target)
        || pred.height != mask.height
        || pred.width != mask.width
    {
        return Err(F2pError::invalid("prediction, target and mask sizes must match"));
    }
    if mask.count() == 0 {
        return Err(F2pError::degenerate("empty mask in fusion loss"));
    }
    Ok(())
}

/// Evaluate the five-term fusion loss.
pub fn fusion_loss(
    pred: &ImageF,
    target: &ImageF,
    mask: &BinaryMask,
    phi: &FeatureNet,
    weights: &FusionLossWeights,
) -> F2pResult<FusionLossTerms> {
    check_loss_inputs(pred, target, mask)?;
    weights.validate()?;
    let cutoff = resolve_cutoff(weights, target, mask)?;
    let mut g = Graph::new();
    let pv = image_leaf(&mut g, pred);
    let tv = image_leaf(&mut g, target);
    let lv = fusion_loss_graph(&mut g, pv, tv, mask, phi, weights, cutoff);
    Ok(extract_terms(&g, &lv))
}

/// Loss plus its analytic gradient with respect to the prediction.
pub fn fusion_loss_grad(
    pred: &ImageF,
    target: &ImageF,
    mask: &BinaryMask,
    phi: &FeatureNet,
    weights: &FusionLossWeights,
) -> F2pResult<(FusionLossTerms, ImageF)> {
    check_loss_inputs(pred, target, mask)?;
    weights.validate()?;
    let cutoff = resolve_cutoff(weights, target, mask)?;
    let mut g = Graph::new();
    let pv = g.param(Tensor::new(
        vec![1, 3, pred.height, pred.width],
        pred.data.clone(),
    ));
    let tv = image_leaf(&mut g, target);
    let lv = fusion_loss_graph(&mut g, pv, tv, mask, phi, weights, cutoff);
    g.backward(lv.total);
    let grad = g.grad(pv).expect("prediction gradient").to_vec();
    let terms = extract_terms(&g, &lv);
    Ok((
        terms,
        ImageF { height: pred.height, width: pred.width, channels: 3, data: grad },
    ))
}

/// One training example: a registered pair, its subtraction target and the
/// finger mask.
#[derive(Clone)]
pub struct FusionSample {
    pub flash: ImageF,
    pub nonflash: ImageF,
    pub target: ImageF,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct FusionEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train: FusionLossTerms,
    pub val: FusionLossTerms,
}

fn stack_images(g: &mut Graph, imgs: &[&ImageF]) -> Var {
    let (h, w, c) = (imgs[0].height, imgs[0].width, imgs[0].channels);
    let mut data = Vec::with_capacity(imgs.len() * c * h * w);
    for img in imgs {
        data.extend_from_slice(&img.data);
    }
    g.leaf(Tensor::new(vec![imgs.len(), c, h, w], data))
}

pub(crate) fn split_indices(
    n: usize,
    split: (f64, f64, f64),
    rng: &mut SeededRng,
) -> F2pResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let count = |frac: f64| -> usize {
        if frac <= 0.0 {
            0
        } else {
            ((n as f64 * frac).round() as usize).max(1)
        }
    };
    let n_val = count(split.1);
    let n_test = count(split.2);
    if n_val + n_test >= n {
        return Err(F2pError::invalid(format!(
            "dataset of {n} leaves no training samples under split {split:?}"
        )));
    }
    let test = idx.split_off(n - n_test);
    let val = idx.split_off(n - n_test - n_val);
    Ok((idx, val, test))
}

/// Mean loss of `samples` under the current parameters (evaluation mode).
fn eval_loss(
    model: &FusionModel,
    samples: &[&FusionSample],
    phi: &FeatureNet,
) -> F2pResult<FusionLossTerms> {
    let mut acc = FusionLossTerms::default();
    for s in samples {
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &model.params, &|_| true);
        let fl = image_leaf(&mut g, &s.flash);
        let nf = image_leaf(&mut g, &s.nonflash);
        let mut ups = Vec::new();
        let fv = forward_graph(&mut g, &bound, model, fl, nf, false, &mut ups);
        let cutoff = resolve_cutoff(&model.cfg.weights, &s.target, &s.mask)?;
        let tv = image_leaf(&mut g, &s.target);
        let lv =
            fusion_loss_graph(&mut g, fv.fused[0], tv, &s.mask, phi, &model.cfg.weights, cutoff);
        acc.add(&extract_terms(&g, &lv));
    }
    acc.scale(1.0 / samples.len().max(1) as f64);
    Ok(acc)
}

/// Train a fusion model. Returns the best-validation model (by total loss;
/// training loss when the validation fraction is zero) and the per-epoch
/// log. Deterministic for a fixed seed.
pub fn train_fusion(
    dataset: &[FusionSample],
    cfg: &FusionConfig,
    seed: u64,
) -> F2pResult<(FusionModel, Vec<FusionEpochLog>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(F2pError::invalid("empty fusion training set"));
    }
    for s in dataset {
        check_pair(cfg, &s.flash, &s.nonflash)?;
        check_loss_inputs(&s.target, &s.target, &s.mask)?;
    }
    let phi = FeatureNet::seeded(SeededRng::derive(seed, 0xF051).next_u64());
    let mut model = FusionModel::init(cfg.clone(), SeededRng::derive(seed, 0xF052).next_u64())?;
    let mut split_rng = SeededRng::derive(seed, 0xF053);
    let (train_idx, val_idx, _test_idx) = split_indices(dataset.len(), cfg.split, &mut split_rng)?;
    let cutoffs: Vec<Option<usize>> = dataset
        .iter()
        .map(|s| resolve_cutoff(&cfg.weights, &s.target, &s.mask))
        .collect::<F2pResult<_>>()?;

    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        decoupled: false,
        ..AdamConfig::default()
    });
    let mut sched = PlateauScheduler::new(cfg.lr, 3);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamSet)> = None;
    let mut order = train_idx.clone();
    let mut epoch_rng = SeededRng::derive(seed, 0xF054);

    for epoch in 1..=cfg.epochs {
        epoch_rng.shuffle(&mut order);
        let mut train_acc = FusionLossTerms::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let bound = Bound::bind(&mut g, &model.params, &|_| false);
            let flashes: Vec<&ImageF> = chunk.iter().map(|&i| &dataset[i].flash).collect();
            let nonflashes: Vec<&ImageF> = chunk.iter().map(|&i| &dataset[i].nonflash).collect();
            let fl = stack_images(&mut g, &flashes);
            let nf = stack_images(&mut g, &nonflashes);
            let mut ups = Vec::new();
            let fv = forward_graph(&mut g, &bound, &model, fl, nf, true, &mut ups);
            let mut batch_terms = FusionLossTerms::default();
            let mut total_acc: Option<Var> = None;
            for (slot, &i) in chunk.iter().enumerate() {
                let tv = image_leaf(&mut g, &dataset[i].target);
                let lv = fusion_loss_graph(
                    &mut g,
                    fv.fused[slot],
                    tv,
                    &dataset[i].mask,
                    &phi,
                    &cfg.weights,
                    cutoffs[i],
                );
                batch_terms.add(&extract_terms(&g, &lv));
                total_acc = Some(match total_acc {
                    Some(acc) => g.add(acc, lv.total),
                    None => lv.total,
                });
            }
            let sum = total_acc.expect("non-empty batch");
            let objective = g.mul_scalar(sum, 1.0 / chunk.len() as f64);
            let objective_value = g.scalar_value(objective);
            if !objective_value.is_finite() {
                return Err(F2pError::TrainingFailed {
                    epoch,
                    reason: "non-finite fusion loss".into(),
                });
            }
            g.backward(objective);
            let mut grads = bound.grads(&g, &model.params, &|_| false);
            clip_grad_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut model.params, &grads, sched.lr());
            for u in &ups {
                u.apply(&mut model.params, BN_MOMENTUM);
            }
            batch_terms.scale(1.0 / chunk.len() as f64);
            train_acc.add(&batch_terms);
            batches += 1;
        }
        train_acc.scale(1.0 / batches.max(1) as f64);
        let val = if val_idx.is_empty() {
            train_acc
        } else {
            let refs: Vec<&FusionSample> = val_idx.iter().map(|&i| &dataset[i]).collect();
            eval_loss(&model, &refs, &phi)?
        };
        if !val.total.is_finite() {
            return Err(F2pError::TrainingFailed { epoch, reason: "non-finite validation loss".into() });
        }
        let lr_used = sched.lr();
        sched.observe(val.total);
        if best.as_ref().map(|(b, _)| val.total < *b).unwrap_or(true) {
            best = Some((val.total, model.params.clone()));
        }
        log.push(FusionEpochLog { epoch, lr: lr_used, train: train_acc, val });
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, log))
}
