//! Composed contactless-to-print pipeline: fusion, enhancement, optional
//! spatial normalization, and embedding, plus end-to-end fine-tuning with a
//! partial freeze map and the plain-text manifest tying stage checkpoints
//! together.

use std::path::Path;

use crate::embedding::{
    fine_tune_loss_graph, mine_semi_hard, net_forward, EmbedModel, Embedding, FineTuneConfig,
};
use crate::enhancer::{unet_forward, EnhancerModel};
use crate::error::{F2pError, F2pResult};
use crate::fusion::{forward_graph, image_leaf, FusionModel};
use crate::geometry::{centroid_core, orientation_field, poincare_core, upright_rotate};
use crate::image::{BinaryMask, ImageF};
use crate::nn::{clip_grad_norm_many, Adam, AdamConfig, Bound, Graph, PlateauScheduler};
use crate::rng::SeededRng;

/// How the optional spatial normalization resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialInfo {
    /// Upright rotation applied, radians.
    pub angle: f64,
    /// True when no orientation singularity was found and the mask centroid
    /// centered the print instead.
    pub centroid_fallback: bool,
}

/// Embedding plus a record of the normalization path taken.
#[derive(Debug, Clone)]
pub struct F2pOutput {
    pub embedding: Embedding,
    pub spatial: Option<SpatialInfo>,
}

pub struct F2pPipeline {
    pub fusion: FusionModel,
    pub enhancer: EnhancerModel,
    pub embedder: EmbedModel,
    /// Apply upright rotation + core centering before embedding.
    pub spatial_transform: bool,
}

impl F2pPipeline {
    pub fn new(
        fusion: FusionModel,
        enhancer: EnhancerModel,
        embedder: EmbedModel,
        spatial_transform: bool,
    ) -> F2pResult<Self> {
        let p = F2pPipeline { fusion, enhancer, embedder, spatial_transform };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> F2pResult<()> {
        if self.fusion.cfg.input_size != self.enhancer.cfg.input_size {
            return Err(F2pError::invalid(format!(
                "fusion works at {} but the enhancer expects {}",
                self.fusion.cfg.input_size, self.enhancer.cfg.input_size
            )));
        }
        bridge_factor(self.enhancer.cfg.input_size, self.embedder.cfg.input_size)?;
        Ok(())
    }

    pub fn forward(&self, flash: &ImageF, nonflash: &ImageF, mask: &BinaryMask) -> F2pResult<F2pOutput> {
        f2p_forward(
            &self.fusion,
            &self.enhancer,
            &self.embedder,
            flash,
            nonflash,
            mask,
            self.spatial_transform,
        )
    }

    fn clone_models(&self) -> F2pPipeline {
        F2pPipeline {
            fusion: FusionModel { cfg: self.fusion.cfg.clone(), params: self.fusion.params.clone() },
            enhancer: EnhancerModel {
                cfg: self.enhancer.cfg.clone(),
                params: self.enhancer.params.clone(),
            },
            embedder: EmbedModel {
                cfg: self.embedder.cfg.clone(),
                params: self.embedder.params.clone(),
            },
            spatial_transform: self.spatial_transform,
        }
    }
}

/// Power-of-two ratio between the enhanced raster and the embedder input.
fn bridge_factor(enh_size: usize, embed_size: usize) -> F2pResult<usize> {
    if enh_size % embed_size != 0 {
        return Err(F2pError::invalid(format!(
            "enhancer size {enh_size} is not a multiple of embedder size {embed_size}"
        )));
    }
    let f = enh_size / embed_size;
    if !f.is_power_of_two() {
        return Err(F2pError::invalid(format!(
            "enhancer/embedder size ratio {f} must be a power of two"
        )));
    }
    Ok(f)
}

/// Mean over non-overlapping p x p patches; the image-space twin of the
/// in-graph pooling bridge so inference and fine-tuning see the same pixels.
fn box_downsample(img: &ImageF, p: usize) -> ImageF {
    if p == 1 {
        return img.clone();
    }
    let (oh, ow) = (img.height / p, img.width / p);
    let inv = 1.0 / (p * p) as f64;
    ImageF::from_fn(oh, ow, img.channels, |c, oy, ox| {
        let mut s = 0.0;
        for dy in 0..p {
            for dx in 0..p {
                s += img.get(c, oy * p + dy, ox * p + dx);
            }
        }
        s * inv
    })
}

/// Orientation-field block used for core detection, scaled to the raster.
fn core_block(size: usize) -> usize {
    (size / 32).max(4)
}

/// Upright the print and center it on its core; a missing singularity falls
/// back to the mask centroid so the pipeline stays total.
fn spatial_normalize(img: &ImageF, mask: &BinaryMask) -> F2pResult<(ImageF, SpatialInfo)> {
    let (upright, upmask, angle) = upright_rotate(img, mask)?;
    let field = orientation_field(&upright, core_block(upright.height.min(upright.width)));
    let (core, centroid_fallback) = match poincare_core(&field) {
        Ok(core) => (core, false),
        Err(_) => {
            let core = centroid_core(&upmask).ok_or_else(|| {
                F2pError::degenerate("mask emptied out during spatial normalization")
            })?;
            (core, true)
        }
    };
    let (centered, _) = crate::geometry::center_on_core(&upright, &upmask, &core);
    Ok((centered, SpatialInfo { angle, centroid_fallback }))
}

/// Run the composed pipeline on one registered pair (evaluation mode).
pub fn f2p_forward(
    fusion: &FusionModel,
    enhancer: &EnhancerModel,
    embedder: &EmbedModel,
    flash: &ImageF,
    nonflash: &ImageF,
    mask: &BinaryMask,
    spatial_transform: bool,
) -> F2pResult<F2pOutput> {
    if mask.height != flash.height || mask.width != flash.width {
        return Err(F2pError::invalid("mask size does not match the image pair"));
    }
    if mask.count() == 0 {
        return Err(F2pError::degenerate("empty mask"));
    }
    let (fused, _) = crate::fusion::fusion_forward(fusion, flash, nonflash)?;
    let enhanced = crate::enhancer::enhancer_forward(enhancer, &fused)?;
    let (normalized, spatial) = if spatial_transform {
        let (img, info) = spatial_normalize(&enhanced, mask)?;
        (img, Some(info))
    } else {
        (enhanced, None)
    };
    let factor = bridge_factor(normalized.height, embedder.cfg.input_size)?;
    let bridged = box_downsample(&normalized, factor);
    let embedding = crate::embedding::embed_forward(embedder, &bridged)?;
    Ok(F2pOutput { embedding, spatial })
}

/// Registered flash/non-flash pair with identity labels for fine-tuning.
#[derive(Clone)]
pub struct PairedSample {
    pub flash: ImageF,
    pub nonflash: ImageF,
    pub mask: BinaryMask,
    pub identity: String,
    pub session: u32,
}

#[derive(Debug, Clone)]
pub struct FineTuneEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Post-clip global gradient norm of every optimizer step this epoch.
    pub grad_norms: Vec<f64>,
    pub mined: usize,
}

fn fusion_frozen(name: &str) -> bool {
    name.starts_with("e1.") || name.starts_with("e2.")
}

fn enhancer_frozen(name: &str) -> bool {
    name.starts_with("enc.")
}

fn embed_frozen(_: &str) -> bool {
    false
}

/// Indices of samples grouped per role for one triplet batch.
fn role_index(t: &crate::embedding::Triplet, role: usize) -> usize {
    match role {
        0 => t.anchor,
        1 => t.positive,
        _ => t.negative,
    }
}

fn pipeline_embed_all(p: &F2pPipeline, samples: &[&PairedSample]) -> F2pResult<Vec<Embedding>> {
    samples
        .iter()
        .map(|s| {
            // Fine-tuning always mines on the raw network composition.
            let out = f2p_forward(
                &p.fusion, &p.enhancer, &p.embedder, &s.flash, &s.nonflash, &s.mask, false,
            )?;
            let mut e = out.embedding;
            e.identity = s.identity.clone();
            e.session = s.session;
            Ok(e)
        })
        .collect()
}

/// 1 + mean genuine cosine distance - mean impostor cosine distance: a
/// separation score (lower is better) computable on any split with at least
/// one genuine and one impostor pair.
fn separation_metric(embs: &[Embedding]) -> Option<f64> {
    let mut gen = (0.0, 0usize);
    let mut imp = (0.0, 0usize);
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let d = 1.0 - embs[i].vector.iter().zip(&embs[j].vector).map(|(a, b)| a * b).sum::<f64>();
            if embs[i].identity == embs[j].identity {
                gen = (gen.0 + d, gen.1 + 1);
            } else {
                imp = (imp.0 + d, imp.1 + 1);
            }
        }
    }
    if gen.1 == 0 || imp.1 == 0 {
        return None;
    }
    Some(1.0 + gen.0 / gen.1 as f64 - imp.0 / imp.1 as f64)
}

fn has_minable_identities(samples: &[&PairedSample]) -> bool {
    let mut ids: Vec<&str> = Vec::new();
    let mut any_pair = false;
    for s in samples {
        let n = samples.iter().filter(|o| o.identity == s.identity).count();
        if n >= 2 {
            any_pair = true;
        }
        if !ids.contains(&s.identity.as_str()) {
            ids.push(&s.identity);
        }
    }
    ids.len() >= 2 && any_pair
}

/// End-to-end fine-tuning: fusion/enhancer encoders stay frozen, their
/// decoders and the whole embedder train jointly on the soft-margin triplet
/// objective. All networks run in evaluation mode (running batch statistics)
/// so frozen stages behave exactly as at inference.
pub fn fine_tune_f2p(
    pipeline: &F2pPipeline,
    dataset: &[PairedSample],
    cfg: &FineTuneConfig,
    seed: u64,
) -> F2pResult<(F2pPipeline, Vec<FineTuneEpochLog>)> {
    cfg.validate()?;
    pipeline.validate()?;
    if dataset.is_empty() {
        return Err(F2pError::invalid("empty fine-tune dataset"));
    }
    let size = pipeline.fusion.cfg.input_size;
    for s in dataset {
        if s.flash.height != size || s.flash.width != size || !s.flash.same_size(&s.nonflash) {
            return Err(F2pError::invalid("fine-tune sample size does not match the pipeline"));
        }
        if s.mask.count() == 0 {
            return Err(F2pError::degenerate("fine-tune sample has an empty mask"));
        }
    }

    // 80/20 split, seeded.
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    SeededRng::derive(seed, 0xF7).shuffle(&mut order);
    let n_val = if cfg.val_frac > 0.0 {
        ((dataset.len() as f64 * cfg.val_frac).round() as usize).max(1)
    } else {
        0
    };
    if n_val >= dataset.len() {
        return Err(F2pError::invalid("validation split leaves no training samples"));
    }
    let (val_idx, train_idx) = order.split_at(n_val);
    let train: Vec<&PairedSample> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let val: Vec<&PairedSample> = val_idx.iter().map(|&i| &dataset[i]).collect();
    if !has_minable_identities(&train) {
        return Err(F2pError::invalid(
            "training split needs >= 2 identities and a same-identity pair",
        ));
    }

    let mut tuned = pipeline.clone_models();
    let embed_size = tuned.embedder.cfg.input_size;
    let factor = bridge_factor(size, embed_size)?;
    let mut opt_f = Adam::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        decoupled: true,
        ..AdamConfig::default()
    });
    let mut opt_e = Adam::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        decoupled: true,
        ..AdamConfig::default()
    });
    let mut opt_m = Adam::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        decoupled: true,
        ..AdamConfig::default()
    });
    let mut sched = PlateauScheduler::new(cfg.lr, 3);
    let mut shuffle_rng = SeededRng::derive(seed, 0x5F);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let embs = pipeline_embed_all(&tuned, &train)?;
        let mine_seed = SeededRng::derive(seed, 0x90 + epoch as u64).next_u64();
        let mut triplets = mine_semi_hard(&embs, cfg.margin, cfg.k_per_identity, mine_seed)?;
        shuffle_rng.shuffle(&mut triplets);
        let mut ep_loss = 0.0;
        let mut grad_norms = Vec::new();
        let mut batches = 0usize;
        for chunk in triplets.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let bf = Bound::bind(&mut g, &tuned.fusion.params, &fusion_frozen);
            let be = Bound::bind(&mut g, &tuned.enhancer.params, &enhancer_frozen);
            let bm = Bound::bind(&mut g, &tuned.embedder.params, &embed_frozen);
            let mut ups = Vec::new();
            // Embed each triplet role through the full differentiable stack.
            let mut z = [Vec::new(), Vec::new(), Vec::new()];
            for t in chunk {
                for role in 0..3 {
                    let s = train[role_index(t, role)];
                    let fl = image_leaf(&mut g, &s.flash);
                    let nf = image_leaf(&mut g, &s.nonflash);
                    let fwd = forward_graph(&mut g, &bf, &tuned.fusion, fl, nf, false, &mut ups);
                    let enh = unet_forward(&mut g, &be, &tuned.enhancer, fwd.fused[0], false, &mut ups);
                    let bridged = if factor > 1 { g.patch_avg_pool(enh, factor) } else { enh };
                    let e = net_forward(&mut g, &bm, &tuned.embedder, bridged, false, &mut ups);
                    z[role].push(e);
                }
            }
            // Per-triplet scalar losses, averaged.
            let mut acc: Option<crate::nn::Var> = None;
            for i in 0..chunk.len() {
                let l = fine_tune_loss_graph(&mut g, z[0][i], z[1][i], z[2][i], cfg);
                acc = Some(match acc {
                    Some(a) => g.add(a, l),
                    None => l,
                });
            }
            let sum = acc.expect("non-empty batch");
            let objective = g.mul_scalar(sum, 1.0 / chunk.len() as f64);
            let loss_v = g.scalar_value(objective);
            if !loss_v.is_finite() {
                return Err(F2pError::TrainingFailed {
                    epoch,
                    reason: "non-finite fine-tune loss".into(),
                });
            }
            g.backward(objective);
            let mut gf = bf.grads(&g, &tuned.fusion.params, &fusion_frozen);
            let mut ge = be.grads(&g, &tuned.enhancer.params, &enhancer_frozen);
            let mut gm = bm.grads(&g, &tuned.embedder.params, &embed_frozen);
            let norm = clip_grad_norm_many(&mut [&mut gf, &mut ge, &mut gm], cfg.clip_norm);
            grad_norms.push(norm.min(cfg.clip_norm));
            let lr = sched.lr();
            opt_f.step(&mut tuned.fusion.params, &gf, lr);
            opt_e.step(&mut tuned.enhancer.params, &ge, lr);
            opt_m.step(&mut tuned.embedder.params, &gm, lr);
            ep_loss += loss_v;
            batches += 1;
        }
        let train_loss = ep_loss / batches.max(1) as f64;
        // Held-out metric: genuine/impostor separation, falling back to the
        // training loss when the split is too small to form both pair kinds.
        let val_loss = if n_val > 0 {
            let vembs = pipeline_embed_all(&tuned, &val)?;
            separation_metric(&vembs).unwrap_or(train_loss)
        } else {
            train_loss
        };
        let lr_used = sched.lr();
        sched.observe(val_loss);
        log.push(FineTuneEpochLog {
            epoch,
            lr: lr_used,
            train_loss,
            val_loss,
            grad_norms,
            mined: triplets.len(),
        });
    }
    Ok((tuned, log))
}

/// Plain-text key = value description of a composed pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineManifest {
    pub fusion_checkpoint: String,
    pub enhancer_checkpoint: String,
    pub embedder_checkpoint: String,
    pub embedding_dim: usize,
    pub spatial_transform: bool,
}

impl PipelineManifest {
    pub fn to_text(&self) -> String {
        format!(
            "fusion_checkpoint = {}\nenhancer_checkpoint = {}\nembedder_checkpoint = {}\nembedding_dim = {}\nspatial_transform = {}\n",
            self.fusion_checkpoint,
            self.enhancer_checkpoint,
            self.embedder_checkpoint,
            self.embedding_dim,
            self.spatial_transform,
        )
    }

    pub fn parse(text: &str) -> F2pResult<Self> {
        let mut fusion = None;
        let mut enhancer = None;
        let mut embedder = None;
        let mut dim = None;
        let mut spatial = None;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                F2pError::invalid(format!("manifest line {}: expected key = value", ln + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let dup = |name: &str| F2pError::invalid(format!("manifest: duplicate key {name:?}"));
            match key {
                "fusion_checkpoint" => {
                    if fusion.replace(value.to_string()).is_some() {
                        return Err(dup(key));
                    }
                }
                "enhancer_checkpoint" => {
                    if enhancer.replace(value.to_string()).is_some() {
                        return Err(dup(key));
                    }
                }
                "embedder_checkpoint" => {
                    if embedder.replace(value.to_string()).is_some() {
                        return Err(dup(key));
                    }
                }
                "embedding_dim" => {
                    let v = value
                        .parse::<usize>()
                        .map_err(|_| F2pError::invalid("manifest: embedding_dim must be an integer"))?;
                    if dim.replace(v).is_some() {
                        return Err(dup(key));
                    }
                }
                "spatial_transform" => {
                    let v = value.parse::<bool>().map_err(|_| {
                        F2pError::invalid("manifest: spatial_transform must be true or false")
                    })?;
                    if spatial.replace(v).is_some() {
                        return Err(dup(key));
                    }
                }
                other => {
                    return Err(F2pError::invalid(format!("manifest: unknown key {other:?}")));
                }
            }
        }
        let miss = |name: &str| F2pError::invalid(format!("manifest: missing key {name:?}"));
        Ok(PipelineManifest {
            fusion_checkpoint: fusion.ok_or_else(|| miss("fusion_checkpoint"))?,
            enhancer_checkpoint: enhancer.ok_or_else(|| miss("enhancer_checkpoint"))?,
            embedder_checkpoint: embedder.ok_or_else(|| miss("embedder_checkpoint"))?,
            embedding_dim: dim.ok_or_else(|| miss("embedding_dim"))?,
            spatial_transform: spatial.ok_or_else(|| miss("spatial_transform"))?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> F2pResult<()> {
        std::fs::write(path.as_ref(), self.to_text())
            .map_err(|e| F2pError::invalid(format!("cannot write manifest: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> F2pResult<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| F2pError::invalid(format!("cannot read manifest: {e}")))?;
        Self::parse(&text)
    }
}
