//! The toy single-class detector: a tiny strided backbone producing
//! C2..C5 (with an optional split-attention bottleneck inline after the
//! C4 stage), a pluggable pyramid neck, and 1x1 grid heads.
//!
//! Each head cell emits 5 numbers: an objectness logit and raw box terms
//! (tx, ty, tw, th). A ground-truth box is assigned to the level matching
//! its size (longest side under 1/4 of the image -> level 3, under 1/2 ->
//! level 4, else level 5) at the cell containing its center; the first box
//! to claim a cell keeps it. Decoding inverts the parameterization:
//! center = (cell + sigmoid(txy)) * stride, size = exp(twh) * stride.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::det::boxes::{nms, DetectionBox};
use crate::error::{Error, Result};
use crate::nn::{
    BranchMask, Cbs, CbsCache, Conv2dLayer, GradStore, MsDdsp, MsDdspCache, MsDdspConfig,
    NeckCache, NeckConfig, NeckModule, NeckVariant, ParamStore, PyramidFeatures,
};
use crate::sim::GtBox;
use crate::tensor::{sigmoid_scalar, ConvSpec, Tensor};

/// Backbone channel widths at C2..C5.
pub const BACKBONE_WIDTHS: [usize; 4] = [16, 32, 64, 128];
/// Objectness logit plus (tx, ty, tw, th).
pub const HEAD_CHANNELS: usize = 5;
/// Raw size-term clamp before exponentiation in decode.
const TWH_CLAMP: (f64, f64) = (-6.0, 6.0);
/// Backbone level whose stage output runs through the bottleneck block
/// (when enabled); the level above is then computed from the block output.
const BLOCK_LEVEL: usize = 4;

/// Architecture switchboard for the ablation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchConfig {
    pub neck: NeckVariant,
    pub neck_width: usize,
    /// Whether the split-attention bottleneck is inserted in the backbone
    /// (inline after the C4 stage).
    pub bottleneck: bool,
    /// Bottleneck branch mask (ignored when `bottleneck` is false).
    pub branch_mask: [bool; 4],
    /// Long-skip edges, used when the neck is the pruned variant.
    pub skips: Vec<(usize, usize)>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::baseline()
    }
}

impl ArchConfig {
    pub fn baseline() -> Self {
        Self {
            neck: NeckVariant::Panet,
            neck_width: 64,
            bottleneck: false,
            branch_mask: [true; 4],
            skips: vec![(2, 4), (3, 5)],
        }
    }

    pub fn with_epa() -> Self {
        Self {
            neck: NeckVariant::EpaFpn,
            ..Self::baseline()
        }
    }

    pub fn with_bottleneck() -> Self {
        Self {
            bottleneck: true,
            ..Self::baseline()
        }
    }

    pub fn full() -> Self {
        Self {
            neck: NeckVariant::EpaFpn,
            bottleneck: true,
            ..Self::baseline()
        }
    }

    /// Full architecture with one bottleneck branch disabled (1-based).
    pub fn full_without_branch(branch: usize) -> Result<Self> {
        let mask = BranchMask::without(branch)?;
        Ok(Self {
            branch_mask: mask.enabled,
            ..Self::full()
        })
    }

    pub fn mask(&self) -> BranchMask {
        BranchMask {
            enabled: self.branch_mask,
        }
    }

    /// Row label for ablation tables.
    pub fn label(&self) -> String {
        let disabled: Vec<usize> = self
            .branch_mask
            .iter()
            .enumerate()
            .filter(|(_, &on)| !on)
            .map(|(i, _)| i + 1)
            .collect();
        match (self.neck, self.bottleneck) {
            (NeckVariant::EpaFpn, true) if disabled.is_empty() => "full".into(),
            (NeckVariant::EpaFpn, true) => format!(
                "full-wo-b{}",
                disabled
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("b")
            ),
            (NeckVariant::EpaFpn, false) => "+epa-fpn".into(),
            (NeckVariant::Panet, true) => "+ms-ddsp".into(),
            (NeckVariant::Panet, false) => "baseline".into(),
            (NeckVariant::TopdownFpn, true) => "topdown+ms-ddsp".into(),
            (NeckVariant::TopdownFpn, false) => "topdown".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.neck_width == 0 || self.neck_width % 4 != 0 {
            return Err(Error::Config(format!(
                "neck width {} must be a positive multiple of 4",
                self.neck_width
            )));
        }
        if !self.branch_mask.iter().any(|&b| b) {
            return Err(Error::Config("branch mask disables every branch".into()));
        }
        Ok(())
    }

    fn neck_config(&self) -> NeckConfig {
        let mut cfg = NeckConfig::new(self.neck, self.neck_width);
        if self.neck == NeckVariant::EpaFpn {
            cfg.skips = self.skips.clone();
        }
        cfg
    }
}

/// Five stride-2 conv blocks: stem to 8 channels, then C2..C5; the
/// bottleneck block, when enabled, sits inline after the `BLOCK_LEVEL`
/// stage, so that level's published feature and every deeper stage see the
/// block output.
struct Backbone {
    stem: Cbs,
    stages: Vec<Cbs>,
    block: Option<MsDdsp>,
}

pub struct BackboneCache {
    stem: CbsCache,
    stages: Vec<CbsCache>,
    block: Option<MsDdspCache>,
}

impl Backbone {
    fn new(ps: &mut ParamStore, name: &str, with_block: bool) -> Result<Self> {
        let stem = Cbs::new(
            ps,
            &format!("{name}.stem"),
            ConvSpec::new(3, 8, 3).stride(2).padding(1),
        )?;
        let mut stages = Vec::new();
        let mut block = None;
        let mut prev = 8;
        for (k, &width) in BACKBONE_WIDTHS.iter().enumerate() {
            stages.push(Cbs::new(
                ps,
                &format!("{name}.s{}", k + 2),
                ConvSpec::new(prev, width, 3).stride(2).padding(1),
            )?);
            if with_block && k + 2 == BLOCK_LEVEL {
                block = Some(MsDdsp::new(
                    ps,
                    &format!("{name}.blk"),
                    MsDdspConfig::new(width),
                )?);
            }
            prev = width;
        }
        Ok(Self { stem, stages, block })
    }

    fn forward(
        &self,
        ps: &ParamStore,
        image: &Tensor,
        mask: BranchMask,
    ) -> Result<(PyramidFeatures, BackboneCache)> {
        let (mut h, stem_cache) = self.stem.forward(ps, image)?;
        let mut levels = Vec::new();
        let mut stage_caches = Vec::new();
        let mut block_cache = None;
        for (k, stage) in self.stages.iter().enumerate() {
            let (out, cache) = stage.forward(ps, &h)?;
            stage_caches.push(cache);
            h = out;
            if k + 2 == BLOCK_LEVEL {
                if let Some(block) = &self.block {
                    let (y, bc) = block.forward(ps, &h, mask)?;
                    block_cache = Some(bc);
                    h = y;
                }
            }
            levels.push((k + 2, h.clone()));
        }
        Ok((
            PyramidFeatures::from_pairs(levels)?,
            BackboneCache {
                stem: stem_cache,
                stages: stage_caches,
                block: block_cache,
            },
        ))
    }

    /// Chain per-level gradients down to the input image.
    fn backward(
        &self,
        ps: &ParamStore,
        cache: &BackboneCache,
        grad_c: &BTreeMap<usize, Tensor>,
        gs: &mut GradStore,
    ) -> Result<Tensor> {
        let mut g: Option<Tensor> = None;
        for (k, stage) in self.stages.iter().enumerate().rev() {
            let level = k + 2;
            let mut total = match grad_c.get(&level) {
                Some(t) => t.clone(),
                None => Tensor::zeros_like(&cache.stages[k].norm_out),
            };
            if let Some(upper) = g {
                total.add_assign(&upper)?;
            }
            // `total` is the gradient at the published level; at the block
            // level that is the block output, so pull it back through the
            // block before the stage convolution.
            if level == BLOCK_LEVEL {
                if let (Some(block), Some(bc)) = (&self.block, &cache.block) {
                    total = block.backward(ps, bc, &total, gs)?;
                }
            }
            g = Some(stage.backward(ps, &cache.stages[k], &total, gs)?);
        }
        self.stem
            .backward(ps, &cache.stem, &g.expect("at least one stage"), gs)
    }

    fn param_count(&self) -> usize {
        self.stem.param_count()
            + self.stages.iter().map(Cbs::param_count).sum::<usize>()
            + self.block.as_ref().map_or(0, MsDdsp::param_count)
    }
}

/// Backbone (with optional inline bottleneck) + neck + per-level heads.
pub struct Detector {
    pub arch: ArchConfig,
    backbone: Backbone,
    neck: NeckModule,
    heads: Vec<(usize, Conv2dLayer)>,
}

pub struct DetectorCache {
    backbone: BackboneCache,
    neck: NeckCache,
    head_ins: BTreeMap<usize, Tensor>,
}

impl Detector {
    pub fn new(ps: &mut ParamStore, arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let backbone = Backbone::new(ps, "bb", arch.bottleneck)?;
        let in_widths: Vec<(usize, usize)> = BACKBONE_WIDTHS
            .iter()
            .enumerate()
            .map(|(k, &w)| (k + 2, w))
            .collect();
        let neck = NeckModule::new(ps, "neck", &arch.neck_config(), &in_widths)?;
        let mut heads = Vec::new();
        for level in 3..=5 {
            heads.push((
                level,
                Conv2dLayer::new(
                    ps,
                    &format!("head{level}"),
                    ConvSpec::new(arch.neck_width, HEAD_CHANNELS, 1),
                )?,
            ));
        }
        Ok(Self {
            arch: arch.clone(),
            backbone,
            neck,
            heads,
        })
    }

    /// Raw head maps per level (no activation).
    pub fn forward(
        &self,
        ps: &ParamStore,
        image: &Tensor,
    ) -> Result<(BTreeMap<usize, Tensor>, DetectorCache)> {
        let [_, c, h, w] = image.shape();
        if c != 3 {
            return Err(Error::Dimension(format!("detector wants 3 channels, got {c}")));
        }
        if h != w || h % 32 != 0 || h == 0 {
            return Err(Error::Geometry(format!(
                "image side must be square and divisible by 32, got {h}x{w}"
            )));
        }
        let (pyramid, backbone_cache) = self.backbone.forward(ps, image, self.arch.mask())?;
        let (fused, neck_cache) = self.neck.forward(ps, &pyramid)?;
        let mut head_ins = BTreeMap::new();
        for (level, x) in fused.iter() {
            head_ins.insert(level, x.clone());
        }
        let mut heads_out = BTreeMap::new();
        for (level, head) in &self.heads {
            heads_out.insert(*level, head.forward(ps, &head_ins[level])?);
        }
        Ok((
            heads_out,
            DetectorCache {
                backbone: backbone_cache,
                neck: neck_cache,
                head_ins,
            },
        ))
    }

    /// Backpropagate head-map gradients; returns the image gradient.
    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &DetectorCache,
        grad_heads: &BTreeMap<usize, Tensor>,
        gs: &mut GradStore,
    ) -> Result<Tensor> {
        let mut grad_fused: BTreeMap<usize, Tensor> = BTreeMap::new();
        for (level, head) in &self.heads {
            let head_in = &cache.head_ins[level];
            let g_head = match grad_heads.get(level) {
                Some(g) => g.clone(),
                None => Tensor::zeros(head.spec.out_shape(head_in)?),
            };
            grad_fused.insert(*level, head.backward(ps, head_in, &g_head, gs)?);
        }
        let grad_c = self.neck.backward(ps, &cache.neck, &grad_fused, gs)?;
        self.backbone.backward(ps, &cache.backbone, &grad_c, gs)
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count()
            + self.neck.param_count()
            + self.heads.iter().map(|(_, h)| h.param_count()).sum::<usize>()
    }

    /// Forward, decode, threshold, and suppress.
    pub fn predict(
        &self,
        ps: &ParamStore,
        image: &Tensor,
        score_thresh: f64,
        nms_thresh: f64,
    ) -> Result<Vec<DetectionBox>> {
        let size = image.height();
        let (heads, _) = self.forward(ps, image)?;
        let mut boxes = Vec::new();
        for (level, map) in &heads {
            boxes.extend(decode_level(map, *level, size, score_thresh));
        }
        nms(&boxes, nms_thresh)
    }
}

/// Decode one head map into scored boxes above the threshold.
pub fn decode_level(
    map: &Tensor,
    level: usize,
    image_size: usize,
    score_thresh: f64,
) -> Vec<DetectionBox> {
    let stride = (1 << level) as f64;
    let side = map.height();
    let img = image_size as f64;
    let mut out = Vec::new();
    for i in 0..side {
        for j in 0..side {
            let score = sigmoid_scalar(map.at(0, 0, i, j));
            if score < score_thresh {
                continue;
            }
            let cx = (j as f64 + sigmoid_scalar(map.at(0, 1, i, j))) * stride;
            let cy = (i as f64 + sigmoid_scalar(map.at(0, 2, i, j))) * stride;
            let w = map.at(0, 3, i, j).clamp(TWH_CLAMP.0, TWH_CLAMP.1).exp() * stride;
            let h = map.at(0, 4, i, j).clamp(TWH_CLAMP.0, TWH_CLAMP.1).exp() * stride;
            let b = DetectionBox {
                x1: (cx - w / 2.0).max(0.0),
                y1: (cy - h / 2.0).max(0.0),
                x2: (cx + w / 2.0).min(img),
                y2: (cy + h / 2.0).min(img),
                score,
                class: 0,
            };
            if b.x2 - b.x1 > 1e-6 && b.y2 - b.y1 > 1e-6 {
                out.push(b);
            }
        }
    }
    out
}

/// Per-level assignment targets.
pub struct LevelTargets {
    pub side: usize,
    /// Objectness target per cell, row-major.
    pub obj: Vec<f64>,
    /// `(fx, fy, log w/s, log h/s)` at positive cells.
    pub boxes: Vec<Option<[f64; 4]>>,
}

/// Size-based level pick: longest side under image/4 -> level 3, under
/// image/2 -> level 4, else level 5.
pub fn level_for_box(b: &GtBox, image_size: usize) -> usize {
    let m = b.width().max(b.height());
    if m < image_size as f64 / 4.0 {
        3
    } else if m < image_size as f64 / 2.0 {
        4
    } else {
        5
    }
}

pub fn assign_targets(gts: &[GtBox], image_size: usize) -> BTreeMap<usize, LevelTargets> {
    let mut targets = BTreeMap::new();
    for level in 3..=5 {
        let side = image_size >> level;
        targets.insert(
            level,
            LevelTargets {
                side,
                obj: vec![0.0; side * side],
                boxes: vec![None; side * side],
            },
        );
    }
    for b in gts {
        let level = level_for_box(b, image_size);
        let stride = (1 << level) as f64;
        let t = targets.get_mut(&level).unwrap();
        let cx = (b.x1 + b.x2) / 2.0;
        let cy = (b.y1 + b.y2) / 2.0;
        let j = ((cx / stride) as usize).min(t.side - 1);
        let i = ((cy / stride) as usize).min(t.side - 1);
        let cell = i * t.side + j;
        if t.boxes[cell].is_some() {
            continue; // first box keeps a contested cell
        }
        t.obj[cell] = 1.0;
        t.boxes[cell] = Some([
            cx / stride - j as f64,
            cy / stride - i as f64,
            (b.width() / stride).ln(),
            (b.height() / stride).ln(),
        ]);
    }
    targets
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub obj: f64,
    pub boxes: f64,
    pub positives: usize,
}

/// Numerically stable binary cross-entropy with logits.
fn bce_with_logits(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (1.0 + (-logit.abs()).exp()).ln()
}

/// Objectness BCE (mean over all cells) plus L1 on the four box terms
/// (mean over positive-cell terms). Returns the loss and per-level head
/// gradients.
pub fn detection_loss(
    heads: &BTreeMap<usize, Tensor>,
    targets: &BTreeMap<usize, LevelTargets>,
) -> Result<(LossBreakdown, BTreeMap<usize, Tensor>)> {
    let total_cells: usize = targets.values().map(|t| t.side * t.side).sum();
    let positives: usize = targets
        .values()
        .flat_map(|t| t.boxes.iter())
        .filter(|b| b.is_some())
        .count();
    let mut obj_loss = 0.0;
    let mut box_loss = 0.0;
    let mut grads = BTreeMap::new();
    for (level, t) in targets {
        let map = heads
            .get(level)
            .ok_or_else(|| Error::Topology(format!("missing head map for level {level}")))?;
        if map.height() != t.side || map.channels() != HEAD_CHANNELS {
            return Err(Error::Dimension(format!(
                "head map {:?} does not match {}x{} targets",
                map.shape(),
                t.side,
                t.side
            )));
        }
        let mut g = Tensor::zeros_like(map);
        for i in 0..t.side {
            for j in 0..t.side {
                let cell = i * t.side + j;
                let logit = map.at(0, 0, i, j);
                obj_loss += bce_with_logits(logit, t.obj[cell]);
                *g.at_mut(0, 0, i, j) = (sigmoid_scalar(logit) - t.obj[cell]) / total_cells as f64;
                if let Some([fx, fy, lw, lh]) = t.boxes[cell] {
                    let norm = (4 * positives) as f64;
                    for (ch, target, squash) in [
                        (1, fx, true),
                        (2, fy, true),
                        (3, lw, false),
                        (4, lh, false),
                    ] {
                        let raw = map.at(0, ch, i, j);
                        let value = if squash { sigmoid_scalar(raw) } else { raw };
                        box_loss += (value - target).abs();
                        let sign = if value > target {
                            1.0
                        } else if value < target {
                            -1.0
                        } else {
                            0.0
                        };
                        let chain = if squash { value * (1.0 - value) } else { 1.0 };
                        *g.at_mut(0, ch, i, j) = sign * chain / norm;
                    }
                }
            }
        }
        grads.insert(*level, g);
    }
    let obj_mean = obj_loss / total_cells as f64;
    let box_mean = if positives > 0 {
        box_loss / (4 * positives) as f64
    } else {
        0.0
    };
    Ok((
        LossBreakdown {
            total: obj_mean + box_mean,
            obj: obj_mean,
            boxes: box_mean,
            positives,
        },
        grads,
    ))
}
