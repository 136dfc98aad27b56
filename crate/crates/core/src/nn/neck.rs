//! Pyramid necks as comparable fusion graphs.
//!
//! Three variants share one interface: the plain top-down pyramid
//! (`P5 = Conv(C5)`, `P_i = Conv(C_i ++ Up(P_{i+1}))`), the two-pass
//! top-down + bottom-up aggregation network, and the pruned variant that
//! runs one top-down pass, then rebuilds each output level from a lateral
//! 1x1 CBS plus a transfer of the refined top-down feature at that level
//! (the top level pulls a strided copy up from below), plus configurable
//! long-range skips from shallow backbone levels into deep outputs, all
//! merged by a 1x1 projection. The pruned variant drops the whole bottom-up
//! second pass, which is where its parameter saving comes from.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Cbs, CbsCache, Conv2dLayer, GradStore, ParamStore};
use crate::tensor::{concat_channels, upsample_nearest, upsample_nearest_backward, ConvSpec, Tensor};

/// Stride-4 level side length for a 640x640-equivalent cost reference.
pub const REFERENCE_C2_SIDE: usize = 160;

/// Ordered multi-level feature set; level `l` carries stride `2^l` features,
/// so adjacent levels differ by exactly 2x in spatial size.
#[derive(Debug, Clone)]
pub struct PyramidFeatures {
    levels: BTreeMap<usize, Tensor>,
}

impl PyramidFeatures {
    pub fn new(levels: BTreeMap<usize, Tensor>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Topology("pyramid has no levels".into()));
        }
        let keys: Vec<usize> = levels.keys().copied().collect();
        if keys[keys.len() - 1] - keys[0] + 1 != keys.len() {
            return Err(Error::Topology(format!(
                "pyramid levels must be contiguous, got {keys:?}"
            )));
        }
        let batch = levels.values().next().unwrap().batch();
        for (l, t) in &levels {
            if t.batch() != batch {
                return Err(Error::Dimension(format!(
                    "level {l} batch {} differs from {batch}",
                    t.batch()
                )));
            }
        }
        for (l, t) in &levels {
            if let Some(next) = levels.get(&(l + 1)) {
                if t.height() != 2 * next.height() || t.width() != 2 * next.width() {
                    return Err(Error::Geometry(format!(
                        "level {l} is {}x{} but level {} is {}x{}; adjacent levels must differ by exactly 2x",
                        t.height(),
                        t.width(),
                        l + 1,
                        next.height(),
                        next.width()
                    )));
                }
            }
        }
        Ok(Self { levels })
    }

    pub fn from_pairs(pairs: Vec<(usize, Tensor)>) -> Result<Self> {
        Self::new(pairs.into_iter().collect())
    }

    pub fn get(&self, level: usize) -> Option<&Tensor> {
        self.levels.get(&level)
    }

    pub fn require(&self, level: usize) -> Result<&Tensor> {
        self.levels
            .get(&level)
            .ok_or_else(|| Error::Topology(format!("missing pyramid level {level}")))
    }

    pub fn min_level(&self) -> usize {
        *self.levels.keys().next().unwrap()
    }

    pub fn max_level(&self) -> usize {
        *self.levels.keys().next_back().unwrap()
    }

    pub fn level_indices(&self) -> Vec<usize> {
        self.levels.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.levels.iter().map(|(l, t)| (*l, t))
    }

    pub fn width_of(&self, level: usize) -> Option<usize> {
        self.levels.get(&level).map(|t| t.channels())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeckVariant {
    TopdownFpn,
    Panet,
    EpaFpn,
}

impl NeckVariant {
    pub fn tag(&self) -> &'static str {
        match self {
            NeckVariant::TopdownFpn => "topdown-fpn",
            NeckVariant::Panet => "panet",
            NeckVariant::EpaFpn => "epa-fpn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "topdown-fpn" => Ok(NeckVariant::TopdownFpn),
            "panet" => Ok(NeckVariant::Panet),
            "epa-fpn" => Ok(NeckVariant::EpaFpn),
            other => Err(Error::Parse(format!(
                "unknown neck variant {other} (expected topdown-fpn | panet | epa-fpn)"
            ))),
        }
    }
}

/// Neck selection plus the long-skip edge list of the pruned variant.
#[derive(Debug, Clone)]
pub struct NeckConfig {
    pub variant: NeckVariant,
    pub width: usize,
    /// (source backbone level, target output level) long-range injections.
    pub skips: Vec<(usize, usize)>,
}

impl NeckConfig {
    pub fn new(variant: NeckVariant, width: usize) -> Self {
        let skips = match variant {
            NeckVariant::EpaFpn => vec![(2, 4), (3, 5)],
            _ => Vec::new(),
        };
        Self {
            variant,
            width,
            skips,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("neck width must be positive".into()));
        }
        if self.variant != NeckVariant::EpaFpn {
            if !self.skips.is_empty() {
                return Err(Error::Config(format!(
                    "variant {} takes no skip edges",
                    self.variant.tag()
                )));
            }
            return Ok(());
        }
        for (i, &(s, t)) in self.skips.iter().enumerate() {
            if !(2..=4).contains(&s) || !(3..=5).contains(&t) {
                return Err(Error::Config(format!(
                    "skip edge {s}->{t} outside levels 2..=4 -> 3..=5"
                )));
            }
            if t < s + 2 {
                return Err(Error::Config(format!(
                    "skip edge {s}->{t} is not long-range (needs target - source >= 2)"
                )));
            }
            if self.skips[..i].contains(&(s, t)) {
                return Err(Error::Config(format!("duplicate skip edge {s}->{t}")));
            }
        }
        Ok(())
    }
}

fn validate_in_widths(in_widths: &[(usize, usize)]) -> Result<()> {
    if in_widths.is_empty() {
        return Err(Error::Topology("no input levels given".into()));
    }
    for w in in_widths.windows(2) {
        if w[1].0 != w[0].0 + 1 {
            return Err(Error::Topology(format!(
                "input levels must be contiguous ascending, got {in_widths:?}"
            )));
        }
    }
    let (last, _) = in_widths[in_widths.len() - 1];
    if last != 5 {
        return Err(Error::Topology(format!(
            "deepest input level must be 5, got {last}"
        )));
    }
    if in_widths.iter().any(|&(_, c)| c == 0) {
        return Err(Error::Dimension("input level width must be positive".into()));
    }
    Ok(())
}

fn width_at(in_widths: &[(usize, usize)], level: usize) -> Result<usize> {
    in_widths
        .iter()
        .find(|&&(l, _)| l == level)
        .map(|&(_, c)| c)
        .ok_or_else(|| Error::Topology(format!("missing input level {level}")))
}

/// Split along channels into blocks of the given sizes.
fn split_channel_sizes(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let total: usize = sizes.iter().sum();
    if total != x.channels() {
        return Err(Error::Dimension(format!(
            "split sizes {sizes:?} do not sum to {} channels",
            x.channels()
        )));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for &sz in sizes {
        let mut part = Tensor::zeros([x.batch(), sz, x.height(), x.width()]);
        for n in 0..x.batch() {
            for c in 0..sz {
                part.plane_slice_mut(n, c)
                    .copy_from_slice(x.plane_slice(n, offset + c));
            }
        }
        out.push(part);
        offset += sz;
    }
    Ok(out)
}

fn take_or_zeros(grads: &BTreeMap<usize, Tensor>, level: usize, shape: [usize; 4]) -> Tensor {
    match grads.get(&level) {
        Some(g) => g.clone(),
        None => Tensor::zeros(shape),
    }
}

fn add_into(map: &mut BTreeMap<usize, Tensor>, level: usize, grad: Tensor) -> Result<()> {
    match map.get_mut(&level) {
        Some(g) => g.add_assign(&grad),
        None => {
            map.insert(level, grad);
            Ok(())
        }
    }
}

/// The shared top-down pass: lateral 1x1 at the deepest level, then
/// `P_i = Conv(C_i ++ Up(P_{i+1}))` downward with 3x3 fuse convolutions.
struct TopdownCore {
    width: usize,
    /// (level, input channels) for levels >= 3, ascending.
    levels: Vec<(usize, usize)>,
    lateral_top: Conv2dLayer,
    /// Fuse convs for levels below the top, descending level order.
    fuses: Vec<(usize, Conv2dLayer)>,
}

pub struct TopdownCoreCache {
    lateral_in: Tensor,
    /// Concatenated fuse inputs keyed by level.
    cats: BTreeMap<usize, Tensor>,
}

impl TopdownCore {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        in_widths: &[(usize, usize)],
        width: usize,
    ) -> Result<Self> {
        validate_in_widths(in_widths)?;
        let levels: Vec<(usize, usize)> = in_widths
            .iter()
            .copied()
            .filter(|&(l, _)| l >= 3)
            .collect();
        let (_, top_channels) = levels[levels.len() - 1];
        let lateral_top =
            Conv2dLayer::new(ps, &format!("{name}.lat5"), ConvSpec::new(top_channels, width, 1))?;
        let mut fuses = Vec::new();
        for &(level, channels) in levels.iter().rev().skip(1) {
            fuses.push((
                level,
                Conv2dLayer::new(
                    ps,
                    &format!("{name}.fuse{level}"),
                    ConvSpec::new(channels + width, width, 3).padding(1),
                )?,
            ));
        }
        Ok(Self {
            width,
            levels,
            lateral_top,
            fuses,
        })
    }

    fn min_level(&self) -> usize {
        self.levels[0].0
    }

    fn forward(
        &self,
        ps: &ParamStore,
        c: &PyramidFeatures,
    ) -> Result<(BTreeMap<usize, Tensor>, TopdownCoreCache)> {
        for &(level, channels) in &self.levels {
            let t = c.require(level)?;
            if t.channels() != channels {
                return Err(Error::Dimension(format!(
                    "level {level} has {} channels, expected {channels}",
                    t.channels()
                )));
            }
        }
        let top = c.require(5)?;
        let mut p = BTreeMap::new();
        p.insert(5, self.lateral_top.forward(ps, top)?);
        let mut cats = BTreeMap::new();
        for (level, conv) in &self.fuses {
            let up = upsample_nearest(&p[&(level + 1)], 2)?;
            let cat = concat_channels(&[c.require(*level)?.clone(), up])?;
            p.insert(*level, conv.forward(ps, &cat)?);
            cats.insert(*level, cat);
        }
        Ok((
            p,
            TopdownCoreCache {
                lateral_in: top.clone(),
                cats,
            },
        ))
    }

    /// Backpropagate per-level output grads to per-level input (C) grads.
    fn backward(
        &self,
        ps: &ParamStore,
        cache: &TopdownCoreCache,
        grad_p: &BTreeMap<usize, Tensor>,
        gs: &mut GradStore,
    ) -> Result<BTreeMap<usize, Tensor>> {
        let mut grad_c = BTreeMap::new();
        let mut pending: BTreeMap<usize, Tensor> = BTreeMap::new();
        // Ascend: each fuse sends gradient up to the level above it.
        for (level, conv) in self.fuses.iter().rev() {
            let cat = &cache.cats[level];
            let mut g = take_or_zeros(grad_p, *level, conv.spec.out_shape(cat)?);
            if let Some(p) = pending.remove(level) {
                g.add_assign(&p)?;
            }
            let g_cat = conv.backward(ps, cat, &g, gs)?;
            let c_channels = conv.spec.in_channels - self.width;
            let parts = split_channel_sizes(&g_cat, &[c_channels, self.width])?;
            let mut it = parts.into_iter();
            let g_c = it.next().unwrap();
            let g_up = it.next().unwrap();
            add_into(&mut grad_c, *level, g_c)?;
            add_into(&mut pending, level + 1, upsample_nearest_backward(&g_up, 2)?)?;
        }
        let top_shape = self.lateral_top.spec.out_shape(&cache.lateral_in)?;
        let mut g_top = take_or_zeros(grad_p, 5, top_shape);
        if let Some(p) = pending.remove(&5) {
            g_top.add_assign(&p)?;
        }
        let g_c5 = self
            .lateral_top
            .backward(ps, &cache.lateral_in, &g_top, gs)?;
        add_into(&mut grad_c, 5, g_c5)?;
        Ok(grad_c)
    }

    fn cost_layers(&self, c2_side: usize) -> Vec<LayerCost> {
        let mut out = Vec::new();
        let side5 = c2_side >> 3;
        out.push(LayerCost {
            name: self.lateral_top.name.clone(),
            params: self.lateral_top.param_count(),
            macs: self.lateral_top.spec.mac_count(side5, side5),
        });
        for (level, conv) in &self.fuses {
            let side = c2_side >> (level - 2);
            out.push(LayerCost {
                name: conv.name.clone(),
                params: conv.param_count(),
                macs: conv.spec.mac_count(side, side),
            });
        }
        out
    }
}

/// Baseline single-pass top-down pyramid.
pub struct TopdownFpn {
    pub width: usize,
    core: TopdownCore,
}

pub struct TopdownFpnCache {
    core: TopdownCoreCache,
}

impl TopdownFpn {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_widths: &[(usize, usize)],
        width: usize,
    ) -> Result<Self> {
        let core = TopdownCore::new(ps, name, in_widths, width)?;
        Ok(Self { width, core })
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        c: &PyramidFeatures,
    ) -> Result<(PyramidFeatures, TopdownFpnCache)> {
        let (p, core) = self.core.forward(ps, c)?;
        Ok((
            PyramidFeatures::new(p)?,
            TopdownFpnCache { core },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &TopdownFpnCache,
        grad_p: &BTreeMap<usize, Tensor>,
        gs: &mut GradStore,
    ) -> Result<BTreeMap<usize, Tensor>> {
        self.core.backward(ps, &cache.core, grad_p, gs)
    }

    pub fn cost_layers(&self, c2_side: usize) -> Vec<LayerCost> {
        self.core.cost_layers(c2_side)
    }

    pub fn fusion_graph(&self) -> FusionGraph {
        let mut g = FusionGraph::new(NeckVariant::TopdownFpn, self.width);
        for &(level, _) in &self.core.levels {
            g.nodes.push(FusionNode::input(level));
            g.nodes.push(FusionNode::output(level));
        }
        g.edges.push(FusionEdge {
            from: "C5".into(),
            to: "P5".into(),
            op: "lateral-1x1".into(),
            params: self.core.lateral_top.param_count(),
        });
        for (level, conv) in &self.core.fuses {
            g.edges.push(FusionEdge {
                from: format!("C{level}"),
                to: format!("P{level}"),
                op: "concat-fuse-3x3".into(),
                params: conv.param_count(),
            });
            g.edges.push(FusionEdge {
                from: format!("P{}", level + 1),
                to: format!("P{level}"),
                op: "upsample-x2".into(),
                params: 0,
            });
        }
        g.finish();
        g
    }
}

/// Two-pass aggregation: the top-down core, then a bottom-up pass with
/// stride-2 downsampling convs and 3x3 fuse convs.
pub struct Panet {
    pub width: usize,
    core: TopdownCore,
    /// Down convs keyed by source level, ascending.
    downs: Vec<(usize, Conv2dLayer)>,
    /// Bottom-up fuse convs keyed by target level, ascending.
    bu_fuses: Vec<(usize, Conv2dLayer)>,
}

pub struct PanetCache {
    core: TopdownCoreCache,
    /// Bottom-up outputs (down-conv inputs live here).
    n: BTreeMap<usize, Tensor>,
    /// Concatenated bottom-up fuse inputs keyed by target level.
    cats: BTreeMap<usize, Tensor>,
}

impl Panet {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_widths: &[(usize, usize)],
        width: usize,
    ) -> Result<Self> {
        let core = TopdownCore::new(ps, name, in_widths, width)?;
        let mut downs = Vec::new();
        let mut bu_fuses = Vec::new();
        for level in core.min_level()..5 {
            downs.push((
                level,
                Conv2dLayer::new(
                    ps,
                    &format!("{name}.down{level}"),
                    ConvSpec::new(width, width, 3).stride(2).padding(1),
                )?,
            ));
            bu_fuses.push((
                level + 1,
                Conv2dLayer::new(
                    ps,
                    &format!("{name}.bufuse{}", level + 1),
                    ConvSpec::new(2 * width, width, 3).padding(1),
                )?,
            ));
        }
        Ok(Self {
            width,
            core,
            downs,
            bu_fuses,
        })
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        c: &PyramidFeatures,
    ) -> Result<(PyramidFeatures, PanetCache)> {
        let (t, core_cache) = self.core.forward(ps, c)?;
        let lo = self.core.min_level();
        let mut n = BTreeMap::new();
        n.insert(lo, t[&lo].clone());
        let mut cats = BTreeMap::new();
        for ((src, down), (dst, fuse)) in self.downs.iter().zip(&self.bu_fuses) {
            let d = down.forward(ps, &n[src])?;
            let cat = concat_channels(&[t[dst].clone(), d])?;
            n.insert(*dst, fuse.forward(ps, &cat)?);
            cats.insert(*dst, cat);
        }
        Ok((
            PyramidFeatures::new(n.clone())?,
            PanetCache {
                core: core_cache,
                n,
                cats,
            },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &PanetCache,
        grad_p: &BTreeMap<usize, Tensor>,
        gs: &mut GradStore,
    ) -> Result<BTreeMap<usize, Tensor>> {
        let lo = self.core.min_level();
        let mut grad_t: BTreeMap<usize, Tensor> = BTreeMap::new();
        let mut pending_n: BTreeMap<usize, Tensor> = BTreeMap::new();
        // Descend the bottom-up pass.
        for ((src, down), (dst, fuse)) in self.downs.iter().zip(&self.bu_fuses).rev() {
            let mut g = take_or_zeros(grad_p, *dst, cache.n[dst].shape());
            if let Some(p) = pending_n.remove(dst) {
                g.add_assign(&p)?;
            }
            let g_cat = fuse.backward(ps, &cache.cats[dst], &g, gs)?;
            let parts = split_channel_sizes(&g_cat, &[self.width, self.width])?;
            let mut it = parts.into_iter();
            let g_t = it.next().unwrap();
            let g_d = it.next().unwrap();
            add_into(&mut grad_t, *dst, g_t)?;
            let g_n_src = down.backward(ps, &cache.n[src], &g_d, gs)?;
            add_into(&mut pending_n, *src, g_n_src)?;
        }
        // The lowest bottom-up node is the top-down output itself.
        let mut g_lo = take_or_zeros(grad_p, lo, cache.n[&lo].shape());
        if let Some(p) = pending_n.remove(&lo) {
            g_lo.add_assign(&p)?;
        }
        add_into(&mut grad_t, lo, g_lo)?;
        self.core.backward(ps, &cache.core, &grad_t, gs)
    }

    pub fn cost_layers(&self, c2_side: usize) -> Vec<LayerCost> {
        let mut out = self.core.cost_layers(c2_side);
        for (src, down) in &self.downs {
            let side = c2_side >> (src + 1 - 2);
            out.push(LayerCost {
                name: down.name.clone(),
                params: down.param_count(),
                macs: down.spec.mac_count(side, side),
            });
        }
        for (dst, fuse) in &self.bu_fuses {
            let side = c2_side >> (dst - 2);
            out.push(LayerCost {
                name: fuse.name.clone(),
                params: fuse.param_count(),
                macs: fuse.spec.mac_count(side, side),
            });
        }
        out
    }

    pub fn fusion_graph(&self) -> FusionGraph {
        let mut g = FusionGraph::new(NeckVariant::Panet, self.width);
        for &(level, _) in &self.core.levels {
            g.nodes.push(FusionNode::input(level));
            g.nodes.push(FusionNode {
                id: format!("T{level}"),
                level,
                kind: "internal".into(),
            });
            g.nodes.push(FusionNode::output(level));
        }
        g.edges.push(FusionEdge {
            from: "C5".into(),
            to: "T5".into(),
            op: "lateral-1x1".into(),
            params: self.core.lateral_top.param_count(),
        });
        for (level, conv) in &self.core.fuses {
            g.edges.push(FusionEdge {
                from: format!("C{level}"),
                to: format!("T{level}"),
                op: "concat-fuse-3x3".into(),
                params: conv.param_count(),
            });
            g.edges.push(FusionEdge {
                from: format!("T{}", level + 1),
                to: format!("T{level}"),
                op: "upsample-x2".into(),
                params: 0,
            });
        }
        let lo = self.core.min_level();
        g.edges.push(FusionEdge {
            from: format!("T{lo}"),
            to: format!("P{lo}"),
            op: "identity".into(),
            params: 0,
        });
        for ((src, down), (dst, fuse)) in self.downs.iter().zip(&self.bu_fuses) {
            g.edges.push(FusionEdge {
                from: format!("P{src}"),
                to: format!("P{dst}"),
                op: "down-3x3-s2".into(),
                params: down.param_count(),
            });
            g.edges.push(FusionEdge {
                from: format!("T{dst}"),
                to: format!("P{dst}"),
                op: "concat-fuse-3x3".into(),
                params: fuse.param_count(),
            });
        }
        g.finish();
        g
    }
}

enum CrossResample {
    /// Nearest-neighbor upsampling by the factor.
    Up(usize),
    /// Stride-2 3x3 resampling convolution.
    Down(Conv2dLayer),
}

/// One transfer edge: resample to the target level, then a 1x1 projection.
struct CrossEdge {
    target: usize,
    source: usize,
    resample: CrossResample,
    proj: Conv2dLayer,
}

/// Long-range injection: 1x1 channel alignment at the source, a stride-2
/// depthwise chain down to the target scale, then the 1x1 projection.
struct SkipEdge {
    source: usize,
    target: usize,
    align: Conv2dLayer,
    downs: Vec<Conv2dLayer>,
    proj: Conv2dLayer,
}

/// Pruned pyramid: one top-down pass for refined inputs, then per-level
/// concat of [lateral CBS, cross transfer, long skips] and a 1x1 merge.
pub struct EpaFpn {
    pub width: usize,
    pub skips_cfg: Vec<(usize, usize)>,
    core: TopdownCore,
    /// Lateral 1x1 CBS per output level, ascending.
    psi: Vec<(usize, Cbs)>,
    cross: Vec<CrossEdge>,
    skips: Vec<SkipEdge>,
    /// Output 1x1 merge per level, ascending.
    out_proj: Vec<(usize, Conv2dLayer)>,
}

struct CrossEdgeCache {
    /// Input to the projection (the resampled tensor).
    proj_in: Tensor,
    /// Input to the down conv when resampling downward.
    resample_in: Option<Tensor>,
}

struct SkipEdgeCache {
    align_in: Tensor,
    /// Input to each down conv in order.
    chain_ins: Vec<Tensor>,
    proj_in: Tensor,
}

pub struct EpaFpnCache {
    core: TopdownCoreCache,
    pub pin: BTreeMap<usize, Tensor>,
    psi_caches: Vec<(usize, CbsCache)>,
    cross_caches: Vec<CrossEdgeCache>,
    skip_caches: Vec<SkipEdgeCache>,
    /// Out-proj concat inputs per level, ascending with `out_proj`.
    cats: Vec<(usize, Tensor)>,
}

impl EpaFpn {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_widths: &[(usize, usize)],
        cfg: &NeckConfig,
    ) -> Result<Self> {
        if cfg.variant != NeckVariant::EpaFpn {
            return Err(Error::Config(format!(
                "expected epa-fpn config, got {}",
                cfg.variant.tag()
            )));
        }
        cfg.validate()?;
        let width = cfg.width;
        validate_in_widths(in_widths)?;
        let core = TopdownCore::new(ps, name, in_widths, width)?;
        let out_lo = core.min_level();
        if out_lo > 4 {
            return Err(Error::Topology(
                "pruned pyramid needs at least levels 4 and 5 for cross-connections".into(),
            ));
        }
        let out_levels: Vec<usize> = (out_lo..=5).collect();
        let mut psi = Vec::new();
        for &level in &out_levels {
            let channels = width_at(in_widths, level)?;
            psi.push((
                level,
                Cbs::new(
                    ps,
                    &format!("{name}.psi{level}"),
                    ConvSpec::new(channels, width, 1),
                )?,
            ));
        }
        // One transfer edge per output level carrying the refined top-down
        // feature at that same level; the top level, whose refinement is the
        // chain seed, instead takes a strided copy of the level below.
        let mut cross = Vec::new();
        for &target in &out_levels {
            let (source, resample) = if target < 5 {
                (target, CrossResample::Up(1))
            } else {
                (
                    target - 1,
                    CrossResample::Down(Conv2dLayer::new(
                        ps,
                        &format!("{name}.cross{target}.resample"),
                        ConvSpec::new(width, width, 3).stride(2).padding(1),
                    )?),
                )
            };
            cross.push(CrossEdge {
                target,
                source,
                resample,
                proj: Conv2dLayer::new(
                    ps,
                    &format!("{name}.cross{target}.proj"),
                    ConvSpec::new(width, width, 1),
                )?,
            });
        }
        let mut skips = Vec::new();
        for &(s, t) in &cfg.skips {
            let src_channels = width_at(in_widths, s)?;
            if !out_levels.contains(&t) {
                return Err(Error::Topology(format!(
                    "skip edge {s}->{t} targets a level that is not an output"
                )));
            }
            let align = Conv2dLayer::new(
                ps,
                &format!("{name}.skip{s}to{t}.align"),
                ConvSpec::new(src_channels, width, 1),
            )?;
            let mut downs = Vec::new();
            for k in 0..(t - s) {
                downs.push(Conv2dLayer::new(
                    ps,
                    &format!("{name}.skip{s}to{t}.down{k}"),
                    ConvSpec::new(width, width, 3)
                        .stride(2)
                        .padding(1)
                        .groups(width),
                )?);
            }
            let proj = Conv2dLayer::new(
                ps,
                &format!("{name}.skip{s}to{t}.proj"),
                ConvSpec::new(width, width, 1),
            )?;
            skips.push(SkipEdge {
                source: s,
                target: t,
                align,
                downs,
                proj,
            });
        }
        let mut out_proj = Vec::new();
        for &level in &out_levels {
            let pieces = 2 + skips.iter().filter(|e| e.target == level).count();
            out_proj.push((
                level,
                Conv2dLayer::new(
                    ps,
                    &format!("{name}.out{level}"),
                    ConvSpec::new(pieces * width, width, 1),
                )?,
            ));
        }
        Ok(Self {
            width,
            skips_cfg: cfg.skips.clone(),
            core,
            psi,
            cross,
            skips,
            out_proj,
        })
    }

    /// Concat piece order at a level: lateral, cross, then skips by source.
    fn piece_count(&self, level: usize) -> usize {
        2 + self.skips.iter().filter(|e| e.target == level).count()
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        c: &PyramidFeatures,
    ) -> Result<(PyramidFeatures, EpaFpnCache)> {
        // Long-skip sources sit outside the core's levels; check presence.
        for e in &self.skips {
            c.require(e.source)?;
        }
        let (pin, core_cache) = self.core.forward(ps, c)?;
        let mut psi_caches = Vec::new();
        let mut psi_outs: BTreeMap<usize, Tensor> = BTreeMap::new();
        for (level, cbs) in &self.psi {
            let (y, cache) = cbs.forward(ps, c.require(*level)?)?;
            psi_outs.insert(*level, y);
            psi_caches.push((*level, cache));
        }
        let mut cross_caches = Vec::new();
        let mut cross_outs: BTreeMap<usize, Tensor> = BTreeMap::new();
        for edge in &self.cross {
            let src = &pin[&edge.source];
            let (proj_in, resample_in) = match &edge.resample {
                CrossResample::Up(f) => (upsample_nearest(src, *f)?, None),
                CrossResample::Down(conv) => (conv.forward(ps, src)?, Some(src.clone())),
            };
            let y = edge.proj.forward(ps, &proj_in)?;
            cross_outs.insert(edge.target, y);
            cross_caches.push(CrossEdgeCache {
                proj_in,
                resample_in,
            });
        }
        let mut skip_caches = Vec::new();
        let mut skip_outs: Vec<(usize, usize, Tensor)> = Vec::new();
        for edge in &self.skips {
            let src = c.require(edge.source)?;
            let mut h = edge.align.forward(ps, src)?;
            let mut chain_ins = Vec::new();
            for down in &edge.downs {
                chain_ins.push(h.clone());
                h = down.forward(ps, &h)?;
            }
            let y = edge.proj.forward(ps, &h)?;
            skip_outs.push((edge.target, edge.source, y));
            skip_caches.push(SkipEdgeCache {
                align_in: src.clone(),
                chain_ins,
                proj_in: h,
            });
        }
        let mut outputs = BTreeMap::new();
        let mut cats = Vec::new();
        for (level, proj) in &self.out_proj {
            let mut pieces = vec![psi_outs[level].clone(), cross_outs[level].clone()];
            let mut level_skips: Vec<&(usize, usize, Tensor)> = skip_outs
                .iter()
                .filter(|(t, _, _)| t == level)
                .collect();
            level_skips.sort_by_key(|(_, s, _)| *s);
            for (_, _, y) in level_skips {
                pieces.push(y.clone());
            }
            let cat = concat_channels(&pieces)?;
            outputs.insert(*level, proj.forward(ps, &cat)?);
            cats.push((*level, cat));
        }
        Ok((
            PyramidFeatures::new(outputs)?,
            EpaFpnCache {
                core: core_cache,
                pin,
                psi_caches,
                cross_caches,
                skip_caches,
                cats,
            },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &EpaFpnCache,
        grad_p: &BTreeMap<usize, Tensor>,
        gs: &mut GradStore,
    ) -> Result<BTreeMap<usize, Tensor>> {
        let mut grad_c: BTreeMap<usize, Tensor> = BTreeMap::new();
        let mut grad_pin: BTreeMap<usize, Tensor> = BTreeMap::new();
        for ((level, proj), (cat_level, cat)) in self.out_proj.iter().zip(&cache.cats) {
            debug_assert_eq!(level, cat_level);
            let g = take_or_zeros(grad_p, *level, proj.spec.out_shape(cat)?);
            let g_cat = proj.backward(ps, cat, &g, gs)?;
            let sizes = vec![self.width; self.piece_count(*level)];
            let mut pieces = split_channel_sizes(&g_cat, &sizes)?.into_iter();

            // Lateral piece.
            let g_psi = pieces.next().unwrap();
            let (_, psi_cache) = cache
                .psi_caches
                .iter()
                .find(|(l, _)| l == level)
                .expect("psi cache present");
            let psi = &self.psi.iter().find(|(l, _)| l == level).unwrap().1;
            add_into(&mut grad_c, *level, psi.backward(ps, psi_cache, &g_psi, gs)?)?;

            // Cross piece.
            let g_cross = pieces.next().unwrap();
            let (idx, edge) = self
                .cross
                .iter()
                .enumerate()
                .find(|(_, e)| e.target == *level)
                .expect("cross edge present");
            let ecache = &cache.cross_caches[idx];
            let g_proj_in = edge.proj.backward(ps, &ecache.proj_in, &g_cross, gs)?;
            let g_src = match &edge.resample {
                CrossResample::Up(f) => upsample_nearest_backward(&g_proj_in, *f)?,
                CrossResample::Down(conv) => conv.backward(
                    ps,
                    ecache.resample_in.as_ref().expect("down cache"),
                    &g_proj_in,
                    gs,
                )?,
            };
            add_into(&mut grad_pin, edge.source, g_src)?;

            // Skip pieces, ascending source order (matches forward).
            let mut level_skips: Vec<(usize, &SkipEdge, &SkipEdgeCache)> = self
                .skips
                .iter()
                .zip(&cache.skip_caches)
                .enumerate()
                .filter(|(_, (e, _))| e.target == *level)
                .map(|(i, (e, sc))| (i, e, sc))
                .collect();
            level_skips.sort_by_key(|(_, e, _)| e.source);
            for (_, edge, scache) in level_skips {
                let g_piece = pieces.next().unwrap();
                let mut g_h = edge.proj.backward(ps, &scache.proj_in, &g_piece, gs)?;
                for (down, input) in edge.downs.iter().zip(&scache.chain_ins).rev() {
                    g_h = down.backward(ps, input, &g_h, gs)?;
                }
                let g_src = edge.align.backward(ps, &scache.align_in, &g_h, gs)?;
                add_into(&mut grad_c, edge.source, g_src)?;
            }
        }
        // Refined levels with no direct edge consumer (the deepest: its
        // transfer pulls from the level below) get zero direct grad; the
        // core still backprops their intra-chain use.
        for (level, t) in &cache.pin {
            grad_pin
                .entry(*level)
                .or_insert_with(|| Tensor::zeros_like(t));
        }
        let core_grads = self.core.backward(ps, &cache.core, &grad_pin, gs)?;
        for (level, g) in core_grads {
            add_into(&mut grad_c, level, g)?;
        }
        Ok(grad_c)
    }

    pub fn cost_layers(&self, c2_side: usize) -> Vec<LayerCost> {
        let mut out = self.core.cost_layers(c2_side);
        for (level, cbs) in &self.psi {
            let side = c2_side >> (level - 2);
            out.push(LayerCost {
                name: cbs.conv.name.clone(),
                params: cbs.conv.param_count(),
                macs: cbs.conv.spec.mac_count(side, side),
            });
            out.push(LayerCost {
                name: cbs.norm.name.clone(),
                params: 2 * cbs.norm.channels,
                macs: cbs.norm.channels * side * side,
            });
        }
        for edge in &self.cross {
            let side = c2_side >> (edge.target - 2);
            if let CrossResample::Down(conv) = &edge.resample {
                out.push(LayerCost {
                    name: conv.name.clone(),
                    params: conv.param_count(),
                    macs: conv.spec.mac_count(side, side),
                });
            }
            out.push(LayerCost {
                name: edge.proj.name.clone(),
                params: edge.proj.param_count(),
                macs: edge.proj.spec.mac_count(side, side),
            });
        }
        for edge in &self.skips {
            let src_side = c2_side >> (edge.source - 2);
            out.push(LayerCost {
                name: edge.align.name.clone(),
                params: edge.align.param_count(),
                macs: edge.align.spec.mac_count(src_side, src_side),
            });
            for (k, down) in edge.downs.iter().enumerate() {
                let side = c2_side >> (edge.source + k + 1 - 2);
                out.push(LayerCost {
                    name: down.name.clone(),
                    params: down.param_count(),
                    macs: down.spec.mac_count(side, side),
                });
            }
            let dst_side = c2_side >> (edge.target - 2);
            out.push(LayerCost {
                name: edge.proj.name.clone(),
                params: edge.proj.param_count(),
                macs: edge.proj.spec.mac_count(dst_side, dst_side),
            });
        }
        for (level, proj) in &self.out_proj {
            let side = c2_side >> (level - 2);
            out.push(LayerCost {
                name: proj.name.clone(),
                params: proj.param_count(),
                macs: proj.spec.mac_count(side, side),
            });
        }
        out
    }

    pub fn fusion_graph(&self) -> FusionGraph {
        let mut g = FusionGraph::new(NeckVariant::EpaFpn, self.width);
        let mut seen_inputs: Vec<usize> = self.core.levels.iter().map(|&(l, _)| l).collect();
        for e in &self.skips {
            if !seen_inputs.contains(&e.source) {
                seen_inputs.push(e.source);
            }
        }
        seen_inputs.sort_unstable();
        for level in seen_inputs {
            g.nodes.push(FusionNode::input(level));
        }
        for &(level, _) in &self.core.levels {
            g.nodes.push(FusionNode {
                id: format!("Pin{level}"),
                level,
                kind: "internal".into(),
            });
        }
        for (level, _) in &self.out_proj {
            g.nodes.push(FusionNode::output(*level));
        }
        g.edges.push(FusionEdge {
            from: "C5".into(),
            to: "Pin5".into(),
            op: "lateral-1x1".into(),
            params: self.core.lateral_top.param_count(),
        });
        for (level, conv) in &self.core.fuses {
            g.edges.push(FusionEdge {
                from: format!("C{level}"),
                to: format!("Pin{level}"),
                op: "concat-fuse-3x3".into(),
                params: conv.param_count(),
            });
            g.edges.push(FusionEdge {
                from: format!("Pin{}", level + 1),
                to: format!("Pin{level}"),
                op: "upsample-x2".into(),
                params: 0,
            });
        }
        for (level, cbs) in &self.psi {
            g.edges.push(FusionEdge {
                from: format!("C{level}"),
                to: format!("P{level}"),
                op: "psi-1x1-cbs".into(),
                params: cbs.param_count(),
            });
        }
        for edge in &self.cross {
            let resample_params = match &edge.resample {
                CrossResample::Up(_) => 0,
                CrossResample::Down(conv) => conv.param_count(),
            };
            g.edges.push(FusionEdge {
                from: format!("Pin{}", edge.source),
                to: format!("P{}", edge.target),
                op: "trans-cross".into(),
                params: resample_params + edge.proj.param_count(),
            });
        }
        for edge in &self.skips {
            let params = edge.align.param_count()
                + edge.downs.iter().map(|d| d.param_count()).sum::<usize>()
                + edge.proj.param_count();
            g.edges.push(FusionEdge {
                from: format!("C{}", edge.source),
                to: format!("P{}", edge.target),
                op: "trans-long-skip".into(),
                params,
            });
        }
        for (level, proj) in &self.out_proj {
            g.edges.push(FusionEdge {
                from: format!("P{level}"),
                to: format!("P{level}"),
                op: "merge-1x1".into(),
                params: proj.param_count(),
            });
        }
        g.finish();
        g
    }
}

/// Serializable node/edge dump of a neck's fusion topology.
#[derive(Serialize)]
pub struct FusionGraph {
    pub variant: String,
    pub width: usize,
    pub nodes: Vec<FusionNode>,
    pub edges: Vec<FusionEdge>,
    pub total_params: usize,
}

#[derive(Serialize)]
pub struct FusionNode {
    pub id: String,
    pub level: usize,
    pub kind: String,
}

impl FusionNode {
    fn input(level: usize) -> Self {
        Self {
            id: format!("C{level}"),
            level,
            kind: "input".into(),
        }
    }

    fn output(level: usize) -> Self {
        Self {
            id: format!("P{level}"),
            level,
            kind: "output".into(),
        }
    }
}

#[derive(Serialize)]
pub struct FusionEdge {
    pub from: String,
    pub to: String,
    pub op: String,
    pub params: usize,
}

impl FusionGraph {
    fn new(variant: NeckVariant, width: usize) -> Self {
        Self {
            variant: variant.tag().into(),
            width,
            nodes: Vec::new(),
            edges: Vec::new(),
            total_params: 0,
        }
    }

    fn finish(&mut self) {
        self.total_params = self.edges.iter().map(|e| e.params).sum();
    }

    /// Kahn topological check over the node/edge list; self-loop merge
    /// edges (same from/to) are intra-node and skipped.
    pub fn is_acyclic(&self) -> bool {
        let ids: Vec<&str> = self.nodes.iter().map(|n| n.id.as_str()).collect();
        let index = |id: &str| ids.iter().position(|&n| n == id);
        let mut indegree = vec![0usize; ids.len()];
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); ids.len()];
        for e in &self.edges {
            if e.from == e.to {
                continue;
            }
            let (Some(a), Some(b)) = (index(&e.from), index(&e.to)) else {
                return false;
            };
            adj[a].push(b);
            indegree[b] += 1;
        }
        let mut queue: Vec<usize> = (0..ids.len()).filter(|&i| indegree[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = queue.pop() {
            seen += 1;
            for &j in &adj[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    queue.push(j);
                }
            }
        }
        seen == ids.len()
    }
}

/// Any of the three neck variants behind one dispatch point.
pub enum NeckModule {
    Topdown(TopdownFpn),
    Panet(Panet),
    Epa(EpaFpn),
}

pub enum NeckCache {
    Topdown(TopdownFpnCache),
    Panet(PanetCache),
    Epa(EpaFpnCache),
}

impl NeckModule {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &NeckConfig,
        in_widths: &[(usize, usize)],
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.variant {
            NeckVariant::TopdownFpn => {
                NeckModule::Topdown(TopdownFpn::new(ps, name, in_widths, cfg.width)?)
            }
            NeckVariant::Panet => NeckModule::Panet(Panet::new(ps, name, in_widths, cfg.width)?),
            NeckVariant::EpaFpn => NeckModule::Epa(EpaFpn::new(ps, name, in_widths, cfg)?),
        })
    }

    pub fn variant(&self) -> NeckVariant {
        match self {
            NeckModule::Topdown(_) => NeckVariant::TopdownFpn,
            NeckModule::Panet(_) => NeckVariant::Panet,
            NeckModule::Epa(_) => NeckVariant::EpaFpn,
        }
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        c: &PyramidFeatures,
    ) -> Result<(PyramidFeatures, NeckCache)> {
        Ok(match self {
            NeckModule::Topdown(m) => {
                let (p, cache) = m.forward(ps, c)?;
                (p, NeckCache::Topdown(cache))
            }
            NeckModule::Panet(m) => {
                let (p, cache) = m.forward(ps, c)?;
                (p, NeckCache::Panet(cache))
            }
            NeckModule::Epa(m) => {
                let (p, cache) = m.forward(ps, c)?;
                (p, NeckCache::Epa(cache))
            }
        })
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &NeckCache,
        grad_p: &BTreeMap<usize, Tensor>,
        gs: &mut GradStore,
    ) -> Result<BTreeMap<usize, Tensor>> {
        match (self, cache) {
            (NeckModule::Topdown(m), NeckCache::Topdown(c)) => m.backward(ps, c, grad_p, gs),
            (NeckModule::Panet(m), NeckCache::Panet(c)) => m.backward(ps, c, grad_p, gs),
            (NeckModule::Epa(m), NeckCache::Epa(c)) => m.backward(ps, c, grad_p, gs),
            _ => Err(Error::Config("neck cache does not match variant".into())),
        }
    }

    pub fn cost_layers(&self, c2_side: usize) -> Vec<LayerCost> {
        match self {
            NeckModule::Topdown(m) => m.cost_layers(c2_side),
            NeckModule::Panet(m) => m.cost_layers(c2_side),
            NeckModule::Epa(m) => m.cost_layers(c2_side),
        }
    }

    pub fn fusion_graph(&self) -> FusionGraph {
        match self {
            NeckModule::Topdown(m) => m.fusion_graph(),
            NeckModule::Panet(m) => m.fusion_graph(),
            NeckModule::Epa(m) => m.fusion_graph(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.cost_layers(REFERENCE_C2_SIDE)
            .iter()
            .map(|l| l.params)
            .sum()
    }
}

/// Per-layer cost row.
#[derive(Debug, Clone, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub macs: usize,
}

/// Aggregate parameter / multiply-accumulate / FLOP report.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub params: usize,
    pub macs: usize,
    pub flops: usize,
    pub per_layer: Vec<LayerCost>,
}

/// Exact parameter and MAC accounting at the given stride-4 side length;
/// FLOPs are counted as 2 * MACs.
pub fn count_cost(neck: &NeckModule, c2_side: usize) -> CostReport {
    let per_layer = neck.cost_layers(c2_side);
    let params = per_layer.iter().map(|l| l.params).sum();
    let macs = per_layer.iter().map(|l| l.macs).sum();
    CostReport {
        params,
        macs,
        flops: 2 * macs,
        per_layer,
    }
}
