//! Trainable-parameter registry and the network blocks built on top of the
//! tensor kernels: conv/norm layers, the four-branch split-attention
//! bottleneck, and the pyramid necks.

mod layers;
mod msddsp;
mod neck;

pub use layers::{Cbs, CbsCache, ChannelAffine, Conv2dLayer};
pub use msddsp::{
    attention_fuse, attention_fuse_backward, branch1_multiscale, branch2_decorrelate,
    branch3_backward, branch3_channel_weight, branch4_identity, branch_weight_summary,
    receptive_field, BranchMask, BranchWeightRecord, BranchWeights, MsDdsp, MsDdspCache,
    MsDdspConfig,
};
pub use neck::{
    count_cost, CostReport, EpaFpn, FusionEdge, FusionGraph, FusionNode, LayerCost, NeckCache,
    NeckConfig, NeckModule, NeckVariant, Panet, PyramidFeatures, TopdownFpn, REFERENCE_C2_SIDE,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{fill_uniform, Tensor};

/// Handle to one registered parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Initialization rule for a registered parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `[-sqrt(6/fan_in), sqrt(6/fan_in))` with `fan_in` taken
    /// from the trailing three dims of the shape (in_ch/groups * kh * kw).
    KaimingUniform,
    Zero,
    One,
}

struct ParamEntry {
    name: String,
    tensor: Tensor,
    /// Whether weight decay applies (convolution weights yes; biases and
    /// affine scale/shift no).
    decay: bool,
}

/// Central registry of trainable tensors. Registration order is fixed by
/// construction order, so a seed fully determines every initial value.
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn register(
        &mut self,
        name: &str,
        shape: [usize; 4],
        init: Init,
        decay: bool,
    ) -> Result<ParamId> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let tensor = match init {
            Init::KaimingUniform => {
                let fan_in = shape[1] * shape[2] * shape[3];
                if fan_in == 0 {
                    return Err(Error::Dimension(format!(
                        "parameter {name} has zero fan-in for shape {shape:?}"
                    )));
                }
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut t = Tensor::zeros(shape);
                fill_uniform(&mut t, bound, &mut self.rng);
                t
            }
            Init::Zero => Tensor::zeros(shape),
            Init::One => Tensor::filled(shape, 1.0),
        };
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
            decay,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total scalar count across all registered tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }
}

/// Per-parameter gradient accumulator mirroring a [`ParamStore`].
pub struct GradStore {
    grads: Vec<Tensor>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .entries
                .iter()
                .map(|e| Tensor::zeros(e.tensor.shape()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        self.grads[id.0].add_assign(grad)
    }

    pub fn accumulate_slice(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        let g = &mut self.grads[id.0];
        if g.numel() != grad.len() {
            return Err(Error::Dimension(format!(
                "gradient length {} does not match parameter size {}",
                grad.len(),
                g.numel()
            )));
        }
        for (dst, src) in g.data_mut().iter_mut().zip(grad) {
            *dst += *src;
        }
        Ok(())
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn reset(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_init() {
        let mut a = ParamStore::new(9);
        let mut b = ParamStore::new(9);
        let ia = a
            .register("w", [4, 3, 3, 3], Init::KaimingUniform, true)
            .unwrap();
        let ib = b
            .register("w", [4, 3, 3, 3], Init::KaimingUniform, true)
            .unwrap();
        assert_eq!(a.get(ia), b.get(ib));
    }

    #[test]
    fn different_seed_different_init() {
        let mut a = ParamStore::new(1);
        let mut b = ParamStore::new(2);
        let ia = a
            .register("w", [4, 3, 3, 3], Init::KaimingUniform, true)
            .unwrap();
        let ib = b
            .register("w", [4, 3, 3, 3], Init::KaimingUniform, true)
            .unwrap();
        assert_ne!(a.get(ia), b.get(ib));
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut ps = ParamStore::new(3);
        let id = ps
            .register("w", [8, 4, 3, 3], Init::KaimingUniform, true)
            .unwrap();
        let bound = (6.0_f64 / (4.0 * 9.0)).sqrt();
        assert!(ps.get(id).iter().all(|v| v.abs() <= bound));
        assert!(ps.get(id).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut ps = ParamStore::new(0);
        ps.register("w", [1, 1, 1, 1], Init::Zero, true).unwrap();
        assert!(matches!(
            ps.register("w", [1, 1, 1, 1], Init::Zero, true),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn grad_store_accumulates() {
        let mut ps = ParamStore::new(0);
        let id = ps.register("b", [1, 2, 1, 1], Init::Zero, false).unwrap();
        let mut gs = GradStore::zeros_like(&ps);
        gs.accumulate_slice(id, &[1.0, 2.0]).unwrap();
        gs.accumulate_slice(id, &[0.5, -1.0]).unwrap();
        assert_eq!(gs.get(id).data(), &[1.5, 1.0]);
        gs.reset();
        assert_eq!(gs.get(id).data(), &[0.0, 0.0]);
    }
}
