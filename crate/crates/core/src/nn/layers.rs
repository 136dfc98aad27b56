//! Layer blocks: convolution with registered parameters, the frozen-statistic
//! per-channel affine used as the norm inside CBS blocks, and the CBS block
//! itself (conv + norm + SiLU).

use crate::error::{Error, Result};
use crate::nn::{GradStore, Init, ParamId, ParamStore};
use crate::tensor::{conv2d, conv2d_backward, silu, silu_backward, ConvSpec, Tensor};

/// A convolution whose weight/bias live in a [`ParamStore`].
pub struct Conv2dLayer {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2dLayer {
    pub fn new(ps: &mut ParamStore, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let weight = ps.register(
            &format!("{name}.weight"),
            spec.weight_shape(),
            Init::KaimingUniform,
            true,
        )?;
        let bias = if spec.has_bias {
            Some(ps.register(
                &format!("{name}.bias"),
                [1, spec.out_channels, 1, 1],
                Init::Zero,
                false,
            )?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            spec,
            weight,
            bias,
        })
    }

    fn bias_values<'a>(&self, ps: &'a ParamStore) -> &'a [f64] {
        match self.bias {
            Some(id) => ps.get(id).data(),
            None => &[],
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.spec, ps.get(self.weight), self.bias_values(ps))
    }

    /// Backward pass: accumulates weight/bias gradients, returns grad wrt x.
    pub fn backward(
        &self,
        ps: &ParamStore,
        x: &Tensor,
        grad_out: &Tensor,
        gs: &mut GradStore,
    ) -> Result<Tensor> {
        let (grad_x, grad_w, grad_b) = conv2d_backward(x, &self.spec, ps.get(self.weight), grad_out)?;
        gs.accumulate(self.weight, &grad_w)?;
        if let Some(id) = self.bias {
            gs.accumulate_slice(id, &grad_b)?;
        }
        Ok(grad_x)
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }
}

/// Per-channel `y = scale[c] * x + shift[c]` with the normalizing statistics
/// frozen to (0, 1) at init, so only the affine pair is learned. Keeps the
/// gradient math exact while preserving the conv-norm-activation structure.
pub struct ChannelAffine {
    pub name: String,
    pub channels: usize,
    pub scale: ParamId,
    pub shift: ParamId,
}

impl ChannelAffine {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let scale = ps.register(
            &format!("{name}.scale"),
            [1, channels, 1, 1],
            Init::One,
            false,
        )?;
        let shift = ps.register(
            &format!("{name}.shift"),
            [1, channels, 1, 1],
            Init::Zero,
            false,
        )?;
        Ok(Self {
            name: name.to_string(),
            channels,
            scale,
            shift,
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.channels() != self.channels {
            return Err(Error::Dimension(format!(
                "{}: expected {} channels, got {}",
                self.name,
                self.channels,
                x.channels()
            )));
        }
        let scale = ps.get(self.scale).data();
        let shift = ps.get(self.shift).data();
        let mut y = Tensor::zeros(x.shape());
        for n in 0..x.batch() {
            for c in 0..x.channels() {
                let src = x.plane_slice(n, c);
                let dst = y.plane_slice_mut(n, c);
                let (s, b) = (scale[c], shift[c]);
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = s * v + b;
                }
            }
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        x: &Tensor,
        grad_out: &Tensor,
        gs: &mut GradStore,
    ) -> Result<Tensor> {
        if grad_out.shape() != x.shape() {
            return Err(Error::Dimension(format!(
                "{}: grad shape {:?} does not match input {:?}",
                self.name,
                grad_out.shape(),
                x.shape()
            )));
        }
        let scale = ps.get(self.scale).data();
        let mut grad_x = Tensor::zeros(x.shape());
        let mut grad_scale = vec![0.0; self.channels];
        let mut grad_shift = vec![0.0; self.channels];
        for n in 0..x.batch() {
            for c in 0..x.channels() {
                let xs = x.plane_slice(n, c);
                let gs_out = grad_out.plane_slice(n, c);
                let gx = grad_x.plane_slice_mut(n, c);
                let s = scale[c];
                let mut acc_scale = 0.0;
                let mut acc_shift = 0.0;
                for ((g, v), dst) in gs_out.iter().zip(xs).zip(gx.iter_mut()) {
                    *dst = s * g;
                    acc_scale += g * v;
                    acc_shift += g;
                }
                grad_scale[c] += acc_scale;
                grad_shift[c] += acc_shift;
            }
        }
        gs.accumulate_slice(self.scale, &grad_scale)?;
        gs.accumulate_slice(self.shift, &grad_shift)?;
        Ok(grad_x)
    }
}

/// Conv + frozen-stat norm + SiLU.
pub struct Cbs {
    pub conv: Conv2dLayer,
    pub norm: ChannelAffine,
}

/// Intermediates needed for the backward pass: the block input, the conv
/// output (norm input), and the norm output (SiLU input).
pub struct CbsCache {
    pub x: Tensor,
    pub conv_out: Tensor,
    pub norm_out: Tensor,
}

impl Cbs {
    pub fn new(ps: &mut ParamStore, name: &str, spec: ConvSpec) -> Result<Self> {
        let out_channels = spec.out_channels;
        let conv = Conv2dLayer::new(ps, &format!("{name}.conv"), spec)?;
        let norm = ChannelAffine::new(ps, &format!("{name}.norm"), out_channels)?;
        Ok(Self { conv, norm })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<(Tensor, CbsCache)> {
        let conv_out = self.conv.forward(ps, x)?;
        let norm_out = self.norm.forward(ps, &conv_out)?;
        let y = silu(&norm_out);
        Ok((
            y,
            CbsCache {
                x: x.clone(),
                conv_out,
                norm_out,
            },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &CbsCache,
        grad_out: &Tensor,
        gs: &mut GradStore,
    ) -> Result<Tensor> {
        let grad_norm_out = silu_backward(&cache.norm_out, grad_out)?;
        let grad_conv_out = self.norm.backward(ps, &cache.conv_out, &grad_norm_out, gs)?;
        self.conv.backward(ps, &cache.x, &grad_conv_out, gs)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + 2 * self.norm.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{fill_uniform, finite_diff_grad, max_rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], bound: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(shape);
        fill_uniform(&mut t, bound, &mut rng);
        t
    }

    #[test]
    fn conv_layer_registers_weight_and_bias() {
        let mut ps = ParamStore::new(0);
        let layer =
            Conv2dLayer::new(&mut ps, "stem", ConvSpec::new(3, 8, 3).same_padding()).unwrap();
        assert_eq!(ps.get(layer.weight).shape(), [8, 3, 3, 3]);
        assert_eq!(ps.get(layer.bias.unwrap()).shape(), [1, 8, 1, 1]);
        assert!(ps.decays(layer.weight));
        assert!(!ps.decays(layer.bias.unwrap()));
        assert_eq!(layer.param_count(), 8 * 3 * 9 + 8);
    }

    #[test]
    fn affine_defaults_to_identity() {
        let mut ps = ParamStore::new(0);
        let norm = ChannelAffine::new(&mut ps, "n", 3).unwrap();
        let x = random_tensor([2, 3, 4, 4], 2.0, 1);
        let y = norm.forward(&ps, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn affine_scales_and_shifts_per_channel() {
        let mut ps = ParamStore::new(0);
        let norm = ChannelAffine::new(&mut ps, "n", 2).unwrap();
        ps.get_mut(norm.scale).data_mut().copy_from_slice(&[2.0, -1.0]);
        ps.get_mut(norm.shift).data_mut().copy_from_slice(&[0.5, 1.0]);
        let x = Tensor::from_vec([1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = norm.forward(&ps, &x).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, -2.0, -3.0]);
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let mut ps = ParamStore::new(4);
        let norm = ChannelAffine::new(&mut ps, "n", 3).unwrap();
        ps.get_mut(norm.scale)
            .data_mut()
            .copy_from_slice(&[1.2, -0.7, 0.4]);
        ps.get_mut(norm.shift)
            .data_mut()
            .copy_from_slice(&[0.1, 0.0, -0.3]);
        let x = random_tensor([2, 3, 3, 3], 1.5, 5);
        let mut gs = GradStore::zeros_like(&ps);
        let grad_out = Tensor::filled(x.shape(), 1.0);
        let grad_x = norm.backward(&ps, &x, &grad_out, &mut gs).unwrap();
        let fd = finite_diff_grad(|t| Ok(norm.forward(&ps, t)?.sum()), &x, 1e-5).unwrap();
        assert!(max_rel_error(&grad_x, &fd) < 1e-8);
        // d(sum)/d(shift_c) is the number of positions in channel c.
        assert_eq!(gs.get(norm.shift).data(), &[18.0, 18.0, 18.0]);
    }

    #[test]
    fn cbs_backward_matches_finite_differences() {
        let mut ps = ParamStore::new(11);
        let cbs = Cbs::new(&mut ps, "cbs", ConvSpec::new(3, 4, 3).same_padding()).unwrap();
        let x = random_tensor([1, 3, 5, 5], 1.0, 2);
        let (_, cache) = cbs.forward(&ps, &x).unwrap();
        let mut gs = GradStore::zeros_like(&ps);
        let grad_out = Tensor::filled(cache.norm_out.shape(), 1.0);
        let grad_x = cbs.backward(&ps, &cache, &grad_out, &mut gs).unwrap();

        let fd_x = finite_diff_grad(|t| Ok(cbs.forward(&ps, t)?.0.sum()), &x, 1e-5).unwrap();
        assert!(max_rel_error(&grad_x, &fd_x) < 1e-6);

        // Also check a parameter gradient (conv weight) through the block.
        let weight_id = cbs.conv.weight;
        let w0 = ps.get(weight_id).clone();
        let mut ps_mut = ps;
        let fd_w = finite_diff_grad(
            |w| {
                *ps_mut.get_mut(weight_id) = w.clone();
                let y = cbs.forward(&ps_mut, &x)?.0.sum();
                Ok(y)
            },
            &w0,
            1e-5,
        )
        .unwrap();
        *ps_mut.get_mut(weight_id) = w0;
        assert!(max_rel_error(gs.get(weight_id), &fd_w) < 1e-6);
    }

    #[test]
    fn cbs_param_count_includes_affine() {
        let mut ps = ParamStore::new(0);
        let cbs = Cbs::new(&mut ps, "c", ConvSpec::new(16, 32, 3).same_padding()).unwrap();
        assert_eq!(cbs.param_count(), 9 * 16 * 32 + 32 + 64);
    }
}
