//! The assembled two-branch network.
//!
//! Training evaluates both branches: the coarse head reads the bilinear
//! descriptor of the coarse trunk output, the fine head reads the descriptor
//! of the fine trunk output (which is computed from the coarse feature map).
//! Inference evaluates only the fine path and never touches the coarse head.

use crate::backbone::{Backbone, TrunkCache, TrunkConfig};
use crate::bilinear::{BilinearDescriptor, Head};
use crate::error::{Error, Result};
use crate::tensor::{Parameter, Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SbpNetwork {
    pub backbone: Backbone,
    pub coarse_head: Head,
    pub fine_head: Head,
}

#[derive(Clone, Debug)]
struct BranchCache {
    fmap: Tensor,
    descriptor: BilinearDescriptor,
}

/// Activations retained by [`SbpNetwork::forward_train`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    cnet: TrunkCache,
    fnet: TrunkCache,
    coarse: BranchCache,
    fine: BranchCache,
}

impl ForwardCache {
    /// Distance of this forward pass to the nearest ReLU, pooling or
    /// signed-sqrt switching point.
    pub fn kink_distance(&self) -> f64 {
        self.cnet
            .kink_distance()
            .min(self.fnet.kink_distance())
            .min(self.coarse.descriptor.sqrt_kink_distance())
            .min(self.fine.descriptor.sqrt_kink_distance())
    }
}

pub struct TrainOutput {
    pub z_coarse: Tensor,
    pub z_fine: Tensor,
    pub cache: ForwardCache,
}

/// Which parameters receive gradients during backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardScope {
    Full,
    /// Heads only; the trunks are treated as frozen feature extractors.
    HeadsOnly,
}

impl SbpNetwork {
    pub fn init(config: TrunkConfig, num_coarse: usize, num_fine: usize, rng: &mut Rng) -> Result<Self> {
        if num_coarse == 0 || num_fine == 0 {
            return Err(Error::InvalidConfig("class counts must be positive".into()));
        }
        let backbone = Backbone::init(config, rng)?;
        let dc = backbone.config.coarse_shape()[0];
        let df = backbone.config.fine_shape()[0];
        let coarse_head = Head::init(num_coarse, dc * dc, rng);
        let fine_head = Head::init(num_fine, df * df, rng);
        Ok(Self {
            backbone,
            coarse_head,
            fine_head,
        })
    }

    pub fn config(&self) -> &TrunkConfig {
        &self.backbone.config
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse_head.classes()
    }

    pub fn num_fine(&self) -> usize {
        self.fine_head.classes()
    }

    pub fn forward_train(&self, x: &Tensor) -> Result<TrainOutput> {
        x.expect_shape(&self.config().input, "network input")?;
        let (f_map, cnet) = self.backbone.cnet.forward_cached(x)?;
        let (g_map, fnet) = self.backbone.fnet.forward_cached(&f_map)?;
        let coarse_desc = BilinearDescriptor::compute(&f_map)?;
        let fine_desc = BilinearDescriptor::compute(&g_map)?;
        let z_coarse = self.coarse_head.forward(&coarse_desc.normalized)?;
        let z_fine = self.fine_head.forward(&fine_desc.normalized)?;
        Ok(TrainOutput {
            z_coarse,
            z_fine,
            cache: ForwardCache {
                cnet,
                fnet,
                coarse: BranchCache {
                    fmap: f_map,
                    descriptor: coarse_desc,
                },
                fine: BranchCache {
                    fmap: g_map,
                    descriptor: fine_desc,
                },
            },
        })
    }

    /// Fine logits only.
    pub fn forward_infer(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.backbone.cnet_forward(x)?;
        let g = self.backbone.fnet_forward(&f)?;
        let desc = BilinearDescriptor::compute(&g.tensor)?;
        self.fine_head.forward(&desc.normalized)
    }

    /// Coarse-head logits; a training diagnostic, not used for prediction.
    pub fn forward_coarse(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.backbone.cnet_forward(x)?;
        let desc = BilinearDescriptor::compute(&f.tensor)?;
        self.coarse_head.forward(&desc.normalized)
    }

    /// Accumulates the gradients of `dz_coarse·z_coarse + dz_fine·z_fine`
    /// into every parameter in one pass and returns the input gradient.
    /// `dz_coarse = None` detaches the coarse head entirely.
    pub fn backward(
        &mut self,
        cache: &ForwardCache,
        dz_coarse: Option<&Tensor>,
        dz_fine: &Tensor,
        scope: BackwardScope,
    ) -> Result<Tensor> {
        let d_fine_desc = self.fine_head.backward(&cache.fine.descriptor.normalized, dz_fine)?;
        let d_coarse_desc = match dz_coarse {
            Some(dz) => Some(self.coarse_head.backward(&cache.coarse.descriptor.normalized, dz)?),
            None => None,
        };
        if scope == BackwardScope::HeadsOnly {
            return Ok(Tensor::zeros(&self.config().input));
        }

        let d_g_map = cache.fine.descriptor.backward(&cache.fine.fmap, &d_fine_desc)?;
        let mut d_f_map = self.backbone.fnet.backward(&cache.fnet, &d_g_map)?;
        if let Some(d) = d_coarse_desc {
            let from_coarse = cache.coarse.descriptor.backward(&cache.coarse.fmap, &d)?;
            d_f_map.add_assign(&from_coarse)?;
        }
        self.backbone.cnet.backward(&cache.cnet, &d_f_map)
    }

    /// Parameters in a fixed order with stable names.
    pub fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        for (i, b) in self.backbone.cnet.blocks.iter().enumerate() {
            out.push((format!("cnet.{i}.weight"), &b.weight));
            out.push((format!("cnet.{i}.bias"), &b.bias));
        }
        for (i, b) in self.backbone.fnet.blocks.iter().enumerate() {
            out.push((format!("fnet.{i}.weight"), &b.weight));
            out.push((format!("fnet.{i}.bias"), &b.bias));
        }
        out.push(("coarse_head.weight".into(), &self.coarse_head.weight));
        out.push(("coarse_head.bias".into(), &self.coarse_head.bias));
        out.push(("fine_head.weight".into(), &self.fine_head.weight));
        out.push(("fine_head.bias".into(), &self.fine_head.bias));
        out
    }

    /// Same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = Vec::new();
        out.extend(self.backbone.cnet.params_mut());
        out.extend(self.backbone.fnet.params_mut());
        out.extend([
            &mut self.coarse_head.weight,
            &mut self.coarse_head.bias,
            &mut self.fine_head.weight,
            &mut self.fine_head.bias,
        ]);
        out
    }

    /// Number of leading entries of `params_mut()` that belong to the trunks.
    pub fn num_trunk_params(&self) -> usize {
        2 * (self.backbone.cnet.blocks.len() + self.backbone.fnet.blocks.len())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::zero_grad);
    }

    pub fn flat_values(&self) -> Tensor {
        Tensor::from_vec(self.named_params().iter().flat_map(|(_, p)| p.value.data().to_vec()).collect())
    }

    pub fn flat_grads(&self) -> Tensor {
        Tensor::from_vec(self.named_params().iter().flat_map(|(_, p)| p.grad.data().to_vec()).collect())
    }

    pub fn set_flat_values(&mut self, flat: &Tensor) -> Result<()> {
        let total: usize = self.named_params().iter().map(|(_, p)| p.value.numel()).sum();
        if flat.numel() != total {
            return Err(Error::shape(format!("{} flat values for {total} parameters", flat.numel())));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&flat.data()[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> SbpNetwork {
        SbpNetwork::init(TrunkConfig::default(), 4, 12, &mut Rng::new(0)).unwrap()
    }

    #[test]
    fn logits_shapes_and_head_widths() {
        let n = net();
        assert_eq!(n.coarse_head.width(), 64);
        assert_eq!(n.fine_head.width(), 256);
        let out = n.forward_train(&Tensor::randn(&[1, 16, 16], 1.0, &mut Rng::new(1))).unwrap();
        assert_eq!(out.z_coarse.shape(), &[4]);
        assert_eq!(out.z_fine.shape(), &[12]);
    }

    #[test]
    fn zero_weight_network_returns_biases() {
        let mut n = net();
        for p in n.params_mut() {
            p.value.fill(0.0);
        }
        n.coarse_head.bias.value = Tensor::from_vec(vec![1., 2., 3., 4.]);
        n.fine_head.bias.value = Tensor::full(&[12], -0.5);
        let out = n.forward_train(&Tensor::randn(&[1, 16, 16], 1.0, &mut Rng::new(1))).unwrap();
        assert_eq!(out.z_coarse.data(), &[1., 2., 3., 4.]);
        assert!(out.z_fine.data().iter().all(|&v| v == -0.5));
    }

    #[test]
    fn infer_equals_train_fine_logits_bitwise() {
        let n = net();
        for seed in 0..5 {
            let x = Tensor::randn(&[1, 16, 16], 1.0, &mut Rng::new(seed));
            let train = n.forward_train(&x).unwrap();
            let infer = n.forward_infer(&x).unwrap();
            let a: Vec<u64> = train.z_fine.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = infer.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn inference_never_reads_coarse_head() {
        let mut n = net();
        let x = Tensor::randn(&[1, 16, 16], 1.0, &mut Rng::new(3));
        let before = n.forward_infer(&x).unwrap();
        n.coarse_head.weight.value.fill(f64::NAN);
        n.coarse_head.bias.value.fill(f64::NAN);
        assert_eq!(n.forward_infer(&x).unwrap(), before);
        assert!(!n.forward_train(&x).unwrap().z_coarse.is_finite());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut n = net();
        let x = Tensor::randn(&[1, 16, 16], 1.0, &mut Rng::new(3));
        let out = n.forward_train(&x).unwrap();
        n.backward(&out.cache, Some(&Tensor::zeros(&[4])), &Tensor::zeros(&[12]), BackwardScope::Full)
            .unwrap();
        assert!(n.flat_grads().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn coarse_gradient_never_reaches_fine_trunk() {
        let mut n = net();
        let x = Tensor::randn(&[1, 16, 16], 1.0, &mut Rng::new(5));
        let out = n.forward_train(&x).unwrap();
        let dz_c = Tensor::randn(&[4], 1.0, &mut Rng::new(6));
        n.backward(&out.cache, Some(&dz_c), &Tensor::zeros(&[12]), BackwardScope::Full).unwrap();
        assert!(n.backbone.fnet.params().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
        assert!(n.fine_head.weight.grad.data().iter().all(|&g| g == 0.0));
        assert!(n.backbone.cnet.params().any(|p| p.grad.data().iter().any(|&g| g != 0.0)));
    }

    #[test]
    fn detached_coarse_matches_zero_coarse_upstream() {
        let x = Tensor::randn(&[1, 16, 16], 1.0, &mut Rng::new(5));
        let dz_f = Tensor::randn(&[12], 1.0, &mut Rng::new(7));
        let mut a = net();
        let out = a.forward_train(&x).unwrap();
        a.backward(&out.cache, Some(&Tensor::zeros(&[4])), &dz_f, BackwardScope::Full).unwrap();
        let mut b = net();
        b.backward(&out.cache, None, &dz_f, BackwardScope::Full).unwrap();
        assert_eq!(a.flat_grads(), b.flat_grads());
    }

    #[test]
    fn heads_only_scope_leaves_trunks_untouched() {
        let mut n = net();
        let x = Tensor::randn(&[1, 16, 16], 1.0, &mut Rng::new(5));
        let out = n.forward_train(&x).unwrap();
        let dz_c = Tensor::full(&[4], 0.3);
        let dz_f = Tensor::full(&[12], -0.2);
        n.backward(&out.cache, Some(&dz_c), &dz_f, BackwardScope::HeadsOnly).unwrap();
        let trunk = n.num_trunk_params();
        assert!(n.params_mut()[..trunk].iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
        assert!(n.fine_head.bias.grad.data().iter().all(|&g| g == -0.2));
    }

    #[test]
    fn flat_values_round_trip() {
        let mut n = net();
        let v = n.flat_values();
        let doubled = v.scale(2.0);
        n.set_flat_values(&doubled).unwrap();
        assert_eq!(n.flat_values(), doubled);
        assert!(n.set_flat_values(&Tensor::zeros(&[3])).is_err());
    }
}
