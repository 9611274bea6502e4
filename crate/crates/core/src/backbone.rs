//! Convolutional trunks. The coarse trunk maps the input to the coarse
//! feature map; the fine trunk continues from the coarse feature map, so the
//! fine path is the composition fine∘coarse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Parameter, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrunkConfig {
    /// (channels, height, width) of the network input.
    pub input: [usize; 3],
    /// Output widths of the coarse trunk blocks (conv3x3, ReLU, maxpool2x2).
    pub cnet_blocks: Vec<usize>,
    pub fnet_blocks: Vec<usize>,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self {
            input: [1, 16, 16],
            cnet_blocks: vec![8],
            fnet_blocks: vec![16],
        }
    }
}

impl TrunkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let [d, h, w] = self.input;
        if d == 0 || h == 0 || w == 0 {
            return bad(format!("input extents must be positive, got {:?}", self.input));
        }
        if self.cnet_blocks.is_empty() || self.fnet_blocks.is_empty() {
            return bad("each trunk needs at least one block".into());
        }
        if self.cnet_blocks.iter().chain(&self.fnet_blocks).any(|&c| c == 0) {
            return bad("block widths must be at least 1".into());
        }
        let factor = 1usize << self.pool_depth();
        if h % factor != 0 || w % factor != 0 {
            return bad(format!(
                "input {h}x{w} is not divisible by 2^{} pooling",
                self.pool_depth()
            ));
        }
        Ok(())
    }

    pub fn pool_depth(&self) -> usize {
        self.cnet_blocks.len() + self.fnet_blocks.len()
    }

    pub fn coarse_shape(&self) -> [usize; 3] {
        let f = 1 << self.cnet_blocks.len();
        [*self.cnet_blocks.last().unwrap(), self.input[1] / f, self.input[2] / f]
    }

    pub fn fine_shape(&self) -> [usize; 3] {
        let f = 1 << self.pool_depth();
        [*self.fnet_blocks.last().unwrap(), self.input[1] / f, self.input[2] / f]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Coarse,
    Fine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub branch: Branch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl ConvBlock {
    fn init(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Parameter::init_uniform(&[d_out, d_in, 3, 3], d_in * 9, rng),
            bias: Parameter::zeros(&[d_out]),
        }
    }
}

#[derive(Clone, Debug)]
struct BlockCache {
    input: Tensor,
    preact: Tensor,
    argmax: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TrunkCache {
    blocks: Vec<BlockCache>,
}

impl TrunkCache {
    /// Distance to the nearest ReLU or max-pool switching point.
    pub fn kink_distance(&self) -> f64 {
        let mut dist = f64::INFINITY;
        for b in &self.blocks {
            for &v in b.preact.data() {
                dist = dist.min(v.abs());
            }
            // Ties among non-positive values sit behind a dead ReLU and
            // carry no gradient.
            let (d, h, w) = b.preact.dims3().expect("cached preact is 3-d");
            let pre = b.preact.data();
            for c in 0..d {
                for y in (0..h).step_by(2) {
                    for x in (0..w).step_by(2) {
                        let base = c * h * w + y * w + x;
                        let mut v = [pre[base], pre[base + 1], pre[base + w], pre[base + w + 1]].map(|v| v.max(0.0));
                        v.sort_by(|a, b| b.total_cmp(a));
                        if v[0] > 0.0 {
                            dist = dist.min(v[0] - v[1]);
                        }
                    }
                }
            }
        }
        dist
    }
}

/// A stack of conv3x3 → ReLU → maxpool2x2 blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    pub blocks: Vec<ConvBlock>,
}

impl Trunk {
    pub fn init(d_in: usize, widths: &[usize], rng: &mut Rng) -> Self {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut prev = d_in;
        for &w in widths {
            blocks.push(ConvBlock::init(prev, w, rng));
            prev = w;
        }
        Self { blocks }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            let pre = ops::conv2d_forward(&h, &b.weight.value, &b.bias.value)?;
            h = ops::maxpool2x2_forward(&ops::relu_forward(&pre))?.0;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, TrunkCache)> {
        let mut h = x.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let preact = ops::conv2d_forward(&h, &b.weight.value, &b.bias.value)?;
            let (pooled, argmax) = ops::maxpool2x2_forward(&ops::relu_forward(&preact))?;
            blocks.push(BlockCache {
                input: std::mem::replace(&mut h, pooled),
                preact,
                argmax,
            });
        }
        Ok((h, TrunkCache { blocks }))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &TrunkCache, grad_out: &Tensor) -> Result<Tensor> {
        if cache.blocks.len() != self.blocks.len() {
            return Err(Error::shape("trunk cache does not match trunk depth"));
        }
        let mut g = grad_out.clone();
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            let d_relu = ops::maxpool2x2_backward(c.preact.shape(), &c.argmax, &g)?;
            let d_pre = ops::relu_backward(&c.preact, &d_relu)?;
            let grads = ops::conv2d_backward(&c.input, &block.weight.value, &d_pre)?;
            block.weight.accumulate(&grads.weights)?;
            block.bias.accumulate(&grads.bias)?;
            g = grads.input;
        }
        Ok(g)
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.blocks.iter().flat_map(|b| [&b.weight, &b.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.blocks.iter_mut().flat_map(|b| [&mut b.weight, &mut b.bias])
    }
}

/// Coarse trunk f and fine trunk g.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: TrunkConfig,
    pub cnet: Trunk,
    pub fnet: Trunk,
}

impl Backbone {
    pub fn init(config: TrunkConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let cnet = Trunk::init(config.input[0], &config.cnet_blocks, rng);
        let fnet = Trunk::init(*config.cnet_blocks.last().unwrap(), &config.fnet_blocks, rng);
        Ok(Self { config, cnet, fnet })
    }

    pub fn cnet_forward(&self, x: &Tensor) -> Result<FeatureMap> {
        x.expect_shape(&self.config.input, "network input")?;
        Ok(FeatureMap {
            tensor: self.cnet.forward(x)?,
            branch: Branch::Coarse,
        })
    }

    pub fn fnet_forward(&self, coarse: &FeatureMap) -> Result<FeatureMap> {
        if coarse.branch != Branch::Coarse {
            return Err(Error::shape("fine trunk expects a coarse feature map"));
        }
        coarse.tensor.expect_shape(&self.config.coarse_shape(), "coarse feature map")?;
        Ok(FeatureMap {
            tensor: self.fnet.forward(&coarse.tensor)?,
            branch: Branch::Fine,
        })
    }
}
