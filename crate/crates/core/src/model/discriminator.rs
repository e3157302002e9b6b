//! Triplet-conditioned patch discriminator: stride-2 conv, instance norm
//! and leaky ReLU per block, then a 3x3 conv to one score per patch.

use candle_core::Tensor;

use crate::data::image::FaceImage;
use crate::error::{validation, Result};
use crate::model::config::{DiscriminatorConfig, DiscriminatorOutput};
use crate::model::generator::images_to_tensor;
use crate::model::layers::{leaky_relu, sigmoid, Conv2d, GroupNorm, ParamStore};
use crate::scalar::Scalar;

pub const TRIPLET_CHANNELS: usize = 9;

struct Block {
    conv: Conv2d,
    norm: GroupNorm,
}

pub struct Discriminator {
    cfg: DiscriminatorConfig,
    resolution: usize,
    params: ParamStore,
    blocks: Vec<Block>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(cfg: &DiscriminatorConfig, resolution: usize, seed: u64) -> Result<Self> {
        cfg.validate(resolution)?;
        let mut ps = ParamStore::new(seed);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        let mut prev = TRIPLET_CHANNELS;
        for i in 0..cfg.blocks {
            let c = cfg.channels(i);
            // No conv bias: instance norm would cancel it.
            blocks.push(Block {
                conv: Conv2d::new(&mut ps, &format!("block.{i}.conv"), prev, c, 4, 2, 1, false)?,
                norm: GroupNorm::new(&mut ps, &format!("block.{i}.norm"), c, c)?,
            });
            prev = c;
        }
        let head = Conv2d::new(&mut ps, "head", prev, 1, 3, 1, 1, true)?;
        Ok(Self { cfg: cfg.clone(), resolution, params: ps, blocks, head })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Per-patch logits for a `(B, 9, R, R)` triplet batch.
    pub fn patch_logits(&self, triplet: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = triplet.dims4()?;
        if c != TRIPLET_CHANNELS || h != self.resolution || w != self.resolution {
            return Err(validation(format!(
                "discriminator expects (B, 9, {r}, {r}), got {:?}",
                triplet.dims(),
                r = self.resolution
            )));
        }
        let mut x = triplet.clone();
        for b in &self.blocks {
            x = leaky_relu(&b.norm.forward(&b.conv.forward(&x)?)?, self.cfg.leaky_slope)?;
        }
        Ok(self.head.forward(&x)?)
    }

    /// Per-patch real/synthetic probabilities.
    pub fn patch_scores(&self, triplet: &Tensor) -> Result<Tensor> {
        Ok(sigmoid(&self.patch_logits(triplet)?)?)
    }

    /// Scalar score for one `(conditioning, a, b)` triplet, averaged over
    /// patches: a probability, or a mean logit when so configured.
    pub fn discriminate<T: Scalar>(&self, cond: &FaceImage<T>, a: &FaceImage<T>, b: &FaceImage<T>) -> Result<f64> {
        if !(cond.same_shape(a) && cond.same_shape(b)) || cond.size() != self.resolution {
            return Err(validation(format!(
                "triplet images must all be {r}x{r}",
                r = self.resolution
            )));
        }
        let t = Tensor::cat(&[images_to_tensor(&[cond])?, images_to_tensor(&[a])?, images_to_tensor(&[b])?], 1)?;
        let per_patch = match self.cfg.output {
            DiscriminatorOutput::Sigmoid => self.patch_scores(&t)?,
            DiscriminatorOutput::Logit => self.patch_logits(&t)?,
        };
        Ok(per_patch.mean_all()?.to_scalar::<f32>()? as f64)
    }
}
