//! Conditional UNet generator.
//!
//! The morph enters in pixel space through `conv_in`; its encoder context
//! enters through cross-attention in the attention-bearing stages. There is
//! no timestep input. Dropout inside every residual block is the only noise
//! source and stays active at inference, driven by an explicit seed.

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::image::FaceImage;
use crate::error::{validation, Result};
use crate::model::config::{GeneratorConfig, Mode};
use crate::model::encoder::MorphEmbedding;
use crate::model::fused::silu;
use crate::model::layers::{default_groups, dropout, sigmoid, softmax_last, Conv2d, GroupNorm, LayerNorm, Linear, ParamStore};
use crate::scalar::Scalar;

const HEAD_DIM: usize = 32;

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize) -> candle_core::Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), cin, default_groups(cin))?,
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, 1, true)?,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), cout, default_groups(cout))?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, 1, true)?,
            skip: if cin != cout { Some(Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, 0, true)?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor, p: f32, rng: &mut ChaCha8Rng) -> candle_core::Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let h = dropout(&silu(&self.norm2.forward(&h)?)?, p, rng)?;
        let h = self.conv2.forward(&h)?;
        let residual = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        residual + h
    }
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new(ps: &mut ParamStore, name: &str, dim: usize, kv_dim: usize) -> candle_core::Result<Self> {
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.to_q"), dim, dim, false)?,
            k: Linear::new(ps, &format!("{name}.to_k"), kv_dim, dim, false)?,
            v: Linear::new(ps, &format!("{name}.to_v"), kv_dim, dim, false)?,
            out: Linear::new(ps, &format!("{name}.to_out"), dim, dim, true)?,
            heads: (dim / HEAD_DIM).max(1),
        })
    }

    /// `x` is `(B, T, C)`, `kv` is `(B, S, kv_dim)`.
    fn forward(&self, x: &Tensor, kv: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let s = kv.dim(1)?;
        let d = c / self.heads;
        let split = |y: Tensor, len: usize| -> candle_core::Result<Tensor> {
            y.reshape((b, len, self.heads, d))?.transpose(1, 2)?.contiguous()
        };
        let q = split(self.q.forward(x)?, t)?;
        let k = split(self.k.forward(kv)?, s)?;
        let v = split(self.v.forward(kv)?, s)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (d as f64).sqrt())?;
        let attn = softmax_last(&scores)?.matmul(&v)?;
        let merged = attn.transpose(1, 2)?.contiguous()?.reshape((b, t, c))?;
        self.out.forward(&merged)
    }
}

/// Self-attention, cross-attention on the context, then a feed-forward layer,
/// each pre-normalized and residual, wrapped in 1x1 projections.
struct AttnBlock {
    norm: GroupNorm,
    proj_in: Conv2d,
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    proj_out: Conv2d,
}

impl AttnBlock {
    fn new(ps: &mut ParamStore, name: &str, c: usize, ctx_dim: usize) -> candle_core::Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), c, default_groups(c))?,
            proj_in: Conv2d::new(ps, &format!("{name}.proj_in"), c, c, 1, 1, 0, true)?,
            ln_self: LayerNorm::new(ps, &format!("{name}.ln_self"), c)?,
            self_attn: Attention::new(ps, &format!("{name}.self_attn"), c, c)?,
            ln_cross: LayerNorm::new(ps, &format!("{name}.ln_cross"), c)?,
            cross_attn: Attention::new(ps, &format!("{name}.cross_attn"), c, ctx_dim)?,
            ln_ff: LayerNorm::new(ps, &format!("{name}.ln_ff"), c)?,
            ff_in: Linear::new(ps, &format!("{name}.ff_in"), c, 2 * c, true)?,
            ff_out: Linear::new(ps, &format!("{name}.ff_out"), 2 * c, c, true)?,
            proj_out: Conv2d::new(ps, &format!("{name}.proj_out"), c, c, 1, 1, 0, true)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let y = self.proj_in.forward(&self.norm.forward(x)?)?;
        let tokens = y.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let n = self.ln_self.forward(&tokens)?;
        let tokens = (&tokens + self.self_attn.forward(&n, &n)?)?;
        let tokens = (&tokens + self.cross_attn.forward(&self.ln_cross.forward(&tokens)?, ctx)?)?;
        let ff = self.ff_out.forward(&self.ff_in.forward(&self.ln_ff.forward(&tokens)?)?.gelu()?)?;
        let tokens = (tokens + ff)?;
        let y = tokens.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        x + self.proj_out.forward(&y)?
    }
}

struct DownStage {
    res: ResBlock,
    attn: Option<AttnBlock>,
    downsample: Option<Conv2d>,
}

struct UpStage {
    res: ResBlock,
    attn: Option<AttnBlock>,
    /// 3x3 conv to the next level's width, followed by nearest 2x upsampling.
    upsample: Option<Conv2d>,
}

/// One row of the stage layout, for inspection and tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageInfo {
    pub index: usize,
    pub resolution: usize,
    pub channels: usize,
    pub attention: bool,
}

pub struct Generator {
    cfg: GeneratorConfig,
    params: ParamStore,
    context_pos: Tensor,
    conv_in: Conv2d,
    down: Vec<DownStage>,
    mid: ResBlock,
    up: Vec<UpStage>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Generator output for one morph.
#[derive(Debug, Clone, PartialEq)]
pub enum Demorphed<T> {
    Pair(FaceImage<T>, FaceImage<T>),
    Single(FaceImage<T>),
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(seed);
        let n = cfg.down_blocks;
        let ctx_dim = cfg.cross_dim();
        // Learned per-row offsets so repeated context rows are distinguishable to attention.
        let context_pos = ps.uniform("context_pos", &[cfg.context_len, ctx_dim], 0.02)?;
        let conv_in = Conv2d::new(&mut ps, "conv_in", cfg.mode.input_channels(), cfg.channels(0), 3, 1, 1, true)?;
        let mut down = Vec::with_capacity(n);
        let mut prev = cfg.channels(0);
        for i in 0..n {
            let c = cfg.channels(i);
            let name = format!("down.{i}");
            down.push(DownStage {
                res: ResBlock::new(&mut ps, &format!("{name}.res"), prev, c)?,
                attn: if i == cfg.attn_down_index {
                    Some(AttnBlock::new(&mut ps, &format!("{name}.attn"), c, ctx_dim)?)
                } else {
                    None
                },
                downsample: if i + 1 < n {
                    Some(Conv2d::new(&mut ps, &format!("{name}.downsample"), c, c, 3, 2, 1, true)?)
                } else {
                    None
                },
            });
            prev = c;
        }
        let mid = ResBlock::new(&mut ps, "mid.res", prev, prev)?;
        let mut up = Vec::with_capacity(n);
        for j in 0..n {
            let level = n - 1 - j;
            let c = cfg.channels(level);
            let name = format!("up.{j}");
            up.push(UpStage {
                res: ResBlock::new(&mut ps, &format!("{name}.res"), prev + c, c)?,
                attn: if j == cfg.attn_up_index {
                    Some(AttnBlock::new(&mut ps, &format!("{name}.attn"), c, ctx_dim)?)
                } else {
                    None
                },
                upsample: if level > 0 {
                    Some(Conv2d::new(&mut ps, &format!("{name}.upsample"), c, cfg.channels(level - 1), 3, 1, 1, true)?)
                } else {
                    None
                },
            });
            prev = if level > 0 { cfg.channels(level - 1) } else { c };
        }
        let norm_out = GroupNorm::new(&mut ps, "norm_out", prev, default_groups(prev))?;
        let conv_out = Conv2d::new(&mut ps, "conv_out", prev, cfg.mode.output_channels(), 3, 1, 1, true)?;
        Ok(Self { cfg: cfg.clone(), params: ps, context_pos, conv_in, down, mid, up, norm_out, conv_out })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn down_stages(&self) -> Vec<StageInfo> {
        (0..self.down.len())
            .map(|i| StageInfo {
                index: i,
                resolution: self.cfg.resolution >> i,
                channels: self.cfg.channels(i),
                attention: self.down[i].attn.is_some(),
            })
            .collect()
    }

    pub fn up_stages(&self) -> Vec<StageInfo> {
        let n = self.up.len();
        (0..n)
            .map(|j| StageInfo {
                index: j,
                resolution: self.cfg.resolution >> (n - 1 - j),
                channels: self.cfg.channels(n - 1 - j),
                attention: self.up[j].attn.is_some(),
            })
            .collect()
    }

    /// Raw forward pass. `input` is `(B, in_channels, R, R)`, `context` is
    /// `(B, context_len, cross_dim)`; returns `(B, out_channels, R, R)` in `(0, 1)`.
    pub fn forward(&self, input: &Tensor, context: &Tensor, dropout_seed: u64) -> Result<Tensor> {
        let (_, cin, h, w) = input.dims4()?;
        if cin != self.cfg.mode.input_channels() || h != self.cfg.resolution || w != self.cfg.resolution {
            return Err(validation(format!(
                "generator expects (B, {}, {r}, {r}), got {:?}",
                self.cfg.mode.input_channels(),
                input.dims(),
                r = self.cfg.resolution
            )));
        }
        let (_, l, d) = context.dims3()?;
        if l != self.cfg.context_len || d != self.cfg.cross_dim() {
            return Err(validation(format!(
                "context must be ({}, {}), got ({l}, {d})",
                self.cfg.context_len,
                self.cfg.cross_dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let p = self.cfg.dropout as f32;
        let ctx = context.broadcast_add(&self.context_pos)?;
        let mut h = self.conv_in.forward(input)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for stage in &self.down {
            h = stage.res.forward(&h, p, &mut rng)?;
            if let Some(a) = &stage.attn {
                h = a.forward(&h, &ctx)?;
            }
            skips.push(h.clone());
            if let Some(ds) = &stage.downsample {
                h = ds.forward(&h)?;
            }
        }
        h = self.mid.forward(&h, p, &mut rng)?;
        for stage in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = stage.res.forward(&Tensor::cat(&[&h, &skip], 1)?, p, &mut rng)?;
            if let Some(a) = &stage.attn {
                h = a.forward(&h, &ctx)?;
            }
            if let Some(us) = &stage.upsample {
                let y = us.forward(&h)?;
                let (_, _, hh, ww) = y.dims4()?;
                h = y.upsample_nearest2d(hh * 2, ww * 2)?;
            }
        }
        let out = self.conv_out.forward(&silu(&self.norm_out.forward(&h)?)?)?;
        Ok(sigmoid(&out)?)
    }

    /// Demorphs one image. `reference` must be given exactly in differential mode.
    pub fn generate<T: Scalar>(
        &self,
        morph: &FaceImage<T>,
        context: &MorphEmbedding,
        reference: Option<&FaceImage<T>>,
        dropout_seed: u64,
    ) -> Result<Demorphed<T>> {
        let input = match (self.cfg.mode, reference) {
            (Mode::ReferenceFree, None) => images_to_tensor(&[morph])?,
            (Mode::Differential, Some(r)) => {
                if !r.same_shape(morph) {
                    return Err(validation("reference and morph sizes differ"));
                }
                Tensor::cat(&[images_to_tensor(&[morph])?, images_to_tensor(&[r])?], 1)?
            }
            (m, r) => {
                return Err(validation(format!(
                    "{} mode {} a reference image",
                    m.as_str(),
                    if r.is_some() { "does not take" } else { "requires" }
                )))
            }
        };
        let ctx = MorphEmbedding::batch_tensor(&[context])?;
        let out = self.forward(&input, &ctx, dropout_seed)?;
        let base = &morph.image_id;
        Ok(match self.cfg.mode {
            Mode::ReferenceFree => Demorphed::Pair(
                tensor_to_image(&out.narrow(1, 0, 3)?, &format!("{base}:out1"), &format!("{base}_out1"))?,
                tensor_to_image(&out.narrow(1, 3, 3)?, &format!("{base}:out2"), &format!("{base}_out2"))?,
            ),
            Mode::Differential => Demorphed::Single(tensor_to_image(&out, &format!("{base}:out"), &format!("{base}_out"))?),
        })
    }
}

/// Stacks images into a `(B, 3, R, R)` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&FaceImage<T>]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| validation("empty image batch"))?;
    let size = first.size();
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        if img.size() != size {
            return Err(validation("image sizes differ within a batch"));
        }
        data.extend(img.to_chw_f32());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, size, size), &Device::Cpu)?)
}

/// Converts a `(1, 3, R, R)` tensor back to an image.
pub fn tensor_to_image<T: Scalar>(t: &Tensor, identity_id: &str, image_id: &str) -> Result<FaceImage<T>> {
    let (_, _, r, _) = t.dims4()?;
    let chw = t.flatten_all()?.to_vec1::<f32>()?;
    FaceImage::from_chw_f32(r, &chw, identity_id, image_id)
}
