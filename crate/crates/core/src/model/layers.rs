//! Parameter storage and the handful of layers the networks are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::conv::{conv2d, conv2d_bias};
use crate::model::fused::group_norm;

/// Named trainable tensors, created with a seeded initializer so that
/// construction is reproducible.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { vars: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed), device: Device::Cpu }
    }

    fn insert(&mut self, name: String, t: Tensor) -> candle_core::Result<Tensor> {
        if self.vars.contains_key(&name) {
            candle_core::bail!("parameter {name} defined twice");
        }
        let v = Var::from_tensor(&t)?;
        let out = v.as_tensor().clone();
        self.vars.insert(name, v);
        Ok(out)
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f32) -> candle_core::Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name.into(), t)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> candle_core::Result<Tensor> {
        let t = Tensor::full(value, shape, &self.device)?;
        self.insert(name.into(), t)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Flat copies of every parameter, in name order.
    pub fn snapshot(&self) -> candle_core::Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), (v.dims().to_vec(), v.flatten_all()?.to_vec1::<f32>()?))))
            .collect()
    }

    /// Overwrites parameters from a snapshot; names and shapes must match exactly.
    pub fn restore(&self, snap: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> candle_core::Result<()> {
        if snap.len() != self.vars.len() {
            candle_core::bail!("snapshot has {} tensors, model has {}", snap.len(), self.vars.len());
        }
        for (name, var) in &self.vars {
            let Some((dims, data)) = snap.get(name) else {
                candle_core::bail!("snapshot lacks parameter {name}");
            };
            if dims.as_slice() != var.dims() {
                candle_core::bail!("parameter {name}: shape {dims:?} vs {:?}", var.dims());
            }
            var.set(&Tensor::from_slice(data, dims.as_slice(), &self.device)?)?;
        }
        Ok(())
    }
}

pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// PyTorch-style uniform init with bound `1/sqrt(fan_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> candle_core::Result<Self> {
        let bound = 1.0 / ((cin * k * k) as f32).sqrt();
        let weight = ps.uniform(format!("{name}.weight"), &[cout, cin, k, k], bound)?;
        let bias = if bias { Some(ps.uniform(format!("{name}.bias"), &[cout], bound)?) } else { None };
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        match &self.bias {
            Some(b) => conv2d_bias(x, &self.weight, b, self.stride, self.padding),
            None => conv2d(x, &self.weight, self.stride, self.padding),
        }
    }
}

pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool) -> candle_core::Result<Self> {
        let bound = 1.0 / (din as f32).sqrt();
        let weight = ps.uniform(format!("{name}.weight"), &[dout, din], bound)?;
        let bias = if bias { Some(ps.uniform(format!("{name}.bias"), &[dout], bound)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }
}

/// Group normalization over `(B, C, H, W)`; `groups == C` gives instance norm.
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f32,
}

/// Largest group count `<= 8` that divides `channels`.
pub fn default_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> candle_core::Result<Self> {
        if groups == 0 || channels % groups != 0 {
            candle_core::bail!("{groups} groups do not divide {channels} channels");
        }
        Ok(Self {
            weight: ps.constant(format!("{name}.weight"), &[channels], 1.0)?,
            bias: ps.constant(format!("{name}.bias"), &[channels], 0.0)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        group_norm(x, &self.weight, &self.bias, self.groups, self.eps)
    }
}

/// Layer normalization over the last dimension.
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> candle_core::Result<Self> {
        Ok(Self {
            weight: ps.constant(format!("{name}.weight"), &[dim], 1.0)?,
            bias: ps.constant(format!("{name}.bias"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    x.maximum(&(x * slope)?)
}

/// Inverted dropout with an explicit random source; `p == 0` is the identity.
pub fn dropout(x: &Tensor, p: f32, rng: &mut ChaCha8Rng) -> candle_core::Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mask: Vec<f32> =
        (0..x.elem_count()).map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(DType::F32)?;
    x.mul(&mask)
}
