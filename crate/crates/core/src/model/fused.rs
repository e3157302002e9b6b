//! Fused kernels for the two elementwise-heavy layers of the residual
//! blocks. Composed from primitive tensor ops, each would allocate and
//! traverse full activations several times per pass.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, Layout, Result, Shape, Tensor};

fn contiguous_slice<'a>(s: &'a CpuStorage, l: &Layout, what: &str) -> Result<&'a [f32]> {
    let data = s.as_slice::<f32>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("{what} must be contiguous"),
    }
}

fn to_vec(t: &Tensor) -> Result<Vec<f32>> {
    t.flatten_all()?.to_vec1::<f32>()
}

struct GroupNormOp {
    groups: usize,
    eps: f32,
}

impl GroupNormOp {
    /// Per-(batch, group) mean and reciprocal standard deviation.
    fn stats(&self, x: &[f32], group_len: usize) -> Vec<(f32, f32)> {
        x.chunks_exact(group_len)
            .map(|g| {
                let n = group_len as f64;
                let mean = g.iter().map(|&v| v as f64).sum::<f64>() / n;
                let var = g.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                (mean as f32, (1.0 / (var + self.eps as f64).sqrt()) as f32)
            })
            .collect()
    }
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "demorph-group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let x = contiguous_slice(s1, l1, "group norm input")?;
        let gamma = contiguous_slice(s2, l2, "group norm weight")?;
        let beta = contiguous_slice(s3, l3, "group norm bias")?;
        let hw = h * w;
        let group_len = c / self.groups * hw;
        let stats = self.stats(x, group_len);
        let mut out = vec![0f32; x.len()];
        for bc in 0..b * c {
            let ch = bc % c;
            let (mean, rstd) = stats[bc * hw / group_len];
            let scale = rstd * gamma[ch];
            let shift = beta[ch] - mean * scale;
            for (o, &v) in out[bc * hw..(bc + 1) * hw].iter_mut().zip(&x[bc * hw..(bc + 1) * hw]) {
                *o = v * scale + shift;
            }
        }
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x_t: &Tensor,
        gamma_t: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x_t.dims4()?;
        let x = to_vec(x_t)?;
        let gamma = to_vec(gamma_t)?;
        let dy = to_vec(grad)?;
        let hw = h * w;
        let cpg = c / self.groups;
        let group_len = cpg * hw;
        let stats = self.stats(&x, group_len);
        let mut dx = vec![0f32; x.len()];
        let mut dgamma = vec![0f64; c];
        let mut dbeta = vec![0f64; c];
        for (gi, &(mean, rstd)) in stats.iter().enumerate() {
            let base = gi * group_len;
            let first_ch = (gi % self.groups) * cpg;
            // Mean of dxhat and of dxhat * xhat over the group.
            let (mut m1, mut m2) = (0f64, 0f64);
            for j in 0..group_len {
                let ch = first_ch + j / hw;
                let xhat = (x[base + j] - mean) * rstd;
                let g = dy[base + j];
                dgamma[ch] += (g * xhat) as f64;
                dbeta[ch] += g as f64;
                let dxhat = (g * gamma[ch]) as f64;
                m1 += dxhat;
                m2 += dxhat * xhat as f64;
            }
            let (m1, m2) = ((m1 / group_len as f64) as f32, (m2 / group_len as f64) as f32);
            for j in 0..group_len {
                let ch = first_ch + j / hw;
                let xhat = (x[base + j] - mean) * rstd;
                dx[base + j] = rstd * (dy[base + j] * gamma[ch] - m1 - xhat * m2);
            }
        }
        let dev = x_t.device();
        let to_f32 = |v: Vec<f64>| v.into_iter().map(|a| a as f32).collect::<Vec<_>>();
        Ok((
            Some(Tensor::from_vec(dx, (b, c, h, w), dev)?),
            Some(Tensor::from_vec(to_f32(dgamma), c, dev)?),
            Some(Tensor::from_vec(to_f32(dbeta), c, dev)?),
        ))
    }
}

/// Group normalization of `(B, C, H, W)` with per-channel affine `gamma`, `beta`.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f32) -> Result<Tensor> {
    let c = x.dim(1)?;
    if groups == 0 || c % groups != 0 {
        candle_core::bail!("{groups} groups do not divide {c} channels");
    }
    x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, GroupNormOp { groups, eps })
}

struct SiluOp;

fn logistic(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

impl CustomOp1 for SiluOp {
    fn name(&self) -> &'static str {
        "demorph-silu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let x = contiguous_slice(s, l, "silu input")?;
        Ok((CpuStorage::F32(x.iter().map(|&v| v * logistic(v)).collect()), l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let xs = to_vec(x)?;
        let dy = to_vec(grad)?;
        let dx: Vec<f32> = xs
            .iter()
            .zip(&dy)
            .map(|(&v, &g)| {
                let s = logistic(v);
                g * s * (1.0 + v * (1.0 - s))
            })
            .collect();
        Ok(Some(Tensor::from_vec(dx, x.shape(), x.device())?))
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(SiluOp)
}
