//! 2-D convolution as a candle custom op: im2col into a contiguous buffer,
//! one sgemm per batch item, and a matching pair of backward kernels.
//! Runs single-threaded and is bit-reproducible.

use candle_core::{CpuStorage, CustomOp2, CustomOp3, Layout, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.padding - self.k) / self.stride + 1,
            (self.w + 2 * self.padding - self.k) / self.stride + 1,
        )
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn contiguous_slice<'a>(s: &'a CpuStorage, l: &Layout, what: &str) -> Result<&'a [f32]> {
    let data = s.as_slice::<f32>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("conv2d: {what} must be contiguous"),
    }
}

/// Output columns `ox` whose input column `ox*stride + kx - padding` lies in `0..w`.
fn valid_range(g: &Geometry, kx: usize, wo: usize) -> (usize, usize) {
    let lo = if kx >= g.padding { 0 } else { (g.padding - kx).div_ceil(g.stride) };
    let hi = if g.w + g.padding > kx { ((g.w + g.padding - kx - 1) / g.stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Fills `cols` (rows = cin*k*k, cols = ho*wo) from one image `x` (cin, h, w).
fn im2col(g: &Geometry, x: &[f32], cols: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * n..][..n];
                let (lo, hi) = valid_range(g, kx, wo);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let start = lo * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (d, s) in dst[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into image gradient `dx` (cin, h, w).
fn col2im(g: &Geometry, cols: &[f32], dx: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((ci * g.k + ky) * g.k + kx) * n..][..n];
                let (lo, hi) = valid_range(g, kx, wo);
                if lo >= hi {
                    continue;
                }
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &row[oy * wo + lo..oy * wo + hi];
                    let start = lo * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        for (d, v) in dst[start..start + hi - lo].iter_mut().zip(src) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in dst[start..].iter_mut().step_by(g.stride).zip(src) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Pixel-major patches for one image: row `p` holds the `(ky, kx, ci)`
/// receptive field of output pixel `p`, channels innermost. `xt` is scratch
/// for the channels-last copy of `x`.
fn im2row(g: &Geometry, x: &[f32], xt: &mut [f32], rows_out: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let hw = g.h * g.w;
    for ci in 0..g.cin {
        for (p, &v) in x[ci * hw..(ci + 1) * hw].iter().enumerate() {
            xt[p * g.cin + ci] = v;
        }
    }
    let r = g.col_rows();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut rows_out[(oy * wo + ox) * r..][..r];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    let dst = &mut row[(ky * g.k + kx) * g.cin..][..g.cin];
                    if iy < 0 || iy >= g.h as isize || ix < 0 || ix >= g.w as isize {
                        dst.fill(0.0);
                    } else {
                        let at = (iy as usize * g.w + ix as usize) * g.cin;
                        dst.copy_from_slice(&xt[at..at + g.cin]);
                    }
                }
            }
        }
    }
}

/// 1x1, stride 1, unpadded: the image itself is the column matrix.
fn is_pointwise(g: &Geometry) -> bool {
    g.k == 1 && g.stride == 1 && g.padding == 0
}

/// `c (m x n) = beta * c + a (m x k) * b (k x n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    // SAFETY: callers pass buffers whose extents cover every strided index.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

struct Conv2dForward {
    stride: usize,
    padding: usize,
}

struct Conv2dGradInput {
    geometry: Geometry,
}

struct Conv2dGradWeight {
    geometry: Geometry,
}

fn geometry(x: &Layout, w: &Layout, stride: usize, padding: usize) -> Result<Geometry> {
    let (batch, cin, h, wd) = x.shape().dims4()?;
    let (cout, wcin, k, k2) = w.shape().dims4()?;
    if wcin != cin || k != k2 {
        candle_core::bail!("conv2d: weight {:?} incompatible with input {:?}", w.shape(), x.shape());
    }
    if h + 2 * padding < k || wd + 2 * padding < k {
        candle_core::bail!("conv2d: kernel {k} larger than padded input {h}x{wd}");
    }
    Ok(Geometry { batch, cin, h, w: wd, cout, k, stride, padding })
}

fn forward_impl(g: &Geometry, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> (CpuStorage, Shape) {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let rows = g.col_rows();
    let mut cols = vec![0f32; if is_pointwise(g) { 0 } else { rows * n }];
    let mut out = vec![0f32; g.batch * g.cout * n];
    for b in 0..g.batch {
        let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let src = if is_pointwise(g) {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        let ob = &mut out[b * g.cout * n..(b + 1) * g.cout * n];
        let beta = match bias {
            Some(bias) => {
                for (plane, &v) in ob.chunks_exact_mut(n).zip(bias) {
                    plane.fill(v);
                }
                1.0
            }
            None => 0.0,
        };
        gemm(g.cout, rows, n, w, (rows as isize, 1), src, (n as isize, 1), beta, ob);
    }
    (CpuStorage::F32(out), Shape::from((g.batch, g.cout, ho, wo)))
}

fn input_and_weight_grads(x: &Tensor, w: &Tensor, grad: &Tensor, stride: usize, padding: usize) -> Result<(Tensor, Tensor)> {
    let g = geometry(x.layout(), w.layout(), stride, padding)?;
    let dx = grad.apply_op2_no_bwd(w, &Conv2dGradInput { geometry: g })?;
    let dw = x.apply_op2_no_bwd(grad, &Conv2dGradWeight { geometry: g })?;
    Ok((dx, dw))
}

impl CustomOp2 for Conv2dForward {
    fn name(&self) -> &'static str {
        "demorph-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = geometry(l1, l2, self.stride, self.padding)?;
        let x = contiguous_slice(s1, l1, "input")?;
        let w = contiguous_slice(s2, l2, "weight")?;
        Ok(forward_impl(&g, x, w, None))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let (dx, dw) = input_and_weight_grads(x, w, &grad.contiguous()?, self.stride, self.padding)?;
        Ok((Some(dx), Some(dw)))
    }
}

impl CustomOp3 for Conv2dForward {
    fn name(&self) -> &'static str {
        "demorph-conv2d-bias"
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
        let g = geometry(l1, l2, self.stride, self.padding)?;
        let x = contiguous_slice(s1, l1, "input")?;
        let w = contiguous_slice(s2, l2, "weight")?;
        let bias = contiguous_slice(s3, l3, "bias")?;
        if bias.len() != g.cout {
            candle_core::bail!("conv2d: bias has {} entries for {} output channels", bias.len(), g.cout);
        }
        Ok(forward_impl(&g, x, w, Some(bias)))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (dx, dw) = input_and_weight_grads(x, w, &grad, self.stride, self.padding)?;
        let (b, c, h, wd) = grad.dims4()?;
        let dy = grad.flatten_all()?.to_vec1::<f32>()?;
        let mut db = vec![0f64; c];
        for (i, plane) in dy.chunks_exact(h * wd).enumerate() {
            db[i % c] += plane.iter().map(|&v| v as f64).sum::<f64>();
        }
        debug_assert_eq!(dy.len(), b * c * h * wd);
        let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
        Ok((Some(dx), Some(dw), Some(Tensor::from_vec(db, c, bias.device())?)))
    }
}

impl CustomOp2 for Conv2dGradInput {
    fn name(&self) -> &'static str {
        "demorph-conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.geometry;
        let dy = contiguous_slice(s1, l1, "output gradient")?;
        let w = contiguous_slice(s2, l2, "weight")?;
        let (ho, wo) = g.out_hw();
        let n = ho * wo;
        let rows = g.col_rows();
        let plane = g.cin * g.h * g.w;
        let mut cols = vec![0f32; if is_pointwise(&g) { 0 } else { rows * n }];
        let mut dx = vec![0f32; g.batch * plane];
        for b in 0..g.batch {
            // dcols (rows x n) = w^T (rows x cout) * dy_b (cout x n)
            let dyb = &dy[b * g.cout * n..];
            if is_pointwise(&g) {
                gemm(rows, g.cout, n, w, (1, rows as isize), dyb, (n as isize, 1), 0.0, &mut dx[b * plane..(b + 1) * plane]);
            } else {
                gemm(rows, g.cout, n, w, (1, rows as isize), dyb, (n as isize, 1), 0.0, &mut cols);
                col2im(&g, &cols, &mut dx[b * plane..(b + 1) * plane]);
            }
        }
        Ok((CpuStorage::F32(dx), Shape::from((g.batch, g.cin, g.h, g.w))))
    }
}

impl CustomOp2 for Conv2dGradWeight {
    fn name(&self) -> &'static str {
        "demorph-conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.geometry;
        let x = contiguous_slice(s1, l1, "input")?;
        let dy = contiguous_slice(s2, l2, "output gradient")?;
        let (ho, wo) = g.out_hw();
        let n = ho * wo;
        let rows = g.col_rows();
        let mut dw = vec![0f32; g.cout * rows];
        if is_pointwise(&g) {
            for b in 0..g.batch {
                let xb = &x[b * g.cin * n..(b + 1) * g.cin * n];
                // dw (cout x cin) += dy_b (cout x n) * x_b^T (n x cin)
                let beta = if b == 0 { 0.0 } else { 1.0 };
                gemm(g.cout, n, rows, &dy[b * g.cout * n..], (n as isize, 1), xb, (1, n as isize), beta, &mut dw);
            }
        } else {
            // Accumulate in (cout, ky, kx, ci) order against row-major
            // patches, then permute to (cout, ci, ky, kx).
            let mut xt = vec![0f32; g.cin * g.h * g.w];
            let mut patches = vec![0f32; n * rows];
            let mut acc = vec![0f32; g.cout * rows];
            for b in 0..g.batch {
                im2row(&g, &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w], &mut xt, &mut patches);
                let beta = if b == 0 { 0.0 } else { 1.0 };
                gemm(g.cout, n, rows, &dy[b * g.cout * n..], (n as isize, 1), &patches, (rows as isize, 1), beta, &mut acc);
            }
            let kk = g.k * g.k;
            for co in 0..g.cout {
                for ci in 0..g.cin {
                    for t in 0..kk {
                        dw[co * rows + ci * kk + t] = acc[co * rows + t * g.cin + ci];
                    }
                }
            }
        }
        Ok((CpuStorage::F32(dw), Shape::from((g.cout, g.cin, g.k, g.k))))
    }
}

/// Convolution without bias; `x` is `(B, Cin, H, W)`, `w` is `(Cout, Cin, K, K)`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let x = x.contiguous()?;
    let w = w.contiguous()?;
    x.apply_op2(&w, Conv2dForward { stride, padding })
}

/// Convolution plus a per-output-channel bias of shape `(Cout,)`.
pub fn conv2d_bias(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let x = x.contiguous()?;
    x.apply_op3(&w.contiguous()?, &bias.contiguous()?, Conv2dForward { stride, padding })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn seeded(shape: (usize, usize, usize, usize), seed: u32) -> Tensor {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let data: Vec<f32> = (0..n as u32)
            .map(|i| {
                let v = i.wrapping_mul(2654435761).wrapping_add(seed.wrapping_mul(40503)) >> 8;
                (v % 2000) as f32 / 1000.0 - 1.0
            })
            .collect();
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap()
    }

    #[test]
    fn matches_candle_reference_forward_and_backward() {
        for &(cin, cout, hw, k, stride, padding) in
            &[(3, 5, 9, 3, 1, 1), (4, 2, 8, 4, 2, 1), (2, 3, 7, 1, 1, 0), (3, 4, 10, 3, 2, 1), (2, 2, 5, 3, 1, 0), (2, 3, 9, 4, 2, 1), (1, 2, 6, 5, 3, 2)]
        {
            let x = Var::from_tensor(&seeded((2, cin, hw, hw), 1)).unwrap();
            let w = Var::from_tensor(&seeded((cout, cin, k, k), 2)).unwrap();
            let ours = conv2d(x.as_tensor(), w.as_tensor(), stride, padding).unwrap();
            let reference = x.as_tensor().conv2d(w.as_tensor(), padding, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_abs_diff(&ours, &reference) < 1e-5);

            let probe = seeded(ours.dims4().unwrap(), 3);
            let g_ours = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g_ref = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w] {
                let a = g_ours.get(v.as_tensor()).unwrap();
                let b = g_ref.get(v.as_tensor()).unwrap();
                assert!(max_abs_diff(a, b) < 1e-4, "grad mismatch for {:?}", v.dims());
            }
        }
    }

    #[test]
    fn bias_variant_matches_broadcast_add() {
        let x = Var::from_tensor(&seeded((2, 3, 6, 6), 11)).unwrap();
        let w = Var::from_tensor(&seeded((4, 3, 3, 3), 12)).unwrap();
        let b = Var::from_tensor(&seeded((1, 1, 1, 4), 13).flatten_all().unwrap()).unwrap();
        let fused = conv2d_bias(x.as_tensor(), w.as_tensor(), b.as_tensor(), 2, 1).unwrap();
        let plain = conv2d(x.as_tensor(), w.as_tensor(), 2, 1)
            .unwrap()
            .broadcast_add(&b.as_tensor().reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        assert!(max_abs_diff(&fused, &plain) < 1e-5);
        let probe = seeded(fused.dims4().unwrap(), 14);
        let ga = (fused * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (plain * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w, &b] {
            assert!(max_abs_diff(ga.get(v.as_tensor()).unwrap(), gb.get(v.as_tensor()).unwrap()) < 1e-4);
        }
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let x = seeded((1, 2, 5, 5), 7);
        let w0 = seeded((2, 2, 3, 3), 8);
        let probe = seeded((1, 2, 5, 5), 9);
        let loss = |w: &Tensor| -> f64 {
            let y = conv2d(&x.to_dtype(candle_core::DType::F32).unwrap(), w, 1, 1).unwrap();
            (y * &probe).unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() as f64
        };
        let wv = Var::from_tensor(&w0).unwrap();
        let y = conv2d(&x, wv.as_tensor(), 1, 1).unwrap();
        let grads = (y * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let analytic = grads.get(wv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let base = w0.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for i in [0usize, 5, 17, 35] {
            let h = 1e-2f32;
            let bump = |d: f32| {
                let mut v = base.clone();
                v[i] += d;
                Tensor::from_vec(v, (2, 2, 3, 3), &Device::Cpu).unwrap()
            };
            let fd = (loss(&bump(h)) - loss(&bump(-h))) / (2.0 * h as f64);
            assert!((fd - analytic[i] as f64).abs() < 1e-2, "w[{i}]: fd {fd} vs {}", analytic[i]);
        }
    }
}
