//! CPU tensor kernels with hand-written gradients.
//!
//! Candle's strided copies and transposed convolutions are slow on the CPU
//! backend, so the networks here run channel-last (`[N, H, W, C]`) and build
//! convolutions from an explicit im2col gather plus one matmul. Both the
//! gather and its adjoint are custom ops, which keeps every backward pass on
//! the fast path.

use candle_core::backend::BackendStorage;
use candle_core::{
    CpuStorage, Device, CustomOp1, CustomOp2, Error, Layout, Result, Shape, Tensor, WithDType,
};

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(Error::Msg("custom op expects a contiguous input".into())),
    }
}

macro_rules! float_dispatch {
    ($storage:expr, $layout:expr, |$data:ident| $body:expr) => {
        match $storage {
            CpuStorage::F32(v) => {
                let $data = contiguous(v, $layout)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(v) => {
                let $data = contiguous(v, $layout)?;
                CpuStorage::F64($body)
            }
            other => {
                return Err(Error::Msg(format!(
                    "unsupported dtype {:?}",
                    other.dtype()
                )))
            }
        }
    };
}

fn dims4(layout: &Layout) -> Result<(usize, usize, usize, usize)> {
    layout.shape().dims4()
}

/// Gathers `k x k` neighbourhoods (zero padded, stride one) of an NHWC
/// tensor into `[N, H, W, k*k*C]`, ordered `(dy, dx, c)`.
#[derive(Clone, Copy)]
struct Im2Col {
    k: usize,
}

fn im2col<T: WithDType>(src: &[T], n: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let kc = k * k * c;
    let mut out = vec![T::zero(); n * h * w * kc];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let dst_base = ((b * h + y) * w + x) * kc;
                for dy in 0..k {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sx = x as isize + dx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src_base = ((b * h + sy as usize) * w + sx as usize) * c;
                        let dst = dst_base + (dy * k + dx) * c;
                        out[dst..dst + c].copy_from_slice(&src[src_base..src_base + c]);
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: WithDType>(src: &[T], n: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let kc = k * k * c;
    let mut out = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let src_base = ((b * h + y) * w + x) * kc;
                for dy in 0..k {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sx = x as isize + dx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst_base = ((b * h + sy as usize) * w + sx as usize) * c;
                        let s = src_base + (dy * k + dx) * c;
                        for (o, v) in out[dst_base..dst_base + c].iter_mut().zip(&src[s..s + c]) {
                            *o += *v;
                        }
                    }
                }
            }
        }
    }
    out
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, h, w, c) = dims4(layout)?;
        let k = self.k;
        let out = float_dispatch!(storage, layout, |d| im2col(d, n, h, w, c, k));
        Ok((out, Shape::from((n, h, w, k * k * c))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im { k: self.k })?))
    }
}

/// Adjoint of [`Im2Col`]: scatters-and-sums columns back onto the grid.
#[derive(Clone, Copy)]
struct Col2Im {
    k: usize,
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, h, w, kc) = dims4(layout)?;
        let k = self.k;
        let c = kc / (k * k);
        let out = float_dispatch!(storage, layout, |d| col2im(d, n, h, w, c, k));
        Ok((out, Shape::from((n, h, w, c))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Col { k: self.k })?))
    }
}

/// Stride-one `k x k` convolution of an NHWC tensor with "same" zero
/// padding, against a `[k*k*C_in, C_out]` weight matrix whose rows follow the
/// im2col order `(dy, dx, c)`. The input gradient is itself computed as a
/// convolution with the spatially flipped, transposed kernel, which keeps
/// every matmul in the backward pass well shaped.
#[derive(Clone, Copy)]
struct ConvNhwc {
    k: usize,
}

fn conv_fwd<T: WithDType>(
    x: &[T],
    w: &[T],
    (n, h, wd, c): (usize, usize, usize, usize),
    k: usize,
    c_out: usize,
) -> Result<Vec<T>> {
    let cols = if k == 1 { x.to_vec() } else { im2col(x, n, h, wd, c, k) };
    let ct = Tensor::from_vec(cols, (n * h * wd, k * k * c), &Device::Cpu)?;
    let wt = Tensor::from_slice(w, (k * k * c, c_out), &Device::Cpu)?;
    ct.matmul(&wt)?.flatten_all()?.to_vec1::<T>()
}

impl CustomOp2 for ConvNhwc {
    fn name(&self) -> &'static str {
        "conv-nhwc"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let dims = dims4(l1)?;
        let (n, h, w, c) = dims;
        let (kkc, c_out) = l2.shape().dims2()?;
        let k = self.k;
        if kkc != k * k * c {
            return Err(Error::Msg(format!(
                "conv weight has {kkc} rows, expected {}",
                k * k * c
            )));
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32(conv_fwd(
                contiguous(a, l1)?,
                contiguous(b, l2)?,
                dims,
                k,
                c_out,
            )?),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64(conv_fwd(
                contiguous(a, l1)?,
                contiguous(b, l2)?,
                dims,
                k,
                c_out,
            )?),
            _ => return Err(Error::Msg("conv: unsupported or mixed dtypes".into())),
        };
        Ok((out, Shape::from((n, h, w, c_out))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let k = self.k;
        let (n, h, wd, c) = x.dims4()?;
        let c_out = w.dim(1)?;
        let m = n * h * wd;
        let grad = grad.contiguous()?;
        let g2 = grad.reshape((m, c_out))?;
        let cols = if k == 1 {
            x.reshape((m, c))?
        } else {
            x.contiguous()?
                .apply_op1_no_bwd(&Im2Col { k })?
                .reshape((m, k * k * c))?
        };
        let grad_w = cols.t()?.matmul(&g2)?;
        let grad_x = if k == 1 {
            g2.matmul(&w.t()?)?
        } else {
            let rev = Tensor::arange_step(k as i64 - 1, -1, -1, &Device::Cpu)?;
            let flipped = w
                .reshape((k, k, c, c_out))?
                .index_select(&rev, 0)?
                .index_select(&rev, 1)?
                .permute((0, 1, 3, 2))?
                .contiguous()?
                .reshape((k * k * c_out, c))?;
            grad.apply_op1_no_bwd(&Im2Col { k })?
                .reshape((m, k * k * c_out))?
                .matmul(&flipped)?
        };
        Ok((Some(grad_x.reshape((n, h, wd, c))?), Some(grad_w)))
    }
}

/// Leaky ReLU with a single-pass backward.
#[derive(Clone, Copy)]
struct LeakyRelu {
    slope: f64,
}

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let a = self.slope;
        let out = match storage {
            CpuStorage::F32(v) => {
                let a = a as f32;
                CpuStorage::F32(
                    contiguous(v, layout)?
                        .iter()
                        .map(|&x| if x >= 0.0 { x } else { a * x })
                        .collect(),
                )
            }
            CpuStorage::F64(v) => CpuStorage::F64(
                contiguous(v, layout)?
                    .iter()
                    .map(|&x| if x >= 0.0 { x } else { a * x })
                    .collect(),
            ),
            other => {
                return Err(Error::Msg(format!(
                    "leaky-relu: unsupported {:?}",
                    other.dtype()
                )))
            }
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let g = arg
            .contiguous()?
            .apply_op2_no_bwd(&grad.contiguous()?, &LeakyReluBwd { slope: self.slope })?;
        Ok(Some(g))
    }
}

/// `grad * (x >= 0 ? 1 : slope)`.
#[derive(Clone, Copy)]
struct LeakyReluBwd {
    slope: f64,
}

impl CustomOp2 for LeakyReluBwd {
    fn name(&self) -> &'static str {
        "leaky-relu-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let a = self.slope;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                let a = a as f32;
                CpuStorage::F32(
                    contiguous(x, l1)?
                        .iter()
                        .zip(contiguous(g, l2)?)
                        .map(|(&x, &g)| if x >= 0.0 { g } else { a * g })
                        .collect(),
                )
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(
                contiguous(x, l1)?
                    .iter()
                    .zip(contiguous(g, l2)?)
                    .map(|(&x, &g)| if x >= 0.0 { g } else { a * g })
                    .collect(),
            ),
            _ => return Err(Error::Msg("leaky-relu-bwd: unsupported or mixed dtypes".into())),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Nearest-neighbour 2x upsampling of an NHWC tensor.
#[derive(Clone, Copy)]
struct Upsample2x;

fn upsample2x<T: WithDType>(src: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                let s = ((b * h + y / 2) * w + x / 2) * c;
                let d = ((b * oh + y) * ow + x) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    out
}

fn sumpool2x<T: WithDType>(src: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let s = ((b * h + y) * w + x) * c;
                let d = ((b * oh + y / 2) * ow + x / 2) * c;
                for (o, v) in out[d..d + c].iter_mut().zip(&src[s..s + c]) {
                    *o += *v;
                }
            }
        }
    }
    out
}

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, h, w, c) = dims4(layout)?;
        let out = float_dispatch!(storage, layout, |d| upsample2x(d, n, h, w, c));
        Ok((out, Shape::from((n, 2 * h, 2 * w, c))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&SumPool2x)?))
    }
}

/// 2x2 sum pooling of an NHWC tensor with even spatial dims.
#[derive(Clone, Copy)]
struct SumPool2x;

impl CustomOp1 for SumPool2x {
    fn name(&self) -> &'static str {
        "sumpool2x-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, h, w, c) = dims4(layout)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Msg(format!("sumpool2x needs even dims, got {h}x{w}")));
        }
        let out = float_dispatch!(storage, layout, |d| sumpool2x(d, n, h, w, c));
        Ok((out, Shape::from((n, h / 2, w / 2, c))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Upsample2x)?))
    }
}

/// `acos` with its input clipped to `[-1, 1]`. The backward pass floors
/// `1 - x^2` at `1e-12`, so the gradient stays finite at the endpoints.
#[derive(Clone, Copy)]
struct Acos;

impl CustomOp1 for Acos {
    fn name(&self) -> &'static str {
        "acos"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(
                contiguous(v, layout)?
                    .iter()
                    .map(|x| x.clamp(-1.0, 1.0).acos())
                    .collect(),
            ),
            CpuStorage::F64(v) => CpuStorage::F64(
                contiguous(v, layout)?
                    .iter()
                    .map(|x| x.clamp(-1.0, 1.0).acos())
                    .collect(),
            ),
            other => return Err(Error::Msg(format!("acos: unsupported {:?}", other.dtype()))),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let denom = arg
            .clamp(-1.0, 1.0)?
            .sqr()?
            .neg()?
            .affine(1.0, 1.0)?
            .maximum(1e-12)?
            .sqrt()?;
        Ok(Some(grad.div(&denom)?.neg()?))
    }
}

/// Four-quadrant arctangent `atan2(y, x)`. `damping` is added to
/// `x^2 + y^2` in the backward pass only, bounding the gradient near the
/// origin without changing forward values.
#[derive(Clone, Copy)]
struct Atan2 {
    damping: f64,
}

impl CustomOp2 for Atan2 {
    fn name(&self) -> &'static str {
        "atan2"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        if l1.shape() != l2.shape() {
            return Err(Error::Msg("atan2: shape mismatch".into()));
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(x)) => CpuStorage::F32(
                contiguous(y, l1)?
                    .iter()
                    .zip(contiguous(x, l2)?)
                    .map(|(y, x)| y.atan2(*x))
                    .collect(),
            ),
            (CpuStorage::F64(y), CpuStorage::F64(x)) => CpuStorage::F64(
                contiguous(y, l1)?
                    .iter()
                    .zip(contiguous(x, l2)?)
                    .map(|(y, x)| y.atan2(*x))
                    .collect(),
            ),
            _ => return Err(Error::Msg("atan2: unsupported dtypes".into())),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        y: &Tensor,
        x: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let r2 = (x.sqr()? + y.sqr()?)?.affine(1.0, self.damping.max(1e-30))?;
        let gy = grad.mul(&x.div(&r2)?)?;
        let gx = grad.mul(&y.div(&r2)?)?.neg()?;
        Ok((Some(gy), Some(gx)))
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[derive(Clone, Copy)]
struct Softplus;

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl CustomOp1 for Softplus {
    fn name(&self) -> &'static str {
        "softplus"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(
                contiguous(v, layout)?
                    .iter()
                    .map(|&x| softplus_scalar(x as f64) as f32)
                    .collect(),
            ),
            CpuStorage::F64(v) => CpuStorage::F64(
                contiguous(v, layout)?
                    .iter()
                    .map(|&x| softplus_scalar(x))
                    .collect(),
            ),
            other => {
                return Err(Error::Msg(format!(
                    "softplus: unsupported {:?}",
                    other.dtype()
                )))
            }
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.mul(&sigmoid(arg)?)?))
    }
}

pub fn im2col_nhwc(x: &Tensor, k: usize) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Im2Col { k })
}

/// `k x k` "same" convolution of `[N, H, W, C]` with weights
/// `[k*k*C, C_out]`; see [`im2col_nhwc`] for the row order.
pub fn conv_nhwc(x: &Tensor, w: &Tensor, k: usize) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, ConvNhwc { k })
}

pub fn upsample2x_nhwc(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2x)
}

/// 2x2 average pooling (NHWC).
pub fn avgpool2x_nhwc(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(SumPool2x)?.affine(0.25, 0.0)
}

pub fn acos(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Acos)
}

pub fn atan2(y: &Tensor, x: &Tensor) -> Result<Tensor> {
    atan2_damped(y, x, 0.0)
}

pub fn atan2_damped(y: &Tensor, x: &Tensor, damping: f64) -> Result<Tensor> {
    y.contiguous()?.apply_op2(&x.contiguous()?, Atan2 { damping })
}

pub fn softplus(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Softplus)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    x.neg()?.exp()?.affine(1.0, 1.0)?.recip()
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op1(LeakyRelu { slope })
}

/// Row-wise L2 normalization of a `[B, D]` tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(1)?.affine(1.0, 1e-12)?.sqrt()?;
    x.broadcast_div(&norm)
}

/// Row-wise log-softmax of a `[B, K]` tensor.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    shifted.broadcast_sub(&lse)
}

/// Sum of absolute values as an `f64`; non-finite if any element is.
pub fn abs_sum(x: &Tensor) -> Result<f64> {
    x.abs()?
        .to_dtype(candle_core::DType::F64)?
        .sum_all()?
        .to_scalar::<f64>()
}

pub fn is_finite(x: &Tensor) -> Result<bool> {
    Ok(abs_sum(x)?.is_finite())
}
