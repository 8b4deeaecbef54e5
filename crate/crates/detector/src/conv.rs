//! Convolution and 2× nearest upsampling as custom ops. The convolution is
//! im2col plus a single matmul in both directions; on CPU this keeps the
//! backward pass within a small factor of the forward pass, which the
//! native kernels do not.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Device, Layout, Shape, Tensor, WithDType};

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(x: &Shape, w: &Shape, stride: usize) -> candle_core::Result<Self> {
        let (batch, channels, height, width) = x.dims4()?;
        let (_, c_in, kernel, _) = w.dims4()?;
        if c_in != channels {
            candle_core::bail!("conv expects {c_in} channels, got {channels}");
        }
        Ok(Self {
            batch,
            channels,
            height,
            width,
            kernel,
            stride,
            out_h: (height - 1) / stride + 1,
            out_w: (width - 1) / stride + 1,
        })
    }

    /// Rows of the patch matrix: C·k².
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Output cells per image.
    fn cells(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Calls `f(patch_row, column, input_index)` for every in-bounds patch
    /// entry. Columns run over (batch, output cell).
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, pad) = (self.kernel, (self.kernel / 2) as isize);
        let n = self.cells();
        for b in 0..self.batch {
            for c in 0..self.channels {
                let plane = (b * self.channels + c) * self.height * self.width;
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (c * k + ky) * k + kx;
                        for oy in 0..self.out_h {
                            let iy = (oy * self.stride) as isize + ky as isize - pad;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            let base = plane + iy as usize * self.width;
                            for ox in 0..self.out_w {
                                let ix = (ox * self.stride) as isize + kx as isize - pad;
                                if ix >= 0 && ix < self.width as isize {
                                    f(row, b * n + oy * self.out_w + ox, base + ix as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// (C·k², B·Ho·Wo) patch matrix of a contiguous NCHW buffer.
fn im2col<T: WithDType>(x: &[T], g: &Geometry) -> Vec<T> {
    let width = g.batch * g.cells();
    let mut out = vec![T::zero(); g.rows() * width];
    g.for_each_tap(|row, col, i| out[row * width + col] = x[i]);
    out
}

fn col2im<T: WithDType>(cols: &[T], g: &Geometry) -> Vec<T> {
    let width = g.batch * g.cells();
    let mut out = vec![T::zero(); g.batch * g.channels * g.height * g.width];
    g.for_each_tap(|row, col, i| out[i] += cols[row * width + col]);
    out
}

fn host<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("custom op needs contiguous inputs"),
    }
}

struct Conv2d {
    stride: usize,
}

fn conv_forward<T: WithDType>(x: &[T], w: &[T], bias: &[T], g: &Geometry) -> candle_core::Result<Vec<T>> {
    let dev = Device::Cpu;
    let c_out = bias.len();
    let n = g.cells();
    let cols = Tensor::from_vec(im2col(x, g), (g.rows(), g.batch * n), &dev)?;
    let w = Tensor::from_slice(w, (c_out, g.rows()), &dev)?;
    let prod = host::<T>(&w.matmul(&cols)?)?;
    let mut out = vec![T::zero(); g.batch * c_out * n];
    for o in 0..c_out {
        for b in 0..g.batch {
            let src = &prod[o * g.batch * n + b * n..][..n];
            let dst = &mut out[(b * c_out + o) * n..][..n];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s + bias[o];
            }
        }
    }
    Ok(out)
}

fn conv_backward<T: WithDType>(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    g: &Geometry,
) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
    let dev = x.device();
    let c_out = w.dim(0)?;
    let n = g.cells();
    let grad_host = host::<T>(grad)?;
    // (O, B·N) layout of the output gradient.
    let mut gp = vec![T::zero(); c_out * g.batch * n];
    let mut gb = vec![T::zero(); c_out];
    for b in 0..g.batch {
        for o in 0..c_out {
            let src = &grad_host[(b * c_out + o) * n..][..n];
            gp[o * g.batch * n + b * n..][..n].copy_from_slice(src);
            for s in src {
                gb[o] += *s;
            }
        }
    }
    let gp = Tensor::from_vec(gp, (c_out, g.batch * n), dev)?;
    let cols = Tensor::from_vec(im2col(&host::<T>(x)?, g), (g.rows(), g.batch * n), dev)?;
    let grad_w = gp.matmul(&cols.t()?)?.reshape(w.shape())?;
    let w2 = w.reshape((c_out, g.rows()))?;
    let grad_cols = host::<T>(&w2.t()?.matmul(&gp)?)?;
    let grad_x = Tensor::from_vec(col2im(&grad_cols, g), x.shape(), dev)?;
    Ok((grad_x, grad_w, Tensor::from_vec(gb, c_out, dev)?))
}

impl CustomOp3 for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d-im2col"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.shape(), l2.shape(), self.stride)?;
        let c_out = l2.shape().dims()[0];
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => {
                CpuStorage::F32(conv_forward(contiguous(x, l1)?, contiguous(w, l2)?, contiguous(b, l3)?, &g)?)
            }
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => {
                CpuStorage::F64(conv_forward(contiguous(x, l1)?, contiguous(w, l2)?, contiguous(b, l3)?, &g)?)
            }
            _ => candle_core::bail!("conv op supports matching f32 or f64 inputs"),
        };
        Ok((out, Shape::from((g.batch, c_out, g.out_h, g.out_w))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = Geometry::new(x.shape(), w.shape(), self.stride)?;
        let (gx, gw, gb) = match x.dtype() {
            DType::F32 => conv_backward::<f32>(x, w, grad, &g)?,
            DType::F64 => conv_backward::<f64>(x, w, grad, &g)?,
            other => candle_core::bail!("conv op does not support {other:?}"),
        };
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

/// Same-padded convolution of NCHW `x` with an (O, C, k, k) kernel (k odd)
/// and a bias of length O.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    let (c_out, c_in, k, k2) = w.dims4()?;
    if c != c_in || k != k2 || k % 2 == 0 || stride == 0 || bias.dims() != [c_out] {
        return Err(ModelError::Shape(format!(
            "conv of {:?} with kernel {:?} and bias {:?}",
            x.dims(),
            w.dims(),
            bias.dims()
        )));
    }
    Ok(x.contiguous()?.apply_op3(&w.contiguous()?, &bias.contiguous()?, Conv2d { stride })?)
}

struct Upsample2;

fn upsample_forward<T: WithDType>(x: &[T], dims: (usize, usize, usize)) -> Vec<T> {
    let (planes, h, w) = dims;
    let mut out = vec![T::zero(); planes * h * w * 4];
    for p in 0..planes {
        for y in 0..2 * h {
            for xo in 0..2 * w {
                out[(p * 2 * h + y) * 2 * w + xo] = x[(p * h + y / 2) * w + xo / 2];
            }
        }
    }
    out
}

fn upsample_backward<T: WithDType>(grad: &[T], dims: (usize, usize, usize)) -> Vec<T> {
    let (planes, h, w) = dims;
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..2 * h {
            for xo in 0..2 * w {
                out[(p * h + y / 2) * w + xo / 2] += grad[(p * 2 * h + y) * 2 * w + xo];
            }
        }
    }
    out
}

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2-nearest"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let dims = (b * c, h, w);
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(upsample_forward(contiguous(x, l)?, dims)),
            CpuStorage::F64(x) => CpuStorage::F64(upsample_forward(contiguous(x, l)?, dims)),
            _ => candle_core::bail!("upsample supports f32 or f64"),
        };
        Ok((out, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        let dims = (b * c, h, w);
        let out = match arg.dtype() {
            DType::F32 => Tensor::from_vec(upsample_backward(&host::<f32>(grad)?, dims), arg.shape(), arg.device())?,
            DType::F64 => Tensor::from_vec(upsample_backward(&host::<f64>(grad)?, dims), arg.shape(), arg.device())?,
            other => candle_core::bail!("upsample does not support {other:?}"),
        };
        Ok(Some(out))
    }
}

/// Nearest-neighbour 2× upsampling of an NCHW map.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Upsample2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap()
    }

    #[test]
    fn conv_matches_native_conv_and_its_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (h, w, k, stride) in [(8, 8, 3, 1), (8, 8, 3, 2), (7, 5, 3, 2), (6, 6, 1, 1), (9, 4, 3, 1), (4, 4, 1, 2)] {
            let x = Var::from_tensor(&random(&[2, 3, h, w], &mut rng)).unwrap();
            let kern = Var::from_tensor(&random(&[4, 3, k, k], &mut rng)).unwrap();
            let bias = Var::from_tensor(&random(&[4], &mut rng)).unwrap();
            let probe = random(&[2, 4, (h - 1) / stride + 1, (w - 1) / stride + 1], &mut rng);
            let want =
                x.conv2d(&kern, k / 2, stride, 1, 1).unwrap().broadcast_add(&bias.reshape((1, 4, 1, 1)).unwrap()).unwrap();
            let got = conv2d(&x, &kern, &bias, stride).unwrap();
            assert_eq!(got.dims(), want.dims());
            assert!(max_diff(&got, &want) < 1e-12);
            let gw = (want * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let gg = (got * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &kern, &bias] {
                assert!(max_diff(gw.get(v).unwrap(), gg.get(v).unwrap()) < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_matches_native_and_its_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Var::from_tensor(&random(&[2, 3, 3, 5], &mut rng)).unwrap();
        let probe = random(&[2, 3, 6, 10], &mut rng);
        let want = x.upsample_nearest2d(6, 10).unwrap();
        let got = upsample2(&x).unwrap();
        assert!(max_diff(&got, &want) < 1e-15);
        let gw = (want * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gg = (got * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(max_diff(gw.get(&x).unwrap(), gg.get(&x).unwrap()) < 1e-12);
    }
}
