//! 2-D convolution lowered to im2col + GEMM so that both directions of the
//! backward pass run as matrix products.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn cols(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Calls `f(col_offset, src_offset)` for every in-bounds tap of one
    /// output position.
    #[inline]
    fn for_each_tap(&self, batch: usize, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
        let k = self.kernel;
        for c in 0..self.channels {
            let plane = (batch * self.channels + c) * self.height;
            for ky in 0..k {
                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                if iy < 0 || iy >= self.height as isize {
                    continue;
                }
                let row = (plane + iy as usize) * self.width;
                for kx in 0..k {
                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                    if ix < 0 || ix >= self.width as isize {
                        continue;
                    }
                    f((c * k + ky) * k + kx, row + ix as usize);
                }
            }
        }
    }
}

fn im2col<T: WithDType>(src: &[T], batch: usize, g: Geometry) -> Vec<T> {
    let (ho, wo) = g.out();
    let cols = g.cols();
    let mut out = vec![T::zero(); batch * ho * wo * cols];
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * cols;
                g.for_each_tap(b, oy, ox, |col, s| out[row + col] = src[s]);
            }
        }
    }
    out
}

fn col2im<T: WithDType>(col: &[T], batch: usize, g: Geometry) -> Vec<T> {
    let (ho, wo) = g.out();
    let cols = g.cols();
    let mut out = vec![T::zero(); batch * g.channels * g.height * g.width];
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * cols;
                g.for_each_tap(b, oy, ox, |col_idx, s| out[s] += col[row + col_idx]);
            }
        }
    }
    out
}

struct Im2Col {
    geometry: Geometry,
}

struct Col2Im {
    geometry: Geometry,
    batch: usize,
}

fn storage_apply(
    storage: &CpuStorage,
    layout: &Layout,
    name: &str,
    f32_op: impl FnOnce(&[f32]) -> Vec<f32>,
    f64_op: impl FnOnce(&[f64]) -> Vec<f64>,
) -> candle_core::Result<CpuStorage> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg(format!("{name}: input must be contiguous")))?;
    match storage {
        CpuStorage::F32(v) => Ok(CpuStorage::F32(f32_op(&v[start..end]))),
        CpuStorage::F64(v) => Ok(CpuStorage::F64(f64_op(&v[start..end]))),
        _ => candle_core::bail!("{name}: only f32 and f64 are supported"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry;
        let batch = layout.dims()[0];
        let (ho, wo) = g.out();
        let out = storage_apply(
            storage,
            layout,
            "im2col",
            |s| im2col(s, batch, g),
            |s| im2col(s, batch, g),
        )?;
        Ok((out, Shape::from((batch * ho * wo, g.cols()))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = Col2Im {
            geometry: self.geometry,
            batch: arg.dims()[0],
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry;
        let batch = self.batch;
        let out = storage_apply(
            storage,
            layout,
            "col2im",
            |s| col2im(s, batch, g),
            |s| col2im(s, batch, g),
        )?;
        Ok((out, Shape::from((batch, g.channels, g.height, g.width))))
    }
}

/// Square-kernel convolution without bias. `weight` is `Co x C x k x k`.
pub fn conv2d(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    let (batch, channels, height, width) = input.dims4()?;
    let (out_channels, in_channels, kernel, kernel_w) = weight.dims4()?;
    if in_channels != channels || kernel != kernel_w {
        candle_core::bail!(
            "conv2d: input has {channels} channels, weight expects {in_channels} with {kernel}x{kernel_w} kernel"
        );
    }
    let geometry = Geometry {
        channels,
        height,
        width,
        kernel,
        stride,
        pad,
    };
    let (ho, wo) = geometry.out();
    let cols = input.contiguous()?.apply_op1(Im2Col { geometry })?;
    let w = weight.reshape((out_channels, geometry.cols()))?;
    cols.matmul(&w.t()?)?
        .reshape((batch, ho, wo, out_channels))?
        .permute((0, 3, 1, 2))?
        .contiguous()
}
