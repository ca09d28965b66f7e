use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conv::conv2d;

/// How batch normalization behaves during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics untouched. Used to replay a
    /// training forward pass for attribution.
    TrainFrozenStats,
    /// Running statistics.
    Eval,
}

impl Mode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

/// Named trainable parameters and non-trainable buffers, in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn param(&mut self, name: String, value: Tensor) -> candle_core::Result<Var> {
        let var = Var::from_tensor(&value)?;
        assert!(
            self.params.insert(name.clone(), var.clone()).is_none(),
            "duplicate parameter {name}"
        );
        Ok(var)
    }

    pub(crate) fn buffer(&mut self, name: String, value: Tensor) -> candle_core::Result<Var> {
        let var = Var::from_tensor(&value)?;
        assert!(
            self.buffers.insert(name.clone(), var.clone()).is_none(),
            "duplicate buffer {name}"
        );
        Ok(var)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    /// Parameters and buffers together.
    pub fn all(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter().chain(self.buffers.iter())
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }
}

pub(crate) fn normal_tensor<R: Rng + ?Sized>(
    shape: &[usize],
    std: f64,
    dtype: DType,
    rng: &mut R,
) -> candle_core::Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let v: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming-normal weights scaled by fan-out.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        (c_in, c_out, kernel): (usize, usize, usize),
        stride: usize,
        pad: usize,
        dtype: DType,
        rng: &mut R,
    ) -> candle_core::Result<Self> {
        let std = (2.0 / (c_out * kernel * kernel) as f64).sqrt();
        let weight = store.param(
            format!("{name}.weight"),
            normal_tensor(&[c_out, c_in, kernel, kernel], std, dtype, rng)?,
        )?;
        Ok(Self { weight, stride, pad })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        conv2d(x, self.weight.as_tensor(), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub weight: Var,
    pub bias: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    /// Identity initialization: unit scale, zero shift.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, dtype: DType) -> candle_core::Result<Self> {
        let dev = Device::Cpu;
        Ok(Self {
            weight: store.param(format!("{name}.weight"), Tensor::ones(channels, dtype, &dev)?)?,
            bias: store.param(format!("{name}.bias"), Tensor::zeros(channels, dtype, &dev)?)?,
            running_mean: store.buffer(format!("{name}.running_mean"), Tensor::zeros(channels, dtype, &dev)?)?,
            running_var: store.buffer(format!("{name}.running_var"), Tensor::ones(channels, dtype, &dev)?)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Accepts `N x C` or `N x C x H x W`.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> candle_core::Result<Tensor> {
        let rank = x.rank();
        let channels = x.dim(1)?;
        let bshape: Vec<usize> = (0..rank).map(|d| if d == 1 { channels } else { 1 }).collect();
        let reshape = |t: &Tensor| t.reshape(bshape.as_slice());
        let (mean, var) = if mode.uses_batch_stats() {
            // channels first, everything else flattened
            let flat = if rank == 2 {
                x.t()?
            } else {
                x.transpose(0, 1)?.flatten_from(1)?
            };
            let count = flat.dim(1)?;
            let mean = flat.mean_keepdim(D::Minus1)?;
            let centered = flat.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
            if mode == Mode::Train {
                let m = self.momentum;
                let mean_d = mean.detach().flatten_all()?;
                let var_d = var.detach().flatten_all()?;
                let unbiased = if count > 1 {
                    var_d.affine(count as f64 / (count - 1) as f64, 0.0)?
                } else {
                    var_d
                };
                self.running_mean
                    .set(&(self.running_mean.as_tensor().affine(1.0 - m, 0.0)? + mean_d.affine(m, 0.0)?)?)?;
                self.running_var
                    .set(&(self.running_var.as_tensor().affine(1.0 - m, 0.0)? + unbiased.affine(m, 0.0)?)?)?;
            }
            (reshape(&mean.flatten_all()?)?, reshape(&var.flatten_all()?)?)
        } else {
            (
                reshape(self.running_mean.as_tensor())?,
                reshape(self.running_var.as_tensor())?,
            )
        };
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        x.broadcast_sub(&mean)?
            .broadcast_mul(&inv_std)?
            .broadcast_mul(&reshape(self.weight.as_tensor())?)?
            .broadcast_add(&reshape(self.bias.as_tensor())?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `out x in`.
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        std: f64,
        with_bias: bool,
        dtype: DType,
        rng: &mut R,
    ) -> candle_core::Result<Self> {
        let weight = store.param(format!("{name}.weight"), normal_tensor(&[c_out, c_in], std, dtype, rng)?)?;
        let bias = if with_bias {
            Some(store.param(format!("{name}.bias"), Tensor::zeros(c_out, dtype, &Device::Cpu)?)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor()),
            None => Ok(y),
        }
    }
}
