//! Feature extractors with an effective stride of 16.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use super::layers::{BatchNorm, Conv2d, Mode, ParamStore};
use crate::config::BackboneKind;
use crate::error::{Error, Result};

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

fn normalize_input(images: &Tensor) -> candle_core::Result<Tensor> {
    let dtype = images.dtype();
    let dev = images.device();
    let mean = Tensor::new(&IMAGENET_MEAN, dev)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
    let std = Tensor::new(&IMAGENET_STD, dev)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
    images.broadcast_sub(&mean)?.broadcast_div(&std)
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        conv_name: &str,
        bn_name: &str,
        shape: (usize, usize, usize),
        stride: usize,
        pad: usize,
        dtype: DType,
        rng: &mut R,
    ) -> candle_core::Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, conv_name, shape, stride, pad, dtype, rng)?,
            bn: BatchNorm::new(store, bn_name, shape.1, dtype)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> candle_core::Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, mode)
    }
}

/// Four stride-2 conv/BN/ReLU blocks, about 100k parameters.
#[derive(Debug, Clone)]
pub struct ToyCnn {
    blocks: Vec<ConvBn>,
}

pub const TOY_CHANNELS: [usize; 5] = [3, 16, 32, 64, 128];

impl ToyCnn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dtype: DType, rng: &mut R) -> candle_core::Result<Self> {
        let blocks = (0..4)
            .map(|i| {
                ConvBn::new(
                    store,
                    &format!("backbone.block{i}.conv"),
                    &format!("backbone.block{i}.bn"),
                    (TOY_CHANNELS[i], TOY_CHANNELS[i + 1], 3),
                    2,
                    1,
                    dtype,
                    rng,
                )
            })
            .collect::<candle_core::Result<_>>()?;
        Ok(Self { blocks })
    }

    fn forward(&self, images: &Tensor, mode: Mode) -> candle_core::Result<Tensor> {
        let mut x = normalize_input(images)?;
        for b in &self.blocks {
            x = b.forward(&x, mode)?.relu()?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    a: ConvBn,
    b: ConvBn,
    c: ConvBn,
    downsample: Option<ConvBn>,
}

impl Bottleneck {
    fn forward(&self, x: &Tensor, mode: Mode) -> candle_core::Result<Tensor> {
        let y = self.a.forward(x, mode)?.relu()?;
        let y = self.b.forward(&y, mode)?.relu()?;
        let y = self.c.forward(&y, mode)?;
        let shortcut = match &self.downsample {
            Some(d) => d.forward(x, mode)?,
            None => x.clone(),
        };
        (y + shortcut)?.relu()
    }
}

/// ResNet-50 (torchvision v1.5 layout) with the last stage kept at stride 1,
/// for an overall stride of 16 and 2048 output channels. Parameter names
/// follow torchvision under a `backbone.` prefix.
#[derive(Debug, Clone)]
pub struct ResNet50 {
    stem: ConvBn,
    layers: Vec<Vec<Bottleneck>>,
}

impl ResNet50 {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dtype: DType, rng: &mut R) -> candle_core::Result<Self> {
        let stem = ConvBn::new(store, "backbone.conv1", "backbone.bn1", (3, 64, 7), 2, 3, dtype, rng)?;
        let depths = [3, 4, 6, 3];
        let strides = [1, 2, 2, 1];
        let mut c_in = 64;
        let mut layers = Vec::new();
        for (li, (&depth, &stride)) in depths.iter().zip(&strides).enumerate() {
            let width = 64 << li;
            let c_out = width * 4;
            let mut blocks = Vec::new();
            for bi in 0..depth {
                let p = format!("backbone.layer{}.{bi}", li + 1);
                let s = if bi == 0 { stride } else { 1 };
                let cin = if bi == 0 { c_in } else { c_out };
                let downsample = if bi == 0 && (s != 1 || cin != c_out) {
                    Some(ConvBn::new(
                        store,
                        &format!("{p}.downsample.0"),
                        &format!("{p}.downsample.1"),
                        (cin, c_out, 1),
                        s,
                        0,
                        dtype,
                        rng,
                    )?)
                } else {
                    None
                };
                blocks.push(Bottleneck {
                    a: ConvBn::new(store, &format!("{p}.conv1"), &format!("{p}.bn1"), (cin, width, 1), 1, 0, dtype, rng)?,
                    b: ConvBn::new(store, &format!("{p}.conv2"), &format!("{p}.bn2"), (width, width, 3), s, 1, dtype, rng)?,
                    c: ConvBn::new(store, &format!("{p}.conv3"), &format!("{p}.bn3"), (width, c_out, 1), 1, 0, dtype, rng)?,
                    downsample,
                });
            }
            layers.push(blocks);
            c_in = c_out;
        }
        Ok(Self { stem, layers })
    }

    fn forward(&self, images: &Tensor, mode: Mode) -> candle_core::Result<Tensor> {
        let x = normalize_input(images)?;
        let x = self.stem.forward(&x, mode)?.relu()?;
        // zero padding is equivalent to -inf padding after the ReLU
        let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut x = x.max_pool2d_with_stride((3, 3), (2, 2))?;
        for layer in &self.layers {
            for block in layer {
                x = block.forward(&x, mode)?;
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    Toy(ToyCnn),
    ResNet50(ResNet50),
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        kind: BackboneKind,
        store: &mut ParamStore,
        dtype: DType,
        rng: &mut R,
    ) -> candle_core::Result<Self> {
        Ok(match kind {
            BackboneKind::Toy => Backbone::Toy(ToyCnn::new(store, dtype, rng)?),
            BackboneKind::Resnet50 => Backbone::ResNet50(ResNet50::new(store, dtype, rng)?),
        })
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Backbone::Toy(_) => TOY_CHANNELS[4],
            Backbone::ResNet50(_) => 2048,
        }
    }

    pub fn forward(&self, images: &Tensor, mode: Mode) -> candle_core::Result<Tensor> {
        match self {
            Backbone::Toy(b) => b.forward(images, mode),
            Backbone::ResNet50(b) => b.forward(images, mode),
        }
    }
}

/// Copies torchvision-named ResNet-50 weights (`conv1.weight`,
/// `layer1.0.bn1.running_mean`, ...) from a safetensors file into the
/// `backbone.` entries of `store`. The classifier (`fc.*`) is ignored;
/// any missing or mis-shaped tensor is an error.
pub fn load_pretrained_backbone(store: &ParamStore, path: &Path) -> Result<()> {
    let tensors: HashMap<String, Tensor> = candle_core::safetensors::load(path, &Device::Cpu)?;
    for (name, var) in store.all().filter(|(n, _)| n.starts_with("backbone.")) {
        let key = &name["backbone.".len()..];
        let t = tensors
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("pretrained file lacks `{key}`")))?;
        if t.dims() != var.dims() {
            return Err(Error::ShapeMismatch(format!(
                "pretrained `{key}` has shape {:?}, model expects {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}
