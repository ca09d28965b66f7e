//! Backbone, stage heads and the test-time descriptor.

mod backbone;
mod conv;
mod head;
mod layers;

pub use backbone::{load_pretrained_backbone, Backbone, ResNet50, ToyCnn, TOY_CHANNELS};
pub use conv::conv2d;
pub use head::{Pooling, StageHead, StageOutput};
pub use layers::{BatchNorm, Conv2d, Linear, Mode, ParamStore};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, ModelConfig, BACKBONE_STRIDE};
use crate::error::{Error, Result};

/// Stream id separating model initialization from the data stream.
const INIT_STREAM: u64 = 0x6d6f_6465_6c;

/// The full network: one backbone feeding `stages` heads.
#[derive(Debug, Clone)]
pub struct PmmModel {
    pub backbone: Backbone,
    pub heads: Vec<StageHead>,
    pub store: ParamStore,
    pub dtype: DType,
    /// (b_h, b_w): backbone outputs must tile into these blocks.
    pub block: (usize, usize),
    pub normalize_embeddings: bool,
}

impl PmmModel {
    pub fn new(config: &Config, num_classes: usize) -> Result<Self> {
        Self::build(&config.model, num_classes, (config.mix.block_h, config.mix.block_w), config.seed)
    }

    pub fn build(model: &ModelConfig, num_classes: usize, block: (usize, usize), seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("model needs at least one class".into()));
        }
        let dtype = model.precision.dtype();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(model.backbone, &mut store, dtype, &mut rng)?;
        let heads = (0..model.stages)
            .map(|t| StageHead::new(&mut store, t, backbone.out_channels(), model.embed_dim, num_classes, dtype, &mut rng))
            .collect::<candle_core::Result<Vec<_>>>()?;
        if let Some(path) = &model.pretrained {
            load_pretrained_backbone(&store, path)?;
        }
        Ok(Self {
            backbone,
            heads,
            store,
            dtype,
            block,
            normalize_embeddings: model.normalize_embeddings,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.heads.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.heads[0].embed_dim
    }

    pub fn num_classes(&self) -> usize {
        self.heads[0].num_classes
    }

    /// `N x 3 x H x W` images to the `N x C x H/16 x W/16` feature map.
    pub fn backbone_forward(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h % BACKBONE_STRIDE != 0 || w % BACKBONE_STRIDE != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input {c}x{h}x{w} is not 3 channels at a multiple of the stride {BACKBONE_STRIDE}"
            )));
        }
        let f = self.backbone.forward(&images.to_dtype(self.dtype)?, mode)?;
        let (_, _, fh, fw) = f.dims4()?;
        let (bh, bw) = self.block;
        if fh % bh != 0 || fw % bw != 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature map {fh}x{fw} does not tile into {bh}x{bw} blocks"
            )));
        }
        Ok(f)
    }

    pub fn stage_forward(&self, stage: usize, input: &Tensor, mode: Mode) -> Result<StageOutput> {
        let head = self.heads.get(stage).ok_or(Error::StageCountMismatch {
            expected: stage + 1,
            got: self.heads.len(),
        })?;
        head.stage_forward(stage, input, mode)
    }

    /// Evaluation-mode pass: every stage consumes the raw backbone feature.
    pub fn forward_eval(&self, images: &Tensor) -> Result<Vec<StageOutput>> {
        let f = self.backbone_forward(images, Mode::Eval)?;
        (0..self.heads.len())
            .map(|t| self.stage_forward(t, &f, Mode::Eval))
            .collect()
    }

    pub fn descriptor(&self, images: &Tensor) -> Result<Descriptor> {
        let outputs = self.forward_eval(images)?;
        assemble_descriptor(&outputs, self.heads.len(), self.normalize_embeddings)
    }
}

/// Concatenated per-stage embeddings, `N x (S * embed_dim)`.
#[derive(Debug, Clone)]
pub struct Descriptor {
    pub values: Tensor,
    pub stage_dim: usize,
}

impl Descriptor {
    pub fn num_stages(&self) -> usize {
        self.values.dim(1).unwrap_or(0) / self.stage_dim.max(1)
    }

    pub fn stage_slice(&self, stage: usize) -> Result<Tensor> {
        Ok(self.values.narrow(1, stage * self.stage_dim, self.stage_dim)?)
    }
}

/// Concatenates stage embeddings in stage order, optionally L2-normalizing
/// each stage slice first.
pub fn assemble_descriptor(outputs: &[StageOutput], stages: usize, normalize: bool) -> Result<Descriptor> {
    if outputs.len() != stages || stages == 0 {
        return Err(Error::StageCountMismatch {
            expected: stages,
            got: outputs.len(),
        });
    }
    let n = outputs[0].embedding.dim(0)?;
    let stage_dim = outputs[0].embedding.dim(1)?;
    let mut parts = Vec::with_capacity(outputs.len());
    for o in outputs {
        if o.embedding.dims() != [n, stage_dim] {
            return Err(Error::ShapeMismatch(format!(
                "stage {} embedding {:?} differs from {:?}",
                o.stage,
                o.embedding.dims(),
                [n, stage_dim]
            )));
        }
        let e = o.embedding.detach();
        parts.push(if normalize {
            let norm = e.sqr()?.sum_keepdim(1)?.sqrt()?.clamp(1e-12, f64::MAX)?;
            e.broadcast_div(&norm)?
        } else {
            e
        });
    }
    Ok(Descriptor {
        values: Tensor::cat(&parts, 1)?,
        stage_dim,
    })
}
