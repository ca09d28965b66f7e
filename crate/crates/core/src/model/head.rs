use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Linear, Mode, ParamStore};
use crate::error::{Error, Result};

/// Standard deviation of the classifier weights at initialization.
const CLASSIFIER_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    /// Global average pooling.
    Gap,
    /// Global max pooling.
    Gmp,
}

impl Pooling {
    /// Stage I averages; every later stage takes the maximum.
    pub fn for_stage(stage: usize) -> Self {
        if stage == 0 {
            Pooling::Gap
        } else {
            Pooling::Gmp
        }
    }

    /// `N x C x H x W` to `N x C`.
    pub fn apply(self, x: &Tensor) -> candle_core::Result<Tensor> {
        let flat = x.flatten_from(2)?;
        match self {
            Pooling::Gap => flat.mean(2),
            // gradient goes to one arg-max position per channel, even on ties
            Pooling::Gmp => flat.gather(&flat.argmax_keepdim(2)?, 2)?.squeeze(2),
        }
    }
}

/// Pooling, reduction block (1x1 conv, BN, ReLU) and linear classifier.
#[derive(Debug, Clone)]
pub struct StageHead {
    pub pooling: Pooling,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    /// The 1x1 reduction convolution acts on the pooled vector, so it is
    /// stored as an `embed_dim x in_channels` matrix.
    pub reduction: Linear,
    pub bn: BatchNorm,
    pub classifier: Linear,
}

/// What one stage produced for a batch.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub stage: usize,
    pub embedding: Tensor,
    pub logits: Tensor,
    /// The feature map this stage consumed, kept for attribution.
    pub stage_input: Tensor,
    pub mode: Mode,
}

impl StageHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        stage: usize,
        in_channels: usize,
        embed_dim: usize,
        num_classes: usize,
        dtype: DType,
        rng: &mut R,
    ) -> candle_core::Result<Self> {
        let p = format!("stage{}", stage + 1);
        let reduction_std = (2.0 / embed_dim as f64).sqrt();
        Ok(Self {
            pooling: Pooling::for_stage(stage),
            in_channels,
            embed_dim,
            num_classes,
            reduction: Linear::new(store, &format!("{p}.reduction"), in_channels, embed_dim, reduction_std, false, dtype, rng)?,
            bn: BatchNorm::new(store, &format!("{p}.bn"), embed_dim, dtype)?,
            classifier: Linear::new(store, &format!("{p}.classifier"), embed_dim, num_classes, CLASSIFIER_INIT_STD, true, dtype, rng)?,
        })
    }

    /// Returns `(embedding, logits)`.
    pub fn forward(&self, input: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let dims = input.dims();
        if dims.len() != 4 || dims[1] != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "stage head expects N x {} x H x W, got {dims:?}",
                self.in_channels
            )));
        }
        let pooled = self.pooling.apply(input)?;
        let embedding = self.bn.forward(&self.reduction.forward(&pooled)?, mode)?.relu()?;
        let logits = self.classifier.forward(&embedding)?;
        Ok((embedding, logits))
    }

    pub fn stage_forward(&self, stage: usize, input: &Tensor, mode: Mode) -> Result<StageOutput> {
        let (embedding, logits) = self.forward(input, mode)?;
        Ok(StageOutput {
            stage,
            embedding,
            logits,
            stage_input: input.clone(),
            mode,
        })
    }
}
