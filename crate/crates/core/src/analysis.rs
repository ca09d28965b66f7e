//! Test-time attribution of every stage and the overlap of the blocks each
//! stage attends to.

use std::path::Path;

use candle_core::Tensor;
use serde::Serialize;

use crate::attribution::{detach_map, grad_cam, predicted_classes, GradCamMap, ImageRef};
use crate::datapipe::{Augment, ImageStore};
use crate::error::{Error, Result};
use crate::featmix::{block_ranking, BlockGrid, BlockMask};
use crate::model::PmmModel;

/// Detached evaluation-mode Grad-CAM of every stage on the raw backbone
/// feature, for `targets` or, if absent, each stage's predicted class.
pub fn stage_attention(model: &PmmModel, images: &Tensor, targets: Option<&[usize]>) -> Result<Vec<GradCamMap>> {
    let outputs = model.forward_eval(images)?;
    outputs
        .iter()
        .enumerate()
        .map(|(t, out)| {
            let classes = match targets {
                Some(c) => c.to_vec(),
                None => predicted_classes(&out.logits)?,
            };
            Ok(detach_map(&grad_cam(&model.heads[t], out, &classes)?))
        })
        .collect()
}

pub fn feature_grid(model: &PmmModel, map: &GradCamMap) -> Result<BlockGrid> {
    let (_, h, w) = map.dims();
    BlockGrid::new(h, w, model.block.0, model.block.1)
}

/// Mean over samples of the IoU of suppressed blocks, for every stage pair.
pub fn pairwise_iou(masks: &[BlockMask]) -> Vec<Vec<f64>> {
    let s = masks.len();
    let mut out = vec![vec![1.0; s]; s];
    for a in 0..s {
        for b in a + 1..s {
            let n = masks[a].len();
            let mean = (0..n)
                .map(|i| BlockMask::suppressed_iou(masks[a].sample(i), masks[b].sample(i)))
                .sum::<f64>()
                / n.max(1) as f64;
            out[a][b] = mean;
            out[b][a] = mean;
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct StagePair {
    /// 1-based stage numbers.
    pub stages: [usize; 2],
    pub mean_iou: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MaskStats {
    pub k: usize,
    pub block: [usize; 2],
    pub samples: usize,
    pub pairs: Vec<StagePair>,
    /// Top-K block indices per stage, per sample.
    pub blocks: Vec<Vec<Vec<usize>>>,
}

impl MaskStats {
    pub fn from_masks(masks: &[BlockMask], k: usize) -> Self {
        let iou = pairwise_iou(masks);
        let mut pairs = Vec::new();
        for a in 0..masks.len() {
            for b in a + 1..masks.len() {
                pairs.push(StagePair {
                    stages: [a + 1, b + 1],
                    mean_iou: iou[a][b],
                });
            }
        }
        let grid = masks.first().map(|m| m.grid);
        Self {
            k,
            block: grid.map_or([0, 0], |g| [g.block_h, g.block_w]),
            samples: masks.first().map_or(0, |m| m.len()),
            pairs,
            blocks: masks.iter().map(|m| m.blocks.clone()).collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Top-K attended blocks of every stage over index entries, concatenated
/// in entry order.
pub fn stage_masks(model: &PmmModel, store: &ImageStore, entries: &[usize], k: usize, batch_size: usize) -> Result<Vec<BlockMask>> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut per_stage: Vec<Option<BlockMask>> = vec![None; model.num_stages()];
    for chunk in entries.chunks(batch_size.max(1)) {
        let images = store.stack(chunk, Augment::NONE, model.dtype, &mut rng)?;
        let maps = stage_attention(model, &images, None)?;
        for (t, g) in maps.iter().enumerate() {
            let mask = block_ranking(g, &feature_grid(model, g)?, k)?;
            per_stage[t] = Some(match per_stage[t].take() {
                None => mask,
                Some(mut acc) => {
                    acc.values.extend(mask.values);
                    acc.blocks.extend(mask.blocks);
                    acc
                }
            });
        }
    }
    per_stage
        .into_iter()
        .map(|m| m.ok_or_else(|| Error::InvalidArgument("no entries to analyse".into())))
        .collect()
}

/// Tints the suppressed blocks of one sample red over the image and saves
/// an RGB PNG.
pub fn render_block_overlay(mask: &BlockMask, sample: usize, image: ImageRef<'_>, path: &Path) -> Result<()> {
    let (ih, iw) = (image.height, image.width);
    let g = mask.grid;
    let cells = mask.sample(sample);
    let plane = ih * iw;
    let mut rgb = Vec::with_capacity(3 * plane);
    for y in 0..ih {
        for x in 0..iw {
            let fy = y * g.height / ih;
            let fx = x * g.width / iw;
            let suppressed = cells[fy * g.width + fx] == 0;
            let i = y * iw + x;
            let px = [image.chw[i], image.chw[plane + i], image.chw[2 * plane + i]];
            let tint = if suppressed { [1.0, 0.0, 0.0] } else { px };
            for c in 0..3 {
                let v = 0.5 * px[c] + 0.5 * tint[c];
                rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    image::save_buffer(path, &rgb, iw as u32, ih as u32, image::ExtendedColorType::Rgb8)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{BackboneKind, ModelConfig, Precision};
    use candle_core::Device;

    #[test]
    fn identical_masks_have_unit_iou_and_disjoint_zero() {
        let g = BlockGrid::new(6, 4, 3, 2).unwrap();
        let a = BlockMask::from_blocks(g, vec![vec![0], vec![1, 2]]).unwrap();
        let b = BlockMask::from_blocks(g, vec![vec![3], vec![1, 2]]).unwrap();
        let iou = pairwise_iou(&[a.clone(), a.clone(), b]);
        assert_eq!(iou[0][1], 1.0);
        assert_eq!(iou[0][2], 0.5);
        let stats = MaskStats::from_masks(&[a], 1);
        assert!(stats.pairs.is_empty());
    }

    #[test]
    fn untrained_model_yields_one_valid_map_per_stage() {
        let cfg = ModelConfig {
            backbone: BackboneKind::Toy,
            embed_dim: 8,
            stages: 3,
            normalize_embeddings: false,
            pretrained: None,
            precision: Precision::F64,
        };
        let m = PmmModel::build(&cfg, 5, (3, 2), 0).unwrap();
        let v: Vec<f64> = (0..2 * 3 * 96 * 32).map(|i| (i % 17) as f64 / 17.0).collect();
        let images = Tensor::from_vec(v, (2, 3, 96, 32), &Device::Cpu).unwrap();
        let maps = stage_attention(&m, &images, None).unwrap();
        assert_eq!(maps.len(), 3);
        for (t, g) in maps.iter().enumerate() {
            assert_eq!(g.dims(), (2, 6, 2));
            assert_eq!(g.source_stage, t);
            assert!(!g.is_attached());
            assert!(g.per_sample().unwrap().iter().flatten().all(|v| *v >= 0.0 && v.is_finite()));
        }
    }
}
