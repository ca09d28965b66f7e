//! Block grids, attention-ranked block masks and the feature-mixing
//! strategies applied between stages.

use std::cell::Cell;

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::attribution::GradCamMap;
use crate::error::{Error, Result};

/// How the input of a later stage is built from the previous stage input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixKind {
    /// Replace the anchor's top-K attended blocks with a negative's features.
    #[default]
    AHardMix,
    /// Zero K blocks (attention-ranked unless random cutout is requested).
    Cutout,
    /// Paste a random rectangle of blocks from another sample, mixing labels.
    CutmixFeature,
    /// Paste another sample's top-K attended blocks, mixing labels.
    ACutmixFeature,
    /// Feed the raw feature to every stage.
    None,
}

impl MixKind {
    pub const ALL: [MixKind; 5] = [
        MixKind::AHardMix,
        MixKind::Cutout,
        MixKind::CutmixFeature,
        MixKind::ACutmixFeature,
        MixKind::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MixKind::AHardMix => "a_hard_mix",
            MixKind::Cutout => "cutout",
            MixKind::CutmixFeature => "cutmix_feature",
            MixKind::ACutmixFeature => "a_cutmix_feature",
            MixKind::None => "none",
        }
    }

    /// Whether this kind consumes the previous stage's attribution.
    pub fn needs_attention(self, cutout_random: bool) -> bool {
        match self {
            MixKind::AHardMix | MixKind::ACutmixFeature => true,
            MixKind::Cutout => !cutout_random,
            MixKind::CutmixFeature | MixKind::None => false,
        }
    }

    /// Whether mixed samples carry two labels.
    pub fn mixes_labels(self) -> bool {
        matches!(self, MixKind::CutmixFeature | MixKind::ACutmixFeature)
    }
}

/// Which feature map a stage's mixing starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SourcePolicy {
    /// Stage t+1 mixes the already-mixed input of stage t.
    #[default]
    Progressive,
    /// Every stage mixes the raw backbone feature.
    Fresh,
}

/// Partition of an `H x W` feature map into `block_h x block_w` blocks,
/// numbered row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGrid {
    pub height: usize,
    pub width: usize,
    pub block_h: usize,
    pub block_w: usize,
}

impl BlockGrid {
    pub fn new(height: usize, width: usize, block_h: usize, block_w: usize) -> Result<Self> {
        if block_h == 0 || block_w == 0 || height % block_h != 0 || width % block_w != 0 {
            return Err(Error::GridMismatch(format!(
                "{height}x{width} map does not tile into {block_h}x{block_w} blocks"
            )));
        }
        Ok(Self {
            height,
            width,
            block_h,
            block_w,
        })
    }

    pub fn rows(&self) -> usize {
        self.height / self.block_h
    }

    pub fn cols(&self) -> usize {
        self.width / self.block_w
    }

    pub fn num_blocks(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn block_of(&self, y: usize, x: usize) -> usize {
        (y / self.block_h) * self.cols() + x / self.block_w
    }

    /// Flat cell indices covered by `block`.
    pub fn cells_of(&self, block: usize) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = (block / self.cols(), block % self.cols());
        (0..self.block_h).flat_map(move |dy| {
            let y = r * self.block_h + dy;
            (0..self.block_w).map(move |dx| y * self.width + c * self.block_w + dx)
        })
    }
}

/// Sum of the map over each block, in block order.
pub fn block_sums(values: &[f64], grid: &BlockGrid) -> Vec<f64> {
    let mut sums = vec![0.0; grid.num_blocks()];
    for (i, v) in values.iter().enumerate() {
        sums[grid.block_of(i / grid.width, i % grid.width)] += v;
    }
    sums
}

/// The `k` blocks with the largest sums, highest first. Equal sums go to
/// the smaller block index.
pub fn rank_blocks(values: &[f64], grid: &BlockGrid, k: usize) -> Result<Vec<usize>> {
    if values.len() != grid.cells() {
        return Err(Error::GridMismatch(format!(
            "{} values for a {}x{} grid",
            values.len(),
            grid.height,
            grid.width
        )));
    }
    if k == 0 || k > grid.num_blocks() {
        return Err(Error::KOutOfRange {
            k,
            max: grid.num_blocks(),
        });
    }
    let sums = block_sums(values, grid);
    let mut order: Vec<usize> = (0..sums.len()).collect();
    order.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Binary per-sample masks over a block grid: 0 marks a suppressed cell.
/// Every suppressed region is a union of whole blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMask {
    pub grid: BlockGrid,
    /// `N x H x W`, row-major, values 0 or 1.
    pub values: Vec<u8>,
    /// Suppressed block indices per sample, in the order they were chosen.
    pub blocks: Vec<Vec<usize>>,
}

impl BlockMask {
    pub fn from_blocks(grid: BlockGrid, blocks: Vec<Vec<usize>>) -> Result<Self> {
        let cells = grid.cells();
        let mut values = vec![1u8; blocks.len() * cells];
        for (n, chosen) in blocks.iter().enumerate() {
            for &b in chosen {
                if b >= grid.num_blocks() {
                    return Err(Error::GridMismatch(format!("block {b} outside a {}-block grid", grid.num_blocks())));
                }
                for cell in grid.cells_of(b) {
                    values[n * cells + cell] = 0;
                }
            }
        }
        Ok(Self { grid, values, blocks })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn sample(&self, n: usize) -> &[u8] {
        let cells = self.grid.cells();
        &self.values[n * cells..(n + 1) * cells]
    }

    /// Fraction of cells of sample `n` that keep their own features.
    pub fn kept_fraction(&self, n: usize) -> f64 {
        let s = self.sample(n);
        s.iter().filter(|&&v| v == 1).count() as f64 / s.len() as f64
    }

    /// `N x 1 x H x W` u8 tensor, broadcastable over channels.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.values,
            (self.len(), 1, self.grid.height, self.grid.width),
            &Device::Cpu,
        )?)
    }

    /// Intersection over union of the suppressed regions of two samples.
    pub fn suppressed_iou(a: &[u8], b: &[u8]) -> f64 {
        let inter = a.iter().zip(b).filter(|(x, y)| **x == 0 && **y == 0).count();
        let union = a.iter().zip(b).filter(|(x, y)| **x == 0 || **y == 0).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Masks suppressing the top-K attended blocks of every sample.
pub fn block_ranking(g: &GradCamMap, grid: &BlockGrid, k: usize) -> Result<BlockMask> {
    let (_, h, w) = g.dims();
    if (h, w) != (grid.height, grid.width) {
        return Err(Error::GridMismatch(format!(
            "attribution is {h}x{w}, grid is {}x{}",
            grid.height, grid.width
        )));
    }
    let blocks = g
        .per_sample()?
        .iter()
        .map(|v| rank_blocks(v, grid, k))
        .collect::<Result<Vec<_>>>()?;
    BlockMask::from_blocks(*grid, blocks)
}

/// Uniform draw among the batch indices whose pid differs from the anchor's.
pub fn select_negative<R: Rng + ?Sized>(pids: &[i64], anchor: usize, rng: &mut R) -> Result<usize> {
    let candidates: Vec<usize> = (0..pids.len()).filter(|&j| pids[j] != pids[anchor]).collect();
    if candidates.is_empty() {
        return Err(Error::NoNegativeAvailable(anchor));
    }
    Ok(candidates[rng.gen_range(0..candidates.len())])
}

/// `m * f_a + (1 - m) * f_n`, exact (a selection, not arithmetic).
pub fn hard_mix(f_a: &Tensor, f_n: &Tensor, mask: &BlockMask) -> Result<Tensor> {
    let (n, _, h, w) = f_a.dims4()?;
    if f_n.dims() != f_a.dims() {
        return Err(Error::ShapeMismatch(format!(
            "anchor {:?} and negative {:?} differ",
            f_a.dims(),
            f_n.dims()
        )));
    }
    if mask.len() != n || (mask.grid.height, mask.grid.width) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{}x{} does not fit features {:?}",
            mask.len(),
            mask.grid.height,
            mask.grid.width,
            f_a.dims()
        )));
    }
    let m = mask.to_tensor()?.broadcast_as(f_a.shape())?;
    Ok(m.where_cond(f_a, f_n)?)
}

/// Labels of a mixed sample: `lambda` of `label_a`, the rest of `label_b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelMix {
    pub label_a: usize,
    pub label_b: usize,
    pub lambda: f64,
}

/// Settings of one mixing strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixStrategy {
    pub kind: MixKind,
    pub k: usize,
    /// Cutout picks K blocks uniformly instead of the attended ones.
    pub cutout_random: bool,
    /// Beta parameter of the CutMix area draw.
    pub cutmix_alpha: f64,
}

impl MixStrategy {
    pub fn from_config(mix: &crate::config::MixConfig) -> Self {
        Self {
            kind: mix.kind,
            k: mix.k,
            cutout_random: mix.cutout_random,
            cutmix_alpha: mix.cutmix_alpha,
        }
    }
}

/// Result of mixing one stage transition.
#[derive(Debug, Clone)]
pub struct MixOutcome {
    pub features: Tensor,
    pub mask: Option<BlockMask>,
    /// Donor batch index per sample, when features were borrowed.
    pub donors: Option<Vec<usize>>,
    /// Present for label-mixing kinds.
    pub labels: Option<Vec<LabelMix>>,
}

thread_local! {
    static INVOCATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`apply_strategy`] calls made on this thread.
pub fn strategy_invocations() -> u64 {
    INVOCATIONS.with(|c| c.get())
}

fn random_blocks<R: Rng + ?Sized>(grid: &BlockGrid, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > grid.num_blocks() {
        return Err(Error::KOutOfRange {
            k,
            max: grid.num_blocks(),
        });
    }
    Ok(rand::seq::index::sample(rng, grid.num_blocks(), k).into_vec())
}

fn other_index<R: Rng + ?Sized>(n: usize, i: usize, rng: &mut R) -> Result<usize> {
    if n < 2 {
        return Err(Error::DegenerateBatch("mixing needs at least two samples".into()));
    }
    let j = rng.gen_range(0..n - 1);
    Ok(if j >= i { j + 1 } else { j })
}

/// A rectangle of whole blocks whose area follows the CutMix rule
/// (`1 - lambda`, `lambda ~ Beta(alpha, alpha)`), clipped to the grid.
fn cutmix_blocks<R: Rng + ?Sized>(grid: &BlockGrid, alpha: f64, rng: &mut R) -> Result<Vec<usize>> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::InvalidArgument(format!("cutmix alpha: {e}")))?;
    let lambda: f64 = beta.sample(rng);
    let ratio = (1.0 - lambda).sqrt();
    let (rows, cols) = (grid.rows() as f64, grid.cols() as f64);
    let (ch, cw) = (rows * ratio, cols * ratio);
    let (cy, cx) = (rng.gen_range(0.0..rows), rng.gen_range(0.0..cols));
    let y0 = (cy - ch / 2.0).round().clamp(0.0, rows) as usize;
    let y1 = (cy + ch / 2.0).round().clamp(0.0, rows) as usize;
    let x0 = (cx - cw / 2.0).round().clamp(0.0, cols) as usize;
    let x1 = (cx + cw / 2.0).round().clamp(0.0, cols) as usize;
    Ok((y0..y1)
        .flat_map(|r| (x0..x1).map(move |c| r * grid.cols() + c))
        .collect())
}

/// Mixes `f_a` (`N x C x H x W`) for the next stage.
///
/// `pids` are the identities of the batch (negatives must differ),
/// `labels` the matching class indices, `attention` the detached map of the
/// stage that consumed `f_a`.
pub fn apply_strategy<R: Rng + ?Sized>(
    strategy: &MixStrategy,
    f_a: &Tensor,
    pids: &[i64],
    labels: &[usize],
    attention: Option<&GradCamMap>,
    grid: &BlockGrid,
    rng: &mut R,
) -> Result<MixOutcome> {
    INVOCATIONS.with(|c| c.set(c.get() + 1));
    let (n, _, h, w) = f_a.dims4()?;
    if pids.len() != n || labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} pids / {} labels for a batch of {n}",
            pids.len(),
            labels.len()
        )));
    }
    if (h, w) != (grid.height, grid.width) {
        return Err(Error::GridMismatch(format!(
            "features are {h}x{w}, grid is {}x{}",
            grid.height, grid.width
        )));
    }
    let attended = |kind: MixKind| -> Result<&GradCamMap> {
        let g = attention.ok_or_else(|| Error::InvalidArgument(format!("{} needs an attribution map", kind.as_str())))?;
        if g.is_attached() {
            return Err(Error::InvalidArgument("attribution map must be detached before mixing".into()));
        }
        Ok(g)
    };
    let gather = |donors: &[usize]| -> Result<Tensor> {
        let idx = Tensor::from_iter(donors.iter().map(|&d| d as u32), &Device::Cpu)?;
        Ok(f_a.index_select(&idx, 0)?)
    };
    let mixed_labels = |mask: &BlockMask, donors: &[usize]| -> Vec<LabelMix> {
        (0..n)
            .map(|i| LabelMix {
                label_a: labels[i],
                label_b: labels[donors[i]],
                lambda: mask.kept_fraction(i),
            })
            .collect()
    };

    match strategy.kind {
        MixKind::None => Ok(MixOutcome {
            features: f_a.clone(),
            mask: None,
            donors: None,
            labels: None,
        }),
        MixKind::AHardMix => {
            let mask = block_ranking(attended(strategy.kind)?, grid, strategy.k)?;
            let donors = (0..n)
                .map(|i| select_negative(pids, i, rng))
                .collect::<Result<Vec<_>>>()?;
            let features = hard_mix(f_a, &gather(&donors)?, &mask)?;
            Ok(MixOutcome {
                features,
                mask: Some(mask),
                donors: Some(donors),
                labels: None,
            })
        }
        MixKind::Cutout => {
            let mask = if strategy.cutout_random {
                let blocks = (0..n)
                    .map(|_| random_blocks(grid, strategy.k, rng))
                    .collect::<Result<Vec<_>>>()?;
                BlockMask::from_blocks(*grid, blocks)?
            } else {
                block_ranking(attended(strategy.kind)?, grid, strategy.k)?
            };
            let features = hard_mix(f_a, &f_a.zeros_like()?, &mask)?;
            Ok(MixOutcome {
                features,
                mask: Some(mask),
                donors: None,
                labels: None,
            })
        }
        MixKind::CutmixFeature => {
            let mut donors = Vec::with_capacity(n);
            let mut blocks = Vec::with_capacity(n);
            for i in 0..n {
                donors.push(other_index(n, i, rng)?);
                blocks.push(cutmix_blocks(grid, strategy.cutmix_alpha, rng)?);
            }
            let mask = BlockMask::from_blocks(*grid, blocks)?;
            let features = hard_mix(f_a, &gather(&donors)?, &mask)?;
            let labels = mixed_labels(&mask, &donors);
            Ok(MixOutcome {
                features,
                mask: Some(mask),
                donors: Some(donors),
                labels: Some(labels),
            })
        }
        MixKind::ACutmixFeature => {
            let g = attended(strategy.kind)?;
            let ranked = block_ranking(g, grid, strategy.k)?;
            let donors = (0..n).map(|i| other_index(n, i, rng)).collect::<Result<Vec<_>>>()?;
            // each anchor receives its donor's most attended blocks
            let blocks = donors.iter().map(|&d| ranked.blocks[d].clone()).collect();
            let mask = BlockMask::from_blocks(*grid, blocks)?;
            let features = hard_mix(f_a, &gather(&donors)?, &mask)?;
            let labels = mixed_labels(&mask, &donors);
            Ok(MixOutcome {
                features,
                mask: Some(mask),
                donors: Some(donors),
                labels: Some(labels),
            })
        }
    }
}
