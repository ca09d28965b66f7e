//! Identity (label-smoothed cross-entropy) and batch-hard triplet losses.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featmix::LabelMix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Label smoothing, in [0, 1).
    pub epsilon: f64,
    /// Triplet hinge margin.
    pub margin: f64,
    /// Per-stage weights; empty means 1 for every stage.
    pub stage_weights: Vec<f64>,
    /// Mine triplets once on the concatenated stage embeddings instead of
    /// per stage.
    pub concat_triplet: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            margin: 1.2,
            stage_weights: Vec::new(),
            concat_triplet: false,
        }
    }
}

impl LossConfig {
    pub fn weights(&self, stages: usize) -> Vec<f64> {
        if self.stage_weights.is_empty() {
            vec![1.0; stages]
        } else {
            self.stage_weights.clone()
        }
    }
}

/// Soft targets: true class `1 - eps (C-1)/C`, others `eps/C`; mixed
/// samples blend two such rows by `lambda`.
fn smoothed_targets(n: usize, c: usize, mixes: &[LabelMix], eps: f64, dtype: DType) -> Result<Tensor> {
    let mut q = vec![eps / c as f64; n * c];
    for (i, m) in mixes.iter().enumerate() {
        for (label, weight) in [(m.label_a, m.lambda), (m.label_b, 1.0 - m.lambda)] {
            if label >= c {
                return Err(Error::InvalidLabel { label, num_classes: c });
            }
            q[i * c + label] += weight * (1.0 - eps);
        }
    }
    Ok(Tensor::from_vec(q, (n, c), &Device::Cpu)?.to_dtype(dtype)?)
}

fn cross_entropy(logits: &Tensor, mixes: &[LabelMix], eps: f64) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    if mixes.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} logits", mixes.len())));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!("label smoothing {eps} outside [0, 1)")));
    }
    let q = smoothed_targets(n, c, mixes, eps, logits.dtype())?;
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let log_probs = shifted.broadcast_sub(&lse)?;
    Ok((q * log_probs)?.sum(1)?.mean(0)?.neg()?)
}

/// Mean label-smoothed cross-entropy.
pub fn id_loss(logits: &Tensor, labels: &[usize], eps: f64) -> Result<Tensor> {
    let mixes: Vec<LabelMix> = labels
        .iter()
        .map(|&l| LabelMix {
            label_a: l,
            label_b: l,
            lambda: 1.0,
        })
        .collect();
    cross_entropy(logits, &mixes, eps)
}

/// `lambda * CE(label_a) + (1 - lambda) * CE(label_b)`, averaged.
pub fn id_loss_mixed(logits: &Tensor, mixes: &[LabelMix], eps: f64) -> Result<Tensor> {
    cross_entropy(logits, mixes, eps)
}

/// `N x N` Euclidean distances, `sqrt(max(|a - b|^2, 1e-12))`.
pub fn pairwise_distances(e: &Tensor) -> Result<Tensor> {
    let (n, d) = e.dims2()?;
    let diff = e.unsqueeze(1)?.broadcast_as((n, n, d))?.sub(&e.unsqueeze(0)?.broadcast_as((n, n, d))?)?;
    Ok(diff.sqr()?.sum(D::Minus1)?.clamp(1e-12, f64::MAX)?.sqrt()?)
}

/// Batch-hard triplet loss: per anchor the farthest positive and nearest
/// negative, hinge at `margin`, averaged over anchors.
pub fn triplet_loss(embeddings: &Tensor, labels: &[usize], margin: f64) -> Result<Tensor> {
    let (n, _) = embeddings.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} embeddings", labels.len())));
    }
    let dist = pairwise_distances(embeddings)?;
    let values = dist.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for i in 0..n {
        let hardest = |same: bool| {
            (0..n)
                .filter(|&j| j != i && (labels[j] == labels[i]) == same)
                .reduce(|a, b| {
                    let better = if same { values[i][b] > values[i][a] } else { values[i][b] < values[i][a] };
                    if better {
                        b
                    } else {
                        a
                    }
                })
        };
        let (p, q) = match (hardest(true), hardest(false)) {
            (Some(p), Some(q)) => (p, q),
            (None, _) => return Err(Error::DegenerateBatch(format!("sample {i} has no positive"))),
            (_, None) => return Err(Error::DegenerateBatch(format!("sample {i} has no negative"))),
        };
        pos.push((i * n + p) as u32);
        neg.push((i * n + q) as u32);
    }
    let flat = dist.flatten_all()?;
    let dp = flat.index_select(&Tensor::new(pos, &Device::Cpu)?, 0)?;
    let dn = flat.index_select(&Tensor::new(neg, &Device::Cpu)?, 0)?;
    Ok((dp - dn)?.affine(1.0, margin)?.relu()?.mean(0)?)
}

/// What a stage contributes to the objective.
#[derive(Debug, Clone, Copy)]
pub struct StageLossInput<'a> {
    pub logits: &'a Tensor,
    pub embedding: &'a Tensor,
    /// Mixed labels for this stage's input, if its mixing blended identities.
    pub mixes: Option<&'a [LabelMix]>,
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub id: Vec<f64>,
    /// Per stage, or a single entry when mined on the concatenated embedding.
    pub triplet: Vec<f64>,
}

impl LossBreakdown {
    pub fn total_value(&self) -> Result<f64> {
        Ok(self.total.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `sum_t w_t (id_t + triplet_t)`. Triplets use the true anchor labels.
pub fn total_loss(stages: &[StageLossInput<'_>], labels: &[usize], config: &LossConfig) -> Result<LossBreakdown> {
    if stages.is_empty() {
        return Err(Error::StageCountMismatch { expected: 1, got: 0 });
    }
    let weights = config.weights(stages.len());
    if weights.len() != stages.len() {
        return Err(Error::StageCountMismatch {
            expected: weights.len(),
            got: stages.len(),
        });
    }
    let mut total: Option<Tensor> = None;
    let mut add = |t: Tensor| -> Result<()> {
        total = Some(match total.take() {
            Some(acc) => (acc + t)?,
            None => t,
        });
        Ok(())
    };
    let mut id = Vec::with_capacity(stages.len());
    let mut triplet = Vec::with_capacity(stages.len());
    for (s, &w) in stages.iter().zip(&weights) {
        let l_id = match s.mixes {
            Some(m) => id_loss_mixed(s.logits, m, config.epsilon)?,
            None => id_loss(s.logits, labels, config.epsilon)?,
        };
        id.push(scalar(&l_id)?);
        if config.concat_triplet {
            add(l_id.affine(w, 0.0)?)?;
        } else {
            let l_tri = triplet_loss(s.embedding, labels, config.margin)?;
            triplet.push(scalar(&l_tri)?);
            add((l_id + l_tri)?.affine(w, 0.0)?)?;
        }
    }
    if config.concat_triplet {
        let all: Vec<&Tensor> = stages.iter().map(|s| s.embedding).collect();
        let l_tri = triplet_loss(&Tensor::cat(&all, 1)?, labels, config.margin)?;
        triplet.push(scalar(&l_tri)?);
        add(l_tri)?;
    }
    Ok(LossBreakdown {
        total: total.expect("at least one stage"),
        id,
        triplet,
    })
}
