//! Descriptor extraction and cross-camera retrieval metrics.

use std::io::Write;
use std::path::Path;

use candle_core::DType;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::{Augment, ImageStore};
use crate::error::{Error, Result};
use crate::model::PmmModel;

/// Row-major `rows x dim` matrix of descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl DescriptorMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!("{} values for {rows}x{dim}", data.len())));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Identity and camera of a query or gallery item. `pid = -1` is junk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemMeta {
    pub pid: i64,
    pub cam_id: usize,
}

/// Evaluation-mode descriptors of index entries, `batch_size` images at a
/// time. Values do not depend on the batching.
pub fn extract_descriptors(model: &PmmModel, store: &ImageStore, entries: &[usize], batch_size: usize) -> Result<DescriptorMatrix> {
    let dim = model.embed_dim() * model.num_stages();
    let mut data = Vec::with_capacity(entries.len() * dim);
    // augmentation is off, so the rng is never consulted
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    for chunk in entries.chunks(batch_size.max(1)) {
        let images = store.stack(chunk, Augment::NONE, model.dtype, &mut rng)?;
        let d = model.descriptor(&images)?;
        data.extend(d.values.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
    }
    DescriptorMatrix::new(entries.len(), dim, data)
}

pub fn item_meta(store: &ImageStore, entries: &[usize]) -> Vec<ItemMeta> {
    entries
        .iter()
        .map(|&e| {
            let entry = &store.index().entries[e];
            ItemMeta {
                pid: entry.pid,
                cam_id: entry.cam_id,
            }
        })
        .collect()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    /// Every gallery index per query, by ascending distance (ties by index).
    pub orders: Vec<Vec<usize>>,
    /// Average precision per query; `None` for queries without a valid match.
    pub ap: Vec<Option<f64>>,
    /// `cmc[k]`: fraction of evaluated queries matched within the top `k+1`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_queries: usize,
    pub num_dropped: usize,
}

impl RankingResult {
    /// CMC at 1-based rank `k`; beyond the gallery size the curve is flat.
    pub fn rank(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[k.clamp(1, n) - 1],
        }
    }

    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            rank1: self.rank(1),
            rank5: self.rank(5),
            rank10: self.rank(10),
            map: self.map,
            num_queries: self.num_queries,
            num_dropped: self.num_dropped,
        }
    }
}

/// Euclidean ranking with junk removal and same-camera exclusion.
pub fn evaluate(query: &DescriptorMatrix, query_meta: &[ItemMeta], gallery: &DescriptorMatrix, gallery_meta: &[ItemMeta]) -> Result<RankingResult> {
    if query.rows != query_meta.len() || gallery.rows != gallery_meta.len() {
        return Err(Error::ShapeMismatch("descriptor rows and metadata differ".into()));
    }
    if query.rows > 0 && gallery.rows > 0 && query.dim != gallery.dim {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} vs gallery dim {}",
            query.dim, gallery.dim
        )));
    }
    let g = gallery.rows;
    let per_query: Vec<(Vec<usize>, Option<(f64, usize)>)> = (0..query.rows)
        .into_par_iter()
        .map(|qi| {
            let q = query.row(qi);
            let dist: Vec<f64> = (0..g).map(|j| euclidean(q, gallery.row(j))).collect();
            let mut order: Vec<usize> = (0..g).collect();
            order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
            let meta = query_meta[qi];
            let mut hits = 0usize;
            let mut precision_sum = 0.0;
            let mut first_hit = None;
            let mut position = 0usize;
            for &j in &order {
                let gm = gallery_meta[j];
                if gm.pid == -1 || (gm.pid == meta.pid && gm.cam_id == meta.cam_id) {
                    continue;
                }
                position += 1;
                if gm.pid == meta.pid {
                    hits += 1;
                    precision_sum += hits as f64 / position as f64;
                    first_hit.get_or_insert(position);
                }
            }
            let stats = first_hit.map(|first| (precision_sum / hits as f64, first));
            (order, stats)
        })
        .collect();

    let mut cmc = vec![0.0; g];
    let mut ap = Vec::with_capacity(query.rows);
    let mut orders = Vec::with_capacity(query.rows);
    let mut dropped = 0;
    for (qi, (order, stats)) in per_query.into_iter().enumerate() {
        orders.push(order);
        match stats {
            Some((p, first)) => {
                ap.push(Some(p));
                for c in &mut cmc[first - 1..] {
                    *c += 1.0;
                }
            }
            None => {
                log::warn!("{}", Error::NoValidGallery(qi));
                dropped += 1;
                ap.push(None);
            }
        }
    }
    let evaluated = query.rows - dropped;
    let (map, cmc) = if evaluated == 0 {
        (0.0, cmc)
    } else {
        (
            ap.iter().flatten().sum::<f64>() / evaluated as f64,
            cmc.into_iter().map(|c| c / evaluated as f64).collect(),
        )
    };
    Ok(RankingResult {
        orders,
        ap,
        cmc,
        map,
        num_queries: evaluated,
        num_dropped: dropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub num_queries: usize,
    pub num_dropped: usize,
}

pub fn write_results(path: &Path, summary: &EvalSummary) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(())
}

/// One line per query: index, pid, camera and AP (empty when dropped).
pub fn write_per_query_csv(path: &Path, result: &RankingResult, query_meta: &[ItemMeta]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "query,pid,cam_id,ap")?;
    for (i, (ap, m)) in result.ap.iter().zip(query_meta).enumerate() {
        match ap {
            Some(v) => writeln!(f, "{i},{},{},{v}", m.pid, m.cam_id)?,
            None => writeln!(f, "{i},{},{},", m.pid, m.cam_id)?,
        }
    }
    f.flush()?;
    Ok(())
}

/// Extracts query and gallery descriptors from `store` and ranks them.
pub fn evaluate_split(model: &PmmModel, store: &ImageStore, batch_size: usize) -> Result<(RankingResult, Vec<ItemMeta>)> {
    use crate::datapipe::Role;
    let q = store.index().indices(Role::Query);
    let g = store.index().indices(Role::Gallery);
    let qd = extract_descriptors(model, store, &q, batch_size)?;
    let gd = extract_descriptors(model, store, &g, batch_size)?;
    let qm = item_meta(store, &q);
    let result = evaluate(&qd, &qm, &gd, &item_meta(store, &g))?;
    Ok((result, qm))
}
