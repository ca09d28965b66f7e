//! P x Q identity-balanced batch sampling.

use rand::seq::index;
use rand::Rng;

use super::index::DatasetIndex;
use crate::error::{Error, Result};

/// Which index entries form a batch, grouped by identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub entries: Vec<usize>,
    pub labels: Vec<usize>,
    pub cam_ids: Vec<usize>,
}

impl BatchIndices {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Draws `p` distinct training identities and `q` images of each. Identities
/// with fewer than `q` images are completed by resampling with replacement.
pub fn sample_identity_balanced_batch<R: Rng + ?Sized>(
    index: &DatasetIndex,
    p: usize,
    q: usize,
    rng: &mut R,
) -> Result<BatchIndices> {
    if p < 2 {
        return Err(Error::InvalidArgument(
            "P must be at least 2 for negative mining".into(),
        ));
    }
    if q == 0 {
        return Err(Error::InvalidArgument("Q must be positive".into()));
    }
    let available = index.num_classes();
    if available < p {
        return Err(Error::InsufficientIdentities {
            required: p,
            available,
        });
    }
    let mut out = BatchIndices {
        entries: Vec::with_capacity(p * q),
        labels: Vec::with_capacity(p * q),
        cam_ids: Vec::with_capacity(p * q),
    };
    for label in index::sample(rng, available, p).into_iter() {
        let pool = index.train_entries_of(label);
        let picks: Vec<usize> = if pool.len() >= q {
            index::sample(rng, pool.len(), q).into_vec()
        } else {
            let mut picks: Vec<usize> = (0..pool.len()).collect();
            while picks.len() < q {
                picks.push(rng.gen_range(0..pool.len()));
            }
            picks
        };
        for i in picks {
            let entry = pool[i];
            out.entries.push(entry);
            out.labels.push(label);
            out.cam_ids.push(index.entries[entry].cam_id);
        }
    }
    Ok(out)
}
