//! Image decoding, preprocessing and batch assembly.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rayon::prelude::*;

use super::index::{DatasetIndex, Role};
use super::sampler::BatchIndices;
use crate::error::{Error, Result};

/// Decoded images above this total size are decoded per batch instead of
/// being held in memory.
const CACHE_LIMIT_BYTES: usize = 1 << 30;

/// One preprocessed image with its metadata.
#[derive(Debug, Clone)]
pub struct Sample {
    /// 3 x H x W, values in [0, 1].
    pub image: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub pid: i64,
    pub cam_id: usize,
    pub role: Role,
}

impl Sample {
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.image, (1, 3, self.height, self.width), &Device::Cpu)?
                .to_dtype(dtype)?,
        )
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// N x 3 x H x W.
    pub images: Tensor,
    /// Contiguous training labels.
    pub labels: Vec<usize>,
    pub cam_ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub flip: bool,
    pub pad: usize,
}

impl Augment {
    pub const NONE: Augment = Augment { flip: false, pad: 0 };
}

/// Decodes a file and resizes it to `height x width`, interleaved RGB bytes.
pub fn load_rgb(path: &std::path::Path, height: usize, width: usize) -> Result<Vec<u8>> {
    let img = image::open(path)?.to_rgb8();
    let img = if img.height() as usize == height && img.width() as usize == width {
        img
    } else {
        image::imageops::resize(
            &img,
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    Ok(img.into_raw())
}

/// Converts interleaved RGB bytes to planar floats in [0, 1] with optional
/// horizontal flip and a zero-padded random crop.
pub fn augment_to_chw<R: Rng + ?Sized>(
    rgb: &[u8],
    height: usize,
    width: usize,
    aug: Augment,
    rng: &mut R,
) -> Vec<f32> {
    let flip = aug.flip && rng.gen_bool(0.5);
    let (dy, dx) = if aug.pad > 0 {
        let range = 0..=(2 * aug.pad);
        (
            rng.gen_range(range.clone()) as isize - aug.pad as isize,
            rng.gen_range(range) as isize - aug.pad as isize,
        )
    } else {
        (0, 0)
    };
    let mut out = vec![0f32; 3 * height * width];
    for y in 0..height {
        let sy = y as isize + dy;
        if sy < 0 || sy >= height as isize {
            continue;
        }
        for x in 0..width {
            let fx = if flip { width - 1 - x } else { x };
            let sx = fx as isize + dx;
            if sx < 0 || sx >= width as isize {
                continue;
            }
            let src = (sy as usize * width + sx as usize) * 3;
            for c in 0..3 {
                out[(c * height + y) * width + x] = rgb[src + c] as f32 / 255.0;
            }
        }
    }
    out
}

/// Decodes a file at `height x width` into planar RGB in [0, 1].
pub fn load_chw(path: &std::path::Path, height: usize, width: usize) -> Result<Vec<f32>> {
    let rgb = load_rgb(path, height, width)?;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    Ok(augment_to_chw(&rgb, height, width, Augment::NONE, &mut rng))
}

/// `1 x 3 x H x W` tensor of a planar image.
pub fn chw_tensor(chw: &[f32], height: usize, width: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(chw, (1, 3, height, width), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Decoded view over a [`DatasetIndex`] at a fixed input resolution.
#[derive(Debug, Clone)]
pub struct ImageStore {
    index: Arc<DatasetIndex>,
    height: usize,
    width: usize,
    cache: Option<Arc<Vec<Vec<u8>>>>,
}

impl ImageStore {
    pub fn new(index: Arc<DatasetIndex>, height: usize, width: usize) -> Result<Self> {
        let bytes = index.entries.len() * height * width * 3;
        let cache = if bytes <= CACHE_LIMIT_BYTES {
            let decoded: Result<Vec<Vec<u8>>> = index
                .entries
                .par_iter()
                .map(|e| load_rgb(&e.path, height, width))
                .collect();
            Some(Arc::new(decoded?))
        } else {
            None
        };
        Ok(Self {
            index,
            height,
            width,
            cache,
        })
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn rgb(&self, entry: usize) -> Result<std::borrow::Cow<'_, [u8]>> {
        match &self.cache {
            Some(c) => Ok(std::borrow::Cow::Borrowed(&c[entry])),
            None => Ok(std::borrow::Cow::Owned(load_rgb(
                &self.index.entries[entry].path,
                self.height,
                self.width,
            )?)),
        }
    }

    pub fn sample(&self, entry: usize) -> Result<Sample> {
        let e = &self.index.entries[entry];
        let rgb = self.rgb(entry)?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        Ok(Sample {
            image: augment_to_chw(&rgb, self.height, self.width, Augment::NONE, &mut rng),
            height: self.height,
            width: self.width,
            pid: e.pid,
            cam_id: e.cam_id,
            role: e.role,
        })
    }

    /// Stacks the given entries into an `N x 3 x H x W` tensor, drawing
    /// augmentation randomness from `rng` in entry order.
    pub fn stack<R: Rng + ?Sized>(
        &self,
        entries: &[usize],
        aug: Augment,
        dtype: DType,
        rng: &mut R,
    ) -> Result<Tensor> {
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(entries.len() * 3 * h * w);
        for &e in entries {
            let rgb = self.rgb(e)?;
            if rgb.len() != h * w * 3 {
                return Err(Error::ShapeMismatch(format!(
                    "entry {e} decoded to {} bytes, expected {}",
                    rgb.len(),
                    h * w * 3
                )));
            }
            data.extend(augment_to_chw(&rgb, h, w, aug, rng));
        }
        Ok(Tensor::from_vec(data, (entries.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn batch<R: Rng + ?Sized>(
        &self,
        indices: &BatchIndices,
        aug: Augment,
        dtype: DType,
        rng: &mut R,
    ) -> Result<Batch> {
        Ok(Batch {
            images: self.stack(&indices.entries, aug, dtype, rng)?,
            labels: indices.labels.clone(),
            cam_ids: indices.cam_ids.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Vec<u8> {
        (0..h * w * 3).map(|i| (i % 251) as u8).collect()
    }

    #[test]
    fn no_augmentation_is_planar_copy() {
        let (h, w) = (4, 3);
        let rgb = ramp(h, w);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_to_chw(&rgb, h, w, Augment::NONE, &mut rng);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    assert_eq!(out[(c * h + y) * w + x], rgb[(y * w + x) * 3 + c] as f32 / 255.0);
                }
            }
        }
    }

    #[test]
    fn augmented_values_stay_in_unit_range() {
        let (h, w) = (8, 6);
        let rgb = vec![255u8; h * w * 3];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let out = augment_to_chw(&rgb, h, w, Augment { flip: true, pad: 3 }, &mut rng);
            assert_eq!(out.len(), 3 * h * w);
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
