//! Grad-CAM for a stage head, computed with respect to the feature map the
//! stage consumed, plus heatmap rendering.
//!
//! Attribution replays the head on a detached leaf copy of the stage input,
//! so its backward pass has its own gradient store and never reaches the
//! gradients that drive the parameter update.

use std::cell::Cell;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Mode, StageHead, StageOutput};

/// Anything that maps a stage input to class logits.
pub trait LogitHead {
    fn logits(&self, input: &Tensor, mode: Mode) -> Result<Tensor>;
    fn num_classes(&self) -> usize;
}

impl LogitHead for StageHead {
    fn logits(&self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward(input, mode)?.1)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Per-sample non-negative attribution over the spatial grid of a stage
/// input.
#[derive(Debug, Clone)]
pub struct GradCamMap {
    /// `N x H x W`.
    pub values: Tensor,
    pub target_class: Vec<usize>,
    pub source_stage: usize,
}

impl GradCamMap {
    /// Wraps plain values, e.g. for analysis of stored maps.
    pub fn from_values(values: Vec<f64>, dims: (usize, usize, usize), target_class: Vec<usize>, source_stage: usize) -> Result<Self> {
        let (n, h, w) = dims;
        if values.len() != n * h * w || target_class.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} values / {} targets for {n}x{h}x{w}",
                values.len(),
                target_class.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("attribution values must be non-negative".into()));
        }
        Ok(Self {
            values: Tensor::from_vec(values, dims, &Device::Cpu)?,
            target_class,
            source_stage,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.dims3().expect("attribution map is N x H x W")
    }

    /// Row-major values of every sample.
    pub fn per_sample(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.values.to_dtype(DType::F64)?.flatten_from(1)?.to_vec2::<f64>()?)
    }

    /// Whether the values still carry a differentiable link to the network.
    pub fn is_attached(&self) -> bool {
        self.values.track_op()
    }
}

thread_local! {
    static PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of attribution backward passes run on this thread.
pub fn attribution_passes() -> u64 {
    PASSES.with(|c| c.get())
}

/// `d(sum_n logits[n, target[n]]) / d(stage_input)`, taken on a detached
/// replay of the head. Samples are independent whenever the head's
/// normalization uses running statistics; under batch statistics the sum
/// also carries the cross-sample terms of the batch norm.
pub fn attribution_gradient<H: LogitHead + ?Sized>(head: &H, output: &StageOutput, targets: &[usize]) -> Result<Tensor> {
    let n = output.stage_input.dim(0)?;
    if targets.len() != n {
        return Err(Error::ShapeMismatch(format!("{} targets for a batch of {n}", targets.len())));
    }
    if let Some(&class) = targets.iter().find(|&&c| c >= head.num_classes()) {
        return Err(Error::InvalidClass {
            class,
            num_classes: head.num_classes(),
        });
    }
    if !output.stage_input.track_op() {
        return Err(Error::NoGradientPath);
    }
    let leaf = Var::from_tensor(&output.stage_input.detach())?;
    let mode = match output.mode {
        Mode::Eval => Mode::Eval,
        Mode::Train | Mode::TrainFrozenStats => Mode::TrainFrozenStats,
    };
    let logits = head.logits(leaf.as_tensor(), mode)?;
    let index = Tensor::from_iter(targets.iter().map(|&t| t as u32), &Device::Cpu)?.reshape((n, 1))?;
    let score = logits.gather(&index, 1)?.sum_all()?;
    let grads = score.backward()?;
    PASSES.with(|c| c.set(c.get() + 1));
    grads.get(leaf.as_tensor()).cloned().ok_or(Error::NoGradientPath)
}

/// Grad-CAM: channel weights are spatial means of the target-logit gradient;
/// the map is the rectified weighted channel sum, not renormalized. The
/// result stays linked to `stage_input`; see [`detach_map`].
pub fn grad_cam<H: LogitHead + ?Sized>(head: &H, output: &StageOutput, targets: &[usize]) -> Result<GradCamMap> {
    let grad = attribution_gradient(head, output, targets)?;
    let alpha = grad.mean_keepdim(3)?.mean_keepdim(2)?;
    let values = output.stage_input.broadcast_mul(&alpha)?.sum(1)?.relu()?;
    Ok(GradCamMap {
        values,
        target_class: targets.to_vec(),
        source_stage: output.stage,
    })
}

/// Same values, no gradient path back into the producing stage.
pub fn detach_map(g: &GradCamMap) -> GradCamMap {
    GradCamMap {
        values: g.values.detach(),
        target_class: g.target_class.clone(),
        source_stage: g.source_stage,
    }
}

/// Arg-max class per row of `N x C` logits.
pub fn predicted_classes(logits: &Tensor) -> Result<Vec<usize>> {
    Ok(logits
        .argmax(1)?
        .to_vec1::<u32>()?
        .into_iter()
        .map(|c| c as usize)
        .collect())
}

/// Bilinear resize of an `h x w` grid (half-pixel centers, edge clamped).
pub fn upsample_bilinear(values: &[f64], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let sample = |len: usize, olen: usize, o: usize| -> (usize, usize, f64) {
        let pos = ((o as f64 + 0.5) * len as f64 / olen as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let (y0, y1, fy) = sample(h, oh, oy);
        for ox in 0..ow {
            let (x0, x1, fx) = sample(w, ow, ox);
            let top = values[y0 * w + x0] * (1.0 - fx) + values[y0 * w + x1] * fx;
            let bottom = values[y1 * w + x0] * (1.0 - fx) + values[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Black, red, yellow, white ramp; luminance increases with `v`.
fn hot(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)]
}

#[derive(Debug, Clone, Serialize)]
pub struct HeatmapSidecar {
    pub sample_id: String,
    pub source_stage: usize,
    pub target_class: usize,
    pub raw_min: f64,
    pub raw_max: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct HeatmapFiles {
    pub heatmap: PathBuf,
    pub overlay: PathBuf,
    pub sidecar: PathBuf,
    /// Set when the map was constant and rendered as mid-gray.
    pub degenerate: bool,
}

/// Planar RGB image in [0, 1].
#[derive(Debug, Clone, Copy)]
pub struct ImageRef<'a> {
    pub chw: &'a [f32],
    pub height: usize,
    pub width: usize,
}

impl ImageRef<'_> {
    fn rgb(&self, y: usize, x: usize) -> [f64; 3] {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        [self.chw[i] as f64, self.chw[plane + i] as f64, self.chw[2 * plane + i] as f64]
    }
}

fn save_rgb(path: &Path, rgb: &[f64], width: usize, height: usize) -> Result<()> {
    let bytes: Vec<u8> = rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, width as u32, height as u32, image::ExtendedColorType::Rgb8)?;
    Ok(())
}

/// Writes `{stem}_stage{t}.png` (8-bit grayscale, min-max normalized and
/// upsampled to the image), `{stem}_stage{t}_overlay.png` and a JSON sidecar
/// with the raw range and target class. `t` is 1-based. A constant map is
/// written as uniform mid-gray with a warning.
pub fn render_heatmap(g: &GradCamMap, sample: usize, image: ImageRef<'_>, out_dir: &Path, stem: &str) -> Result<HeatmapFiles> {
    let (n, h, w) = g.dims();
    if sample >= n {
        return Err(Error::InvalidArgument(format!("sample {sample} outside batch of {n}")));
    }
    if image.chw.len() != 3 * image.height * image.width {
        return Err(Error::ShapeMismatch("image buffer does not match its size".into()));
    }
    let raw = &g.per_sample()?[sample];
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let degenerate = !(hi > lo);
    let normalized: Vec<f64> = if degenerate {
        log::warn!("{}", Error::DegenerateMap(lo));
        vec![0.5; raw.len()]
    } else {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    let (ih, iw) = (image.height, image.width);
    let up = upsample_bilinear(&normalized, (h, w), (ih, iw));

    std::fs::create_dir_all(out_dir)?;
    let base = format!("{stem}_stage{}", g.source_stage + 1);
    let heatmap = out_dir.join(format!("{base}.png"));
    let gray: Vec<u8> = up.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(&heatmap, &gray, iw as u32, ih as u32, image::ExtendedColorType::L8)?;

    let mut blend = Vec::with_capacity(3 * ih * iw);
    for y in 0..ih {
        for x in 0..iw {
            let px = image.rgb(y, x);
            let heat = hot(up[y * iw + x]);
            blend.extend((0..3).map(|c| 0.5 * px[c] + 0.5 * heat[c]));
        }
    }
    let overlay = out_dir.join(format!("{base}_overlay.png"));
    save_rgb(&overlay, &blend, iw, ih)?;

    let sidecar = out_dir.join(format!("{base}.json"));
    let meta = HeatmapSidecar {
        sample_id: stem.to_string(),
        source_stage: g.source_stage + 1,
        target_class: g.target_class[sample],
        raw_min: lo,
        raw_max: hi,
        degenerate,
    };
    std::fs::write(&sidecar, serde_json::to_string_pretty(&meta)?)?;
    Ok(HeatmapFiles {
        heatmap,
        overlay,
        sidecar,
        degenerate,
    })
}
