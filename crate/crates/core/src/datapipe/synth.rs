//! Desk-scale synthetic re-identification dataset.
//!
//! Every identity carries two spatially disjoint cues, each sufficient on its
//! own to recognise it: a solid colour patch in the upper part of the frame
//! and a striped patch in the lower part. Backgrounds, a torso-like nuisance
//! patch, cue positions and per-camera photometry are randomised, so a model
//! has to find the cues. `cues.json` records the nominal cue regions.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::filename::format_market_filename;
use super::index::{GALLERY_DIR, QUERY_DIR, TRAIN_DIR};
use crate::error::{Error, Result};

pub const CUES_FILE: &str = "cues.json";

const STRIPE_PERIODS: [usize; 4] = [4, 6, 8, 12];
const STRIPE_COLORS: [[f32; 3]; 5] = [
    [0.95, 0.15, 0.15],
    [0.15, 0.9, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.9, 0.15],
    [0.95, 0.95, 0.95],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub num_ids: usize,
    pub imgs_per_id: usize,
    pub num_cams: usize,
    /// (height, width) in pixels.
    pub resolution: (usize, usize),
}

/// Axis-aligned region in pixel coordinates, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueRegions {
    pub upper: Rect,
    pub lower: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueAnnotations {
    pub resolution: [usize; 2],
    /// Keyed by the zero-padded raw pid.
    pub ids: BTreeMap<String, CueRegions>,
}

impl CueAnnotations {
    pub fn load(root: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(root.join(CUES_FILE))?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSummary {
    pub train: usize,
    pub query: usize,
    pub gallery: usize,
}

impl SyntheticSummary {
    pub fn total(&self) -> usize {
        self.train + self.query + self.gallery
    }
}

struct Geometry {
    height: usize,
    width: usize,
    jitter: usize,
    upper: Rect,
    lower: Rect,
    torso: Rect,
}

impl Geometry {
    fn new(height: usize, width: usize) -> Self {
        let fy = |f: f64| (f * height as f64).round() as usize;
        let fx = |f: f64| (f * width as f64).round() as usize;
        let jitter = (height / 64).max(1);
        Self {
            height,
            width,
            jitter,
            upper: Rect { y0: fy(0.06), x0: fx(0.15), y1: fy(0.22), x1: fx(0.85) },
            lower: Rect { y0: fy(0.76), x0: fx(0.15), y1: fy(0.93), x1: fx(0.85) },
            torso: Rect { y0: fy(0.32), x0: fx(0.2), y1: fy(0.68), x1: fx(0.8) },
        }
    }

    fn widened(&self, r: Rect) -> Rect {
        Rect {
            y0: r.y0.saturating_sub(self.jitter),
            x0: r.x0.saturating_sub(self.jitter),
            y1: (r.y1 + self.jitter).min(self.height),
            x1: (r.x1 + self.jitter).min(self.width),
        }
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32;
    let f = h6 - i as f32;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn upper_color(id: usize, num_ids: usize) -> [f32; 3] {
    let value = if id % 2 == 0 { 0.95 } else { 0.6 };
    hsv(id as f32 / num_ids as f32, 0.85, value)
}

fn render(
    geo: &Geometry,
    id: usize,
    num_ids: usize,
    cam: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    let (h, w) = (geo.height, geo.width);
    let scale = h as f32 / 192.0;
    let mut img = vec![[0f32; 3]; h * w];

    let base: f32 = rng.gen_range(0.25..0.65);
    let tint: [f32; 3] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
    let slope: f32 = rng.gen_range(-0.15..0.15);
    for y in 0..h {
        let g = base + slope * (y as f32 / h as f32 - 0.5);
        for x in 0..w {
            img[y * w + x] = [g + tint[0], g + tint[1], g + tint[2]];
        }
    }

    let shift = |r: Rect, rng: &mut ChaCha8Rng| {
        let j = geo.jitter as isize;
        let dy = rng.gen_range(-j..=j);
        let dx = rng.gen_range(-j..=j);
        let mv = |v: usize, d: isize, hi: usize| (v as isize + d).clamp(0, hi as isize) as usize;
        Rect { y0: mv(r.y0, dy, h), x0: mv(r.x0, dx, w), y1: mv(r.y1, dy, h), x1: mv(r.x1, dx, w) }
    };

    let torso = shift(geo.torso, rng);
    let torso_color = [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)];
    fill(&mut img, w, torso, |_, _| torso_color);

    let upper = shift(geo.upper, rng);
    let uc = upper_color(id, num_ids);
    fill(&mut img, w, upper, |_, _| uc);

    let lower = shift(geo.lower, rng);
    let period = ((STRIPE_PERIODS[id % STRIPE_PERIODS.len()] as f32 * scale).round() as usize).max(2);
    let sc = STRIPE_COLORS[(id / STRIPE_PERIODS.len()) % STRIPE_COLORS.len()];
    let dark = [0.08, 0.08, 0.08];
    fill(&mut img, w, lower, |y, _| if ((y - lower.y0) % period) < period / 2 { sc } else { dark });

    // camera photometry
    let gain = [1.0f32, 0.8, 1.15, 0.9][cam % 4];
    let cam_tint = [
        1.0 + 0.08 * (cam as f32 + 0.0).sin(),
        1.0 + 0.08 * (cam as f32 + 2.0).sin(),
        1.0 + 0.08 * (cam as f32 + 4.0).sin(),
    ];
    let noise = Normal::new(0.0f32, 0.02 + 0.015 * cam as f32).expect("valid sigma");
    let mut out = Vec::with_capacity(h * w * 3);
    for px in &img {
        for c in 0..3 {
            let v = px[c] * gain * cam_tint[c] + noise.sample(rng);
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

fn fill(img: &mut [[f32; 3]], w: usize, r: Rect, color: impl Fn(usize, usize) -> [f32; 3]) {
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            img[y * w + x] = color(y, x);
        }
    }
}

/// Writes a synthetic dataset under `root` in the Market-1501 layout.
///
/// Per identity the first half of the images is training data; of the rest
/// the first is a query and the others form the gallery. Image `j` is shot
/// by camera `j mod num_cams`, so every query has a cross-camera match.
pub fn generate_synthetic_dataset(root: &Path, spec: SyntheticSpec, seed: u64) -> Result<SyntheticSummary> {
    if spec.num_ids < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset needs at least 2 identities, got {}",
            spec.num_ids
        )));
    }
    if spec.imgs_per_id < 4 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset needs at least 4 images per identity, got {}",
            spec.imgs_per_id
        )));
    }
    if spec.num_cams < 2 {
        return Err(Error::InvalidArgument("synthetic dataset needs at least 2 cameras".into()));
    }
    let (h, w) = spec.resolution;
    if h < 32 || w < 16 {
        return Err(Error::InvalidArgument(format!("resolution {h}x{w} too small")));
    }
    if spec.num_ids > 9999 {
        return Err(Error::InvalidArgument("at most 9999 identities".into()));
    }

    let geo = Geometry::new(h, w);
    for dir in [TRAIN_DIR, QUERY_DIR, GALLERY_DIR] {
        std::fs::create_dir_all(root.join(dir))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = spec.imgs_per_id / 2;
    let mut summary = SyntheticSummary { train: 0, query: 0, gallery: 0 };
    let mut cues = CueAnnotations { resolution: [h, w], ids: BTreeMap::new() };

    for id in 0..spec.num_ids {
        let pid = id as i64 + 1;
        cues.ids.insert(
            format!("{pid:04}"),
            CueRegions { upper: geo.widened(geo.upper), lower: geo.widened(geo.lower) },
        );
        for j in 0..spec.imgs_per_id {
            let cam = j % spec.num_cams;
            let pixels = render(&geo, id, spec.num_ids, cam, &mut rng);
            let dir = if j < n_train {
                summary.train += 1;
                TRAIN_DIR
            } else if j == n_train {
                summary.query += 1;
                QUERY_DIR
            } else {
                summary.gallery += 1;
                GALLERY_DIR
            };
            let name = format_market_filename(pid, cam + 1, 1, j, 0, "png")?;
            image::save_buffer(
                root.join(dir).join(name),
                &pixels,
                w as u32,
                h as u32,
                image::ExtendedColorType::Rgb8,
            )?;
        }
    }
    std::fs::write(root.join(CUES_FILE), serde_json::to_string_pretty(&cues)?)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{build_index, Layout, Role};

    fn spec(num_ids: usize) -> SyntheticSpec {
        SyntheticSpec { num_ids, imgs_per_id: 8, num_cams: 2, resolution: (96, 32) }
    }

    fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    files.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn twenty_ids_give_160_images_and_20_labels() {
        let tmp = tempfile::tempdir().unwrap();
        let s = generate_synthetic_dataset(tmp.path(), spec(20), 0).unwrap();
        assert_eq!(s.total(), 160);
        let index = build_index(tmp.path(), Layout::Synthetic).unwrap();
        assert_eq!(index.num_classes(), 20);
        assert_eq!(index.count(Role::Query), 20);
        let cues = CueAnnotations::load(tmp.path()).unwrap();
        assert_eq!(cues.ids.len(), 20);
        let r = cues.ids["0001"];
        assert!(r.upper.y1 <= r.lower.y0, "cue regions must be disjoint");
    }

    #[test]
    fn single_identity_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            generate_synthetic_dataset(tmp.path(), spec(1), 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn same_seed_gives_byte_identical_trees() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let c = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(a.path(), spec(3), 7).unwrap();
        generate_synthetic_dataset(b.path(), spec(3), 7).unwrap();
        generate_synthetic_dataset(c.path(), spec(3), 8).unwrap();
        assert_eq!(tree(a.path()), tree(b.path()));
        assert_ne!(tree(a.path()), tree(c.path()));
    }

    #[test]
    fn every_query_has_a_cross_camera_match() {
        let tmp = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(tmp.path(), spec(4), 1).unwrap();
        let index = build_index(tmp.path(), Layout::Synthetic).unwrap();
        for q in index.indices(Role::Query) {
            let q = &index.entries[q];
            assert!(index
                .entries
                .iter()
                .any(|g| g.role == Role::Gallery && g.pid == q.pid && g.cam_id != q.cam_id));
        }
    }
}
