//! Seeded synthetic crops: a stick figure, its skeleton, a yellow PPE patch
//! over the joints of interest for positives, and same-sized yellow decoys
//! elsewhere.
//!
//! Coordinates. The person box is `image_size` wide and
//! `image_size / (bottom - top)` tall, with its origin at the top-left
//! corner, so the crop band maps one-to-one onto the image. Keypoints are
//! stored in person-box coordinates.
//!
//! Skeleton jitter bands (fractions of person height unless noted):
//!
//! | joint         | y band        | x (fraction of width, from centre) |
//! |---------------|---------------|------------------------------------|
//! | head_top      | 0.020 – 0.050 | ±0.03                              |
//! | head          | 0.070 – 0.120 | ±0.03                              |
//! | nose          | head + 0.005 – 0.015 | ±0.02                       |
//! | chin          | head + 0.040 – 0.055 | ±0.02                       |
//! | neck          | 0.160 – 0.190 | ±0.02                              |
//! | shoulders     | 0.190 – 0.220 | 0.10 – 0.14                        |
//! | elbows        | 0.330 – 0.370 | 0.13 – 0.18                        |
//! | wrists        | 0.450 – 0.500 | 0.14 – 0.20                        |
//! | hips          | 0.500 – 0.540 | 0.05 – 0.08                        |
//! | knees         | 0.700 – 0.740 | 0.05 – 0.09                        |
//! | ankles        | 0.880 – 0.950 | 0.05 – 0.10                        |
//!
//! The figure centre itself is jittered by ±0.06 of the width.
//!
//! Colours. Backgrounds draw every channel from `[0, 0.45]` and figures
//! have blue at least 0.5, so after noise of amplitude ≤ 0.25 no pixel
//! outside a patch passes [`is_ppe_hue`]; patch pixels are pure yellow and
//! always pass. Yellow pixels therefore come from patches only.

use crate::supervision::{crop_region, joint_rect, pseudo_gt_mask, AttentionMask, PpeTypeConfig, Rect, Skeleton, SupervisionError};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Supervision(#[from] SupervisionError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "default_n")]
    pub n_samples: usize,
    #[serde(default = "default_half")]
    pub positive_fraction: f64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default)]
    pub ppe: PpeTypeConfig,
    #[serde(default = "default_half")]
    pub distractor_probability: f64,
    #[serde(default = "default_noise")]
    pub noise_amplitude: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_n() -> usize {
    1000
}
fn default_half() -> f64 {
    0.5
}
fn default_image_size() -> usize {
    64
}
fn default_noise() -> f64 {
    0.1
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: default_n(),
            positive_fraction: 0.5,
            image_size: 64,
            ppe: PpeTypeConfig::default(),
            distractor_probability: 0.5,
            noise_amplitude: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad(format!("positive_fraction must lie in (0, 1), got {}", self.positive_fraction));
        }
        if !(0.0..=1.0).contains(&self.distractor_probability) {
            return bad(format!(
                "distractor_probability must lie in [0, 1], got {}",
                self.distractor_probability
            ));
        }
        if !(0.0..=MAX_NOISE).contains(&self.noise_amplitude) {
            return bad(format!("noise_amplitude must lie in [0, {MAX_NOISE}], got {}", self.noise_amplitude));
        }
        if self.image_size < 16 {
            return bad(format!("image_size must be at least 16, got {}", self.image_size));
        }
        self.ppe.validate()?;
        Ok(())
    }

    /// Person box whose crop band covers the whole image.
    pub fn person_box(&self) -> Rect {
        let s = self.image_size as f64;
        let (top, bottom) = self.ppe.crop_band;
        Rect::new(0.0, 0.0, s, s / (bottom - top))
    }

    pub fn positives(&self) -> usize {
        (self.n_samples as f64 * self.positive_fraction).round() as usize
    }
}

/// Largest noise amplitude that keeps non-patch pixels off the PPE hue.
pub const MAX_NOISE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `3×S×S`, channel-major, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: u8,
    pub skeleton: Skeleton,
    pub person_box: Rect,
}

impl Sample {
    pub fn crop(&self, ppe: &PpeTypeConfig) -> Result<Rect, SupervisionError> {
        crop_region(&self.person_box, ppe)
    }

    /// Pseudo-ground-truth mask at `h×w`, or `None` if the sample has no
    /// usable joints.
    pub fn pseudo_gt(&self, ppe: &PpeTypeConfig, h: usize, w: usize) -> Option<AttentionMask> {
        let crop = self.crop(ppe).ok()?;
        pseudo_gt_mask(&self.skeleton, ppe, &crop, h, w).ok()
    }
}

/// Saturated yellow with noise tolerance.
pub fn is_ppe_hue(r: f32, g: f32, b: f32) -> bool {
    r >= 0.75 && g >= 0.75 && b <= 0.25
}

/// Inclusive pixel bounds `(x0, y0, x1, y1)` of the pixels whose centres
/// fall inside `rect`, or `None` if there are none.
pub fn pixel_span(rect: &Rect, size: usize) -> Option<(usize, usize, usize, usize)> {
    let axis = |a: f64, b: f64| {
        let lo = (a - 0.5).ceil().max(0.0);
        let hi = (b - 0.5).floor().min(size as f64 - 1.0);
        (lo <= hi).then_some((lo as usize, hi as usize))
    };
    let (x0, x1) = axis(rect.x0, rect.x1)?;
    let (y0, y1) = axis(rect.y0, rect.y1)?;
    Some((x0, y0, x1, y1))
}

/// Number of PPE-hue pixels whose centres fall inside `rect`, and the number
/// of pixels considered.
pub fn hue_count_in(image: &Tensor<f32>, rect: &Rect) -> (usize, usize) {
    let s = image.shape()[1];
    let Some((x0, y0, x1, y1)) = pixel_span(rect, s) else {
        return (0, 0);
    };
    let d = image.data();
    let mut hits = 0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let i = y * s + x;
            if is_ppe_hue(d[i], d[s * s + i], d[2 * s * s + i]) {
                hits += 1;
            }
        }
    }
    (hits, (x1 - x0 + 1) * (y1 - y0 + 1))
}

pub fn hue_count(image: &Tensor<f32>) -> usize {
    let s = image.shape()[1];
    hue_count_in(image, &Rect::new(0.0, 0.0, s as f64, s as f64)).0
}

/// Draws a skeleton inside a person box of width `w` and height `h`.
pub fn random_skeleton<R: Rng + ?Sized>(rng: &mut R, w: f64, h: f64) -> Skeleton {
    let cx = w * (0.5 + rng.gen_range(-0.06..0.06));
    let mut kp = BTreeMap::new();
    let mut put = |name: &str, x: f64, y: f64| {
        kp.insert(name.to_string(), [x.clamp(0.0, w), y.clamp(0.0, h)]);
    };
    let band = |rng: &mut R, lo: f64, hi: f64| rng.gen_range(lo..hi);

    let head_y = band(rng, 0.070, 0.120) * h;
    put("head_top", cx + band(rng, -0.03, 0.03) * w, band(rng, 0.020, 0.050) * h);
    put("head", cx + band(rng, -0.03, 0.03) * w, head_y);
    put("nose", cx + band(rng, -0.02, 0.02) * w, head_y + band(rng, 0.005, 0.015) * h);
    put("chin", cx + band(rng, -0.02, 0.02) * w, head_y + band(rng, 0.040, 0.055) * h);
    put("neck", cx + band(rng, -0.02, 0.02) * w, band(rng, 0.160, 0.190) * h);
    let pairs: [(&str, (f64, f64), (f64, f64)); 5] = [
        ("shoulder", (0.190, 0.220), (0.10, 0.14)),
        ("elbow", (0.330, 0.370), (0.13, 0.18)),
        ("wrist", (0.450, 0.500), (0.14, 0.20)),
        ("hip", (0.500, 0.540), (0.05, 0.08)),
        ("knee", (0.700, 0.740), (0.05, 0.09)),
    ];
    for (joint, (ylo, yhi), (xlo, xhi)) in pairs {
        for (side, sign) in [("l", -1.0), ("r", 1.0)] {
            let x = cx + sign * band(rng, xlo, xhi) * w;
            put(&format!("{side}_{joint}"), x, band(rng, ylo, yhi) * h);
        }
    }
    for (side, sign) in [("l", -1.0), ("r", 1.0)] {
        let x = cx + sign * band(rng, 0.05, 0.10) * w;
        put(&format!("{side}_ankle"), x, band(rng, 0.880, 0.950) * h);
    }
    Skeleton::new(kp).expect("generated keypoints are finite and non-negative")
}

const LIMBS: [(&str, &str); 12] = [
    ("head", "neck"),
    ("l_shoulder", "r_shoulder"),
    ("l_shoulder", "l_elbow"),
    ("l_elbow", "l_wrist"),
    ("r_shoulder", "r_elbow"),
    ("r_elbow", "r_wrist"),
    ("l_hip", "r_hip"),
    ("l_hip", "l_knee"),
    ("l_knee", "l_ankle"),
    ("r_hip", "r_knee"),
    ("r_knee", "r_ankle"),
    ("neck", "l_hip"),
];

struct Canvas {
    size: usize,
    rgb: Vec<[f32; 3]>,
}

impl Canvas {
    fn new(size: usize, fill: [f32; 3]) -> Self {
        Self {
            size,
            rgb: vec![fill; size * size],
        }
    }

    fn paint_where(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, colour: [f32; 3], inside: impl Fn(f64, f64) -> bool) {
        let s = self.size as f64;
        let lo_x = x0.floor().max(0.0) as usize;
        let lo_y = y0.floor().max(0.0) as usize;
        let hi_x = x1.ceil().min(s) as usize;
        let hi_y = y1.ceil().min(s) as usize;
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.rgb[y * self.size + x] = colour;
                }
            }
        }
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), thickness: f64, colour: [f32; 3]) {
        let r = thickness / 2.0;
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        self.paint_where(
            a.0.min(b.0) - r,
            a.1.min(b.1) - r,
            a.0.max(b.0) + r,
            a.1.max(b.1) + r,
            colour,
            |px, py| {
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
                };
                let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
                qx * qx + qy * qy <= r * r
            },
        );
    }

    fn disk(&mut self, c: (f64, f64), r: f64, colour: [f32; 3]) {
        self.paint_where(c.0 - r, c.1 - r, c.0 + r, c.1 + r, colour, |px, py| {
            (px - c.0).powi(2) + (py - c.1).powi(2) <= r * r
        });
    }

    fn block(&mut self, x0: usize, y0: usize, w: usize, h: usize, colour: [f32; 3]) {
        for y in y0..y0 + h {
            self.rgb[y * self.size + x0..y * self.size + x0 + w].fill(colour);
        }
    }

    fn into_tensor<R: Rng + ?Sized>(self, rng: &mut R, noise: f64) -> Tensor<f32> {
        let n = self.size * self.size;
        let mut data = vec![0.0f32; 3 * n];
        for (i, px) in self.rgb.iter().enumerate() {
            for c in 0..3 {
                let jitter = if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
                data[c * n + i] = (px[c] as f64 + jitter).clamp(0.0, 1.0) as f32;
            }
        }
        Tensor::new(&[3, self.size, self.size], data).expect("canvas size matches")
    }
}

const YELLOW: [f32; 3] = [1.0, 1.0, 0.0];

/// Geometry of a rendered sample beyond what [`Sample`] records.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderInfo {
    /// Joint region in image coordinates.
    pub joint_region: Rect,
    /// Inclusive pixel bounds of the PPE patch footprint.
    pub patch_pixels: (usize, usize, usize, usize),
    /// Inclusive pixel bounds of the decoy, if one was drawn.
    pub decoy_pixels: Option<(usize, usize, usize, usize)>,
}

/// Top-left corners where a `w×h` block neither overlaps nor touches the
/// inclusive pixel box `keep`.
fn decoy_positions(size: usize, w: usize, h: usize, keep: (usize, usize, usize, usize)) -> Vec<(usize, usize)> {
    let (kx0, ky0, kx1, ky1) = keep;
    let mut out = Vec::new();
    if w > size || h > size {
        return out;
    }
    for y in 0..=size - h {
        for x in 0..=size - w {
            let apart_x = x + w < kx0 || x > kx1 + 1;
            let apart_y = y + h < ky0 || y > ky1 + 1;
            if apart_x || apart_y {
                out.push((x, y));
            }
        }
    }
    out
}

/// Renders one sample, drawing the decoy decision from `rng`.
pub fn render_sample<R: Rng + ?Sized>(rng: &mut R, config: &SynthConfig, label: u8, id: u64) -> Result<Sample, SynthError> {
    render_with(rng, config, label, id, None).map(|(s, _)| s)
}

/// Renders one sample. `decoy` overrides the random decoy decision (the
/// random draw is still consumed so the remaining stream is unchanged).
pub fn render_with<R: Rng + ?Sized>(
    rng: &mut R,
    config: &SynthConfig,
    label: u8,
    id: u64,
    decoy: Option<bool>,
) -> Result<(Sample, RenderInfo), SynthError> {
    config.validate()?;
    let size = config.image_size;
    let person_box = config.person_box();
    let crop = crop_region(&person_box, &config.ppe)?;
    let skeleton = random_skeleton(rng, person_box.width(), person_box.height());

    let background = [0; 3].map(|_| rng.gen_range(0.0..=0.45f32));
    let figure = [rng.gen_range(0.0..=0.6f32), rng.gen_range(0.0..=0.6f32), rng.gen_range(0.5..=1.0f32)];
    let mut canvas = Canvas::new(size, background);

    let to_img = |(x, y): (f64, f64)| (x - crop.x0, y - crop.y0);
    let ph = person_box.height();
    let thickness = (0.025 * ph).max(2.0);
    for (a, b) in LIMBS {
        if let (Some(pa), Some(pb)) = (skeleton.get(a), skeleton.get(b)) {
            canvas.segment(to_img(pa), to_img(pb), thickness, figure);
        }
    }
    if let Some(head) = skeleton.get("head") {
        canvas.disk(to_img(head), 0.04 * ph, figure);
    }

    let region = joint_rect(&skeleton, &config.ppe, &crop)?;
    let patch = pixel_span(&region, size)
        .ok_or_else(|| SynthError::Config(format!("joint region {region:?} covers no pixel")))?;
    let (px0, py0, px1, py1) = patch;
    let (pw, phh) = (px1 - px0 + 1, py1 - py0 + 1);
    if label == 1 {
        canvas.block(px0, py0, pw, phh, YELLOW);
    }

    let drawn = rng.gen_bool(config.distractor_probability);
    let mut decoy_pixels = None;
    if decoy.unwrap_or(drawn) {
        let spots = decoy_positions(size, pw, phh, patch);
        if !spots.is_empty() {
            let (x, y) = spots[rng.gen_range(0..spots.len())];
            canvas.block(x, y, pw, phh, YELLOW);
            decoy_pixels = Some((x, y, x + pw - 1, y + phh - 1));
        }
    }

    let image = canvas.into_tensor(rng, config.noise_amplitude);
    Ok((
        Sample {
            id,
            image,
            label,
            skeleton,
            person_box,
        },
        RenderInfo {
            joint_region: region,
            patch_pixels: patch,
            decoy_pixels,
        },
    ))
}

/// Per-sample stream: the dataset seed with stream `index`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Exactly `round(n·positive_fraction)` positives in seeded random order.
pub fn dataset_labels(config: &SynthConfig) -> Vec<u8> {
    let pos = config.positives();
    let mut labels: Vec<u8> = (0..config.n_samples).map(|i| u8::from(i < pos)).collect();
    labels.shuffle(&mut sample_rng(config.seed, u64::MAX));
    labels
}

pub fn generate_dataset(config: &SynthConfig) -> Result<Vec<Sample>, SynthError> {
    config.validate()?;
    if config.n_samples < 10 {
        return Err(SynthError::Config(format!("n_samples must be at least 10, got {}", config.n_samples)));
    }
    dataset_labels(config)
        .into_iter()
        .enumerate()
        .map(|(i, label)| render_sample(&mut sample_rng(config.seed, i as u64), config, label, i as u64))
        .collect()
}
