//! Pseudo-ground-truth attention masks from body keypoints.
//!
//! A PPE type names the joints it covers (head for helmets, ankles for
//! boots, ...). The mask marks the bounding rectangle of those joints,
//! widened by a margin, on the attention grid; everything else is zero.

use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Joint names produced by the skeleton source.
pub const JOINTS: [&str; 17] = [
    "head_top",
    "head",
    "nose",
    "chin",
    "neck",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SupervisionError {
    #[error("no joint of interest for `{0}` is present in the skeleton")]
    NoSupervision(String),
    #[error("joint rectangle for `{0}` lies entirely outside the crop")]
    OutsideCrop(String),
    #[error("degenerate rectangle {0:?}")]
    DegenerateBox(Rect),
    #[error("invalid PPE config: {0}")]
    InvalidConfig(String),
    #[error("invalid keypoint `{name}`: ({x}, {y})")]
    InvalidKeypoint { name: String, x: f64, y: f64 },
    #[error("attention grid must be at least 1×1, got {0}×{1}")]
    EmptyGrid(usize, usize),
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Area, zero for inverted rectangles.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    pub fn intersection(&self, other: &Rect) -> Rect {
        Rect::new(
            self.x0.max(other.x0),
            self.y0.max(other.y0),
            self.x1.min(other.x1),
            self.y1.min(other.y1),
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// Named body keypoints in person-box pixel coordinates. A joint the pose
/// source did not find is simply absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Skeleton {
    keypoints: BTreeMap<String, [f64; 2]>,
}

impl Skeleton {
    pub fn new(keypoints: BTreeMap<String, [f64; 2]>) -> Result<Self, SupervisionError> {
        for (name, &[x, y]) in &keypoints {
            if !(x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0) {
                return Err(SupervisionError::InvalidKeypoint {
                    name: name.clone(),
                    x,
                    y,
                });
            }
        }
        Ok(Self { keypoints })
    }

    pub fn get(&self, joint: &str) -> Option<(f64, f64)> {
        self.keypoints.get(joint).map(|&[x, y]| (x, y))
    }

    pub fn keypoints(&self) -> &BTreeMap<String, [f64; 2]> {
        &self.keypoints
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    /// Shifts every joint. Coordinates may leave the non-negative quadrant,
    /// so this is only meant for building test fixtures.
    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            keypoints: self
                .keypoints
                .iter()
                .map(|(k, &[x, y])| (k.clone(), [x + dx, y + dy]))
                .collect(),
        }
    }

    pub fn without(&self, joint: &str) -> Self {
        let mut keypoints = self.keypoints.clone();
        keypoints.remove(joint);
        Self { keypoints }
    }
}

/// Where on the body a PPE item sits and how to crop for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpeTypeConfig {
    pub name: String,
    /// Vertical `(top, bottom)` fractions of the person box.
    pub crop_band: (f64, f64),
    pub joints_of_interest: Vec<String>,
    /// Fraction of the larger crop side added around the joint rectangle.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    0.10
}

impl PpeTypeConfig {
    pub fn helmet() -> Self {
        Self {
            name: "helmet".into(),
            crop_band: (0.0, 0.40),
            joints_of_interest: vec!["head_top".into(), "head".into()],
            margin: default_margin(),
        }
    }

    pub fn mask() -> Self {
        Self {
            name: "mask".into(),
            crop_band: (0.0, 0.35),
            joints_of_interest: vec!["nose".into(), "chin".into()],
            margin: default_margin(),
        }
    }

    pub fn boots() -> Self {
        Self {
            name: "boots".into(),
            crop_band: (0.70, 1.0),
            joints_of_interest: vec!["l_ankle".into(), "r_ankle".into()],
            margin: default_margin(),
        }
    }

    /// Preset by name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "helmet" => Some(Self::helmet()),
            "mask" => Some(Self::mask()),
            "boots" => Some(Self::boots()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), SupervisionError> {
        let (top, bottom) = self.crop_band;
        if !(0.0 <= top && top < bottom && bottom <= 1.0) {
            return Err(SupervisionError::InvalidConfig(format!(
                "crop band must satisfy 0 <= top < bottom <= 1, got ({top}, {bottom})"
            )));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(SupervisionError::InvalidConfig(format!(
                "margin must be a non-negative number, got {}",
                self.margin
            )));
        }
        if self.joints_of_interest.is_empty() {
            return Err(SupervisionError::InvalidConfig(
                "joints_of_interest is empty".into(),
            ));
        }
        Ok(())
    }
}

impl Default for PpeTypeConfig {
    fn default() -> Self {
        Self::helmet()
    }
}

/// An `h'×w'` map with values in `[0, 1]`; binary for pseudo-ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl AttentionMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// `1×h'×w'` tensor view.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, self.height, self.width],
            self.values.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("mask dims are positive")
    }

    /// From a `1×h'×w'` (or `h'×w'`) tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let s = t.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Self {
            height: h,
            width: w,
            values: t.data().iter().map(|&v| Scalar::to_f64(v) as f32).collect(),
        }
    }

    /// Mask thresholded at `t` (`value > t` becomes 1).
    pub fn threshold(&self, t: f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|&v| if v > t { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Cell-wise IoU of the non-zero regions of two binary masks; 0 when
    /// both are empty.
    pub fn iou(&self, other: &Self) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.values.iter().zip(&other.values) {
            let (a, b) = (a > 0.0, b > 0.0);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Full-width horizontal band of the person box that may contain the item.
pub fn crop_region(person_box: &Rect, config: &PpeTypeConfig) -> Result<Rect, SupervisionError> {
    if !(person_box.is_finite() && person_box.width() > 0.0 && person_box.height() > 0.0) {
        return Err(SupervisionError::DegenerateBox(*person_box));
    }
    config.validate()?;
    let (top, bottom) = config.crop_band;
    let h = person_box.height();
    Ok(Rect::new(
        person_box.x0,
        person_box.y0 + top * h,
        person_box.x1,
        person_box.y0 + bottom * h,
    ))
}

/// Margin-expanded bounding rectangle of the present joints of interest, in
/// crop coordinates, clipped to the crop.
pub fn joint_rect(
    skeleton: &Skeleton,
    config: &PpeTypeConfig,
    crop: &Rect,
) -> Result<Rect, SupervisionError> {
    let (cw, ch) = (crop.width(), crop.height());
    if !(cw > 0.0 && ch > 0.0) {
        return Err(SupervisionError::DegenerateBox(*crop));
    }
    let mut bounds: Option<Rect> = None;
    for joint in &config.joints_of_interest {
        if let Some((x, y)) = skeleton.get(joint) {
            let (x, y) = (x - crop.x0, y - crop.y0);
            bounds = Some(match bounds {
                None => Rect::new(x, y, x, y),
                Some(r) => Rect::new(r.x0.min(x), r.y0.min(y), r.x1.max(x), r.y1.max(y)),
            });
        }
    }
    let r = bounds.ok_or_else(|| SupervisionError::NoSupervision(config.name.clone()))?;
    let m = config.margin * cw.max(ch);
    let clipped = Rect::new(
        (r.x0 - m).max(0.0),
        (r.y0 - m).max(0.0),
        (r.x1 + m).min(cw),
        (r.y1 + m).min(ch),
    );
    if clipped.x0 > clipped.x1 || clipped.y0 > clipped.y1 {
        return Err(SupervisionError::OutsideCrop(config.name.clone()));
    }
    Ok(clipped)
}

/// Grid cells `[lo, hi)` covered by `[a, b]` on an axis of length `extent`
/// split into `cells` cells: floor on the low side, ceil on the high side.
fn cell_span(a: f64, b: f64, extent: f64, cells: usize) -> (usize, usize) {
    let scale = cells as f64 / extent;
    let lo = ((a * scale).floor().max(0.0) as usize).min(cells - 1);
    let hi = ((b * scale).ceil().max(0.0) as usize).min(cells);
    (lo, hi.max(lo + 1))
}

/// Binary pseudo-ground-truth mask on an `h'×w'` grid.
///
/// Fails with [`SupervisionError::NoSupervision`] when none of the joints of
/// interest are present; such samples are left out of the attention loss.
pub fn pseudo_gt_mask(
    skeleton: &Skeleton,
    config: &PpeTypeConfig,
    crop: &Rect,
    height: usize,
    width: usize,
) -> Result<AttentionMask, SupervisionError> {
    if height == 0 || width == 0 {
        return Err(SupervisionError::EmptyGrid(height, width));
    }
    let r = joint_rect(skeleton, config, crop)?;
    let (c0, c1) = cell_span(r.x0, r.x1, crop.width(), width);
    let (r0, r1) = cell_span(r.y0, r.y1, crop.height(), height);
    let mut mask = AttentionMask::zeros(height, width);
    for row in r0..r1 {
        mask.values[row * width + c0..row * width + c1].fill(1.0);
    }
    Ok(mask)
}
