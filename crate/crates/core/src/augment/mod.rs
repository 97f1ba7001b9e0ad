//! Image-level perturbations.
//!
//! The weak pipeline resizes, crops, and flips image and mask together. The
//! strong pipeline composes photometric ops on top of a weak view and then
//! CutMix across the batch. Every random draw is written to an [`AugRecord`]
//! so a view can be replayed bit-exactly.

mod color;
mod cutmix;
mod geometric;

pub use color::{apply_color_ops, rgb_to_gray, sample_strong_views, strong_color};
pub use cutmix::{apply_cutmix, cutmix_batch, sample_cutmix_box};
pub use geometric::{apply_weak, resize_nearest, weak_augment};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer rectangle, `x`/`y` top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn fits_within(&self, height: usize, width: usize) -> bool {
        self.x + self.w <= width && self.y + self.h <= height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorOpKind {
    Brightness,
    Contrast,
    Saturation,
    Hue,
    Grayscale,
    Blur,
}

/// One applied photometric op. `magnitude` is the sampled factor (hue: shift
/// in turns, blur: sigma, grayscale: unused).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorOp {
    pub op: ColorOpKind,
    pub magnitude: f64,
}

/// Everything random that happened to one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub scale: f64,
    /// Crop window in the resized (right/bottom zero-padded) frame.
    pub crop_box: Rect,
    pub hflip: bool,
    #[serde(default)]
    pub color_ops: Vec<ColorOp>,
    #[serde(default)]
    pub cutmix_box: Option<Rect>,
    #[serde(default)]
    pub cutmix_partner: Option<usize>,
    /// Set when mixing was requested but the batch had no partner.
    #[serde(default)]
    pub cutmix_skipped: bool,
}

impl AugRecord {
    /// The record of an untouched `height × width` view.
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            scale: 1.0,
            crop_box: Rect::new(0, 0, width, height),
            hflip: false,
            color_ops: Vec::new(),
            cutmix_box: None,
            cutmix_partner: None,
            cutmix_skipped: false,
        }
    }

    /// One-line JSON form used in debug dumps.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Parse(format!("aug record: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColorJitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    /// Probability that the jitter block runs at all.
    pub prob: f64,
}

impl Default for ColorJitterParams {
    fn default() -> Self {
        Self {
            brightness: 0.5,
            contrast: 0.5,
            saturation: 0.5,
            hue: 0.25,
            prob: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugPipelineConfig {
    /// Side of the square training crop.
    pub train_size: usize,
    pub scale_range: (f64, f64),
    pub hflip_prob: f64,
    pub color_jitter: ColorJitterParams,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub grayscale_prob: f64,
    pub cutmix_prob: f64,
    /// Box area as a fraction of the crop.
    pub cutmix_area: (f64, f64),
    /// When false the strong view is the weak view itself.
    pub strong: bool,
}

impl Default for AugPipelineConfig {
    fn default() -> Self {
        Self {
            train_size: 321,
            scale_range: (0.5, 2.0),
            hflip_prob: 0.5,
            color_jitter: ColorJitterParams::default(),
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            grayscale_prob: 0.2,
            cutmix_prob: 0.5,
            cutmix_area: (0.1, 0.5),
            strong: true,
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")))
    }
}

impl AugPipelineConfig {
    /// Photometric ops and CutMix all switched off.
    pub fn no_strong(mut self) -> Self {
        self.strong = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 {
            return Err(Error::Config("train_size must be positive".into()));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("scale_range ({lo}, {hi}) must lie in (0, inf)")));
        }
        check_prob("hflip_prob", self.hflip_prob)?;
        check_prob("color_jitter.prob", self.color_jitter.prob)?;
        check_prob("blur_prob", self.blur_prob)?;
        check_prob("grayscale_prob", self.grayscale_prob)?;
        check_prob("cutmix_prob", self.cutmix_prob)?;
        let j = &self.color_jitter;
        for (name, v) in [
            ("brightness", j.brightness),
            ("contrast", j.contrast),
            ("saturation", j.saturation),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} magnitude must be >= 0")));
            }
        }
        if !(0.0..=0.5).contains(&j.hue) {
            return Err(Error::Config("hue magnitude must lie in [0, 0.5]".into()));
        }
        let (a, b) = self.cutmix_area;
        if !(a > 0.0 && b >= a && b <= 1.0) {
            return Err(Error::Config(format!("cutmix_area ({a}, {b}) must lie in (0, 1]")));
        }
        let (s0, s1) = self.blur_sigma;
        if !(s0 > 0.0 && s1 >= s0) {
            return Err(Error::Config("blur_sigma must be a positive interval".into()));
        }
        Ok(())
    }
}
