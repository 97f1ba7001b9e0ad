//! Dense rasters used throughout the pipeline.
//!
//! Everything is stored channel-major (`C × H × W`) in a flat `Vec<f64>`.
//! Images, feature maps, and logit maps share [`Tensor3`]; probability maps
//! get their own wrapper so the per-pixel simplex is checked once on
//! construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved label for pixels that never contribute to a loss or metric.
pub const IGNORE_INDEX: u8 = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Raster input, values normalized to `[0, 1]`.
pub type ImageTensor = Tensor3;
/// Encoder output `D × h × w`.
pub type FeatureMap = Tensor3;
/// Unnormalized class scores `K × H × W`.
pub type LogitMap = Tensor3;

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot hold {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Tensor3, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn zip_map(&self, other: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Result<Tensor3> {
        self.ensure_same_shape(other, "elementwise op")?;
        Ok(Tensor3 {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Horizontal mirror of every channel.
    pub fn flip_horizontal(&self) -> Tensor3 {
        Tensor3::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
    }
}

impl Default for Tensor3 {
    fn default() -> Self {
        Tensor3::zeros(0, 0, 0)
    }
}

/// Per-pixel class indices with [`IGNORE_INDEX`] marking unsupervised pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask buffer of {} values cannot hold {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Checks every value is a class below `num_classes` or the ignore index.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&v| v != IGNORE_INDEX && v as usize >= num_classes)
        {
            Some(v) => Err(Error::Argument(format!(
                "label {v} outside 0..{num_classes}"
            ))),
            None => Ok(()),
        }
    }

    pub fn flip_horizontal(&self) -> LabelMask {
        LabelMask::from_fn(self.height, self.width, |y, x| {
            self.get(y, self.width - 1 - x)
        })
    }

    pub fn count_scored(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE_INDEX).count()
    }
}

/// Softmax output: every pixel's class vector lies on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(Tensor3);

impl ProbabilityMap {
    /// Tolerance used when validating externally supplied maps.
    pub const SUM_TOLERANCE: f64 = 1e-3;

    /// Softmax over channels at every pixel.
    pub fn from_logits(logits: &LogitMap) -> Self {
        let (k, h, w) = logits.shape();
        let n = h * w;
        let src = logits.data();
        let mut out = vec![0.0; k * n];
        for p in 0..n {
            let mut max = f64::NEG_INFINITY;
            for c in 0..k {
                max = max.max(src[c * n + p]);
            }
            let mut sum = 0.0;
            for c in 0..k {
                let e = (src[c * n + p] - max).exp();
                out[c * n + p] = e;
                sum += e;
            }
            for c in 0..k {
                out[c * n + p] /= sum;
            }
        }
        ProbabilityMap(Tensor3::from_vec(k, h, w, out).expect("shape preserved"))
    }

    /// Wraps a tensor after checking non-negativity and per-pixel sums.
    pub fn try_new(t: Tensor3) -> Result<Self> {
        let (k, h, w) = t.shape();
        let n = h * w;
        for p in 0..n {
            let mut sum = 0.0;
            for c in 0..k {
                let v = t.data()[c * n + p];
                if !(v >= 0.0) {
                    return Err(Error::Contract(format!(
                        "negative or NaN probability {v} at pixel {p}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
                return Err(Error::Contract(format!(
                    "probabilities at pixel {p} sum to {sum}"
                )));
            }
        }
        Ok(ProbabilityMap(t))
    }

    pub fn num_classes(&self) -> usize {
        self.0.channels()
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }

    /// Per-pixel argmax; ties resolve to the lowest class index.
    pub fn argmax(&self) -> LabelMask {
        let (k, h, w) = self.0.shape();
        let n = h * w;
        let d = self.0.data();
        let labels = (0..n)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if d[c * n + p] > d[best * n + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMask::from_vec(h, w, labels).expect("shape preserved")
    }

    /// Maximum class probability at every pixel, row-major.
    pub fn max_prob(&self) -> Vec<f64> {
        let (k, h, w) = self.0.shape();
        let n = h * w;
        let d = self.0.data();
        (0..n)
            .map(|p| (0..k).map(|c| d[c * n + p]).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}
