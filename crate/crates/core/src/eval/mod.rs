//! Confusion-matrix metrics and sliding-window inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::par;
use crate::tensor::{ImageTensor, LabelMask, ProbabilityMap, Tensor3, IGNORE_INDEX};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            num_classes: k,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|k| self.get(k, k)).sum()
    }

    /// `(tp, fp, fn)` of class `k`.
    pub fn class_counts(&self, k: usize) -> (u64, u64, u64) {
        let tp = self.get(k, k);
        let col: u64 = (0..self.num_classes).map(|g| self.get(g, k)).sum();
        let row: u64 = (0..self.num_classes).map(|p| self.get(k, p)).sum();
        (tp, col - tp, row - tp)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape("merging matrices of different size".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Adds every pixel whose ground truth is not ignored.
pub fn confusion_update(cm: &mut ConfusionMatrix, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let k = cm.num_classes;
    let mut delta = vec![0u64; k * k];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g == IGNORE_INDEX {
            continue;
        }
        let (p, g) = (p as usize, g as usize);
        if p >= k || g >= k {
            return Err(Error::Argument(format!("class {} outside 0..{k}", p.max(g))));
        }
        delta[g * k + p] += 1;
    }
    cm.counts.iter_mut().zip(delta).for_each(|(a, d)| *a += d);
    Ok(())
}

/// Per-class scores (`None` where the denominator is zero) and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

fn mean_defined(scores: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = scores.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("no class has a non-zero denominator".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// IoU per class; classes absent from both prediction and truth are left out
/// of the mean.
pub fn miou(cm: &ConfusionMatrix) -> Result<ClassScores> {
    if cm.total() == 0 {
        return Err(Error::UndefinedMetric("empty confusion matrix".into()));
    }
    let per_class: Vec<Option<f64>> = (0..cm.num_classes)
        .map(|k| {
            let (tp, fp, fn_) = cm.class_counts(k);
            let d = tp + fp + fn_;
            (d > 0).then(|| tp as f64 / d as f64)
        })
        .collect();
    let mean = mean_defined(&per_class)?;
    Ok(ClassScores { per_class, mean })
}

/// Dice per class; the mean runs over foreground classes (1..K).
pub fn dice(cm: &ConfusionMatrix) -> Result<ClassScores> {
    if cm.total() == 0 {
        return Err(Error::UndefinedMetric("empty confusion matrix".into()));
    }
    let per_class: Vec<Option<f64>> = (0..cm.num_classes)
        .map(|k| {
            let (tp, fp, fn_) = cm.class_counts(k);
            let d = 2 * tp + fp + fn_;
            (d > 0).then(|| 2.0 * tp as f64 / d as f64)
        })
        .collect();
    let mean = mean_defined(&per_class[1..])?;
    Ok(ClassScores { per_class, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdMetrics {
    pub changed_iou: f64,
    pub overall_accuracy: f64,
}

/// Changed-class IoU and overall accuracy of a binary matrix.
pub fn cd_metrics(cm: &ConfusionMatrix) -> Result<CdMetrics> {
    if cm.num_classes != 2 {
        return Err(Error::Argument(format!("change detection needs 2 classes, got {}", cm.num_classes)));
    }
    if cm.total() == 0 {
        return Err(Error::UndefinedMetric("empty confusion matrix".into()));
    }
    let (tp, fp, fn_) = cm.class_counts(1);
    let d = tp + fp + fn_;
    Ok(CdMetrics {
        changed_iou: if d == 0 { 0.0 } else { tp as f64 / d as f64 },
        overall_accuracy: cm.trace() as f64 / cm.total() as f64,
    })
}

fn window_starts(size: usize, window: usize, stride: usize) -> Vec<usize> {
    if window >= size {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..=size - window).step_by(stride).collect();
    if *starts.last().expect("non-empty") != size - window {
        starts.push(size - window);
    }
    starts
}

fn crop(image: &ImageTensor, y0: usize, x0: usize, h: usize, w: usize) -> ImageTensor {
    Tensor3::from_fn(image.channels(), h, w, |c, y, x| image.get(c, y0 + y, x0 + x))
}

/// Default stride: two thirds of the window.
pub fn default_stride(window: usize) -> usize {
    (window * 2 / 3).max(1)
}

/// Averages window probabilities over every placement covering a pixel.
///
/// Edge windows are shifted inside the image. A window at least as large as
/// the image in both directions falls back to a single whole-image pass.
pub fn sliding_window_predict(model: &SegModel, image: &ImageTensor, window: usize, stride: usize) -> Result<ProbabilityMap> {
    if stride == 0 || window < stride {
        return Err(Error::Argument(format!("need window >= stride >= 1, got {window}/{stride}")));
    }
    let (h, w) = (image.height(), image.width());
    if window >= h && window >= w {
        return model.predict(image);
    }
    let (wh, ww) = (window.min(h), window.min(w));
    let placements: Vec<(usize, usize)> = window_starts(h, wh, stride)
        .into_iter()
        .flat_map(|y| window_starts(w, ww, stride).into_iter().map(move |x| (y, x)))
        .collect();
    let probs = par::map_slice(&placements, |_, &(y0, x0)| model.predict(&crop(image, y0, x0, wh, ww)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let k = model.num_classes();
    let mut acc = Tensor3::zeros(k, h, w);
    let mut hits = vec![0u32; h * w];
    for (&(y0, x0), p) in placements.iter().zip(&probs) {
        for y in 0..wh {
            for x in 0..ww {
                hits[(y0 + y) * w + x0 + x] += 1;
                for c in 0..k {
                    let v = acc.get(c, y0 + y, x0 + x) + p.tensor().get(c, y, x);
                    acc.set(c, y0 + y, x0 + x, v);
                }
            }
        }
    }
    let n = h * w;
    let data = acc.data_mut();
    for p in 0..n {
        let count = hits[p] as f64;
        let mut sum = 0.0;
        for c in 0..k {
            data[c * n + p] /= count;
            sum += data[c * n + p];
        }
        for c in 0..k {
            data[c * n + p] /= sum;
        }
    }
    ProbabilityMap::try_new(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EvalMode {
    Whole,
    SlidingWindow { window: usize, stride: usize },
}

/// Runs inference on labeled items and accumulates the confusion matrix.
pub fn evaluate(model: &SegModel, items: &[(ImageTensor, LabelMask)], mode: EvalMode) -> Result<ConfusionMatrix> {
    let preds = par::map_slice(items, |_, (img, _)| match mode {
        EvalMode::Whole => model.predict(img),
        EvalMode::SlidingWindow { window, stride } => sliding_window_predict(model, img, window, stride),
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for (p, (_, gt)) in preds.iter().zip(items) {
        confusion_update(&mut cm, &p.argmax(), gt)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
}

/// Serialisable evaluation summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub num_items: usize,
    pub classes: Vec<ClassRow>,
    pub mean_iou: f64,
    pub mean_dice: Option<f64>,
    pub overall_accuracy: f64,
    pub confusion: ConfusionMatrix,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl EvalReport {
    pub fn from_confusion(cm: ConfusionMatrix, mode: EvalMode, num_items: usize) -> Result<Self> {
        let iou = miou(&cm)?;
        let dsc = dice(&cm).ok();
        let classes = (0..cm.num_classes())
            .map(|k| ClassRow {
                class: k,
                iou: iou.per_class[k],
                dice: dsc.as_ref().and_then(|d| d.per_class[k]),
            })
            .collect();
        Ok(Self {
            mode,
            num_items,
            classes,
            mean_iou: iou.mean,
            mean_dice: dsc.map(|d| d.mean),
            overall_accuracy: cm.trace() as f64 / cm.total() as f64,
            confusion: cm,
            metadata: serde_json::Map::new(),
        })
    }
}
