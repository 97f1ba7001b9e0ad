//! Dataset indexing, split protocols, batch scheduling and a synthetic
//! shapes generator.
//!
//! On-disk layout: `images/*.png` (RGB), `masks/*.png` (8-bit class indices),
//! `splits/*.txt` and an optional `index.json` carrying per-item flags.

mod io;
mod synth;

pub use io::{load_image, load_mask, read_split_file, save_image, save_mask, write_split_files};
pub use synth::{rasterize, synth_dataset, synth_items, synth_sample, Shape, ShapeKind, SynthSample};

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tensor::IGNORE_INDEX;

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetItem {
    /// Relative to the dataset root.
    pub image: String,
    pub mask: Option<String>,
    #[serde(default)]
    pub high_quality: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    #[serde(skip)]
    pub root: PathBuf,
    pub items: Vec<DatasetItem>,
    pub num_classes: usize,
    pub ignore_index: u8,
}

impl DatasetIndex {
    pub fn new(root: impl Into<PathBuf>, items: Vec<DatasetItem>, num_classes: usize) -> Result<Self> {
        let index = Self {
            root: root.into(),
            items,
            num_classes,
            ignore_index: IGNORE_INDEX,
        };
        index.validate()?;
        Ok(index)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        let mut seen = HashSet::new();
        for item in &self.items {
            if !seen.insert(item.image.as_str()) {
                return Err(Error::Config(format!("duplicate image path {}", item.image)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.items[i].image)
    }

    pub fn mask_path(&self, i: usize) -> Option<PathBuf> {
        self.items[i].mask.as_ref().map(|m| self.root.join(m))
    }

    /// Reads `index.json` if present, otherwise scans `images/` and pairs
    /// each file with `masks/<same name>` when that exists. `num_classes` is
    /// only consulted in the second case.
    pub fn open(root: &Path, num_classes: Option<usize>) -> Result<Self> {
        let index_path = root.join(INDEX_FILE);
        if index_path.exists() {
            let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
            let mut index: DatasetIndex =
                serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", index_path.display())))?;
            index.root = root.to_path_buf();
            index.validate()?;
            return Ok(index);
        }
        let k = num_classes.ok_or_else(|| Error::Config("no index.json; the number of classes must be given".into()))?;
        let images = root.join("images");
        let mut names: Vec<String> = std::fs::read_dir(&images)
            .map_err(|e| Error::io(&images, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".png"))
            .collect();
        names.sort();
        let items = names
            .into_iter()
            .map(|n| {
                let mask = format!("masks/{n}");
                DatasetItem {
                    image: format!("images/{n}"),
                    mask: root.join(&mask).exists().then_some(mask),
                    high_quality: false,
                }
            })
            .collect();
        Self::new(root, items, k)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitProtocol {
    /// Labeled items come only from the high-quality pool.
    OriginalOnly,
    /// Labeled items are drawn uniformly from every annotated item.
    Blended,
    /// High-quality items first, then the rest.
    PrioritizedHighQuality,
    /// As `Blended`, with the count given as a fraction.
    Fraction,
}

impl std::str::FromStr for SplitProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original_only" => Ok(Self::OriginalOnly),
            "blended" => Ok(Self::Blended),
            "prioritized_high_quality" => Ok(Self::PrioritizedHighQuality),
            "fraction" => Ok(Self::Fraction),
            _ => Err(Error::Argument(format!(
                "unknown protocol '{s}'; expected original_only, blended, prioritized_high_quality or fraction"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabeledCount {
    Count(usize),
    Fraction(f64),
}

impl LabeledCount {
    /// Fractions round to the nearest item.
    pub fn resolve(self, total: usize) -> Result<usize> {
        match self {
            LabeledCount::Count(n) => Ok(n),
            LabeledCount::Fraction(f) if (0.0..=1.0).contains(&f) => Ok((f * total as f64).round() as usize),
            LabeledCount::Fraction(f) => Err(Error::Argument(format!("fraction must lie in [0, 1], got {f}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub protocol: SplitProtocol,
    pub n_labeled: LabeledCount,
    pub seed: u64,
}

/// Item indices, each list sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

pub fn make_splits(index: &DatasetIndex, spec: &SplitSpec) -> Result<Split> {
    if spec.protocol == SplitProtocol::Fraction && !matches!(spec.n_labeled, LabeledCount::Fraction(_)) {
        return Err(Error::Argument("protocol fraction needs a fractional n_labeled".into()));
    }
    let n = spec.n_labeled.resolve(index.len())?;
    let annotated: Vec<usize> = (0..index.len()).filter(|&i| index.items[i].mask.is_some()).collect();
    let (hq, rest): (Vec<usize>, Vec<usize>) = annotated.iter().partition(|&&i| index.items[i].high_quality);
    let mut rng = SeedTree::new(spec.seed).stream("split").rng();
    let mut labeled = match spec.protocol {
        SplitProtocol::OriginalOnly => {
            if n > hq.len() {
                return Err(Error::Argument(format!("{n} labeled requested but only {} high-quality items", hq.len())));
            }
            let mut pool = hq;
            pool.shuffle(&mut rng);
            pool.truncate(n);
            pool
        }
        SplitProtocol::Blended | SplitProtocol::Fraction => {
            if n > annotated.len() {
                return Err(Error::Argument(format!("{n} labeled requested but only {} annotated items", annotated.len())));
            }
            let mut pool = annotated;
            pool.shuffle(&mut rng);
            pool.truncate(n);
            pool
        }
        SplitProtocol::PrioritizedHighQuality => {
            if n > annotated.len() {
                return Err(Error::Argument(format!("{n} labeled requested but only {} annotated items", annotated.len())));
            }
            let (mut hq, mut rest) = (hq, rest);
            hq.shuffle(&mut rng);
            rest.shuffle(&mut rng);
            hq.extend(rest);
            hq.truncate(n);
            hq
        }
    };
    labeled.sort_unstable();
    let chosen: HashSet<usize> = labeled.iter().copied().collect();
    let unlabeled = (0..index.len()).filter(|i| !chosen.contains(i)).collect();
    Ok(Split { labeled, unlabeled })
}

/// Pairs labeled and unlabeled batches for one epoch.
///
/// The epoch is as long as the larger list needs; the shorter list is
/// repeated, reshuffling at each pass, so every item of both lists appears at
/// least once.
pub fn epoch_batches<T: Clone>(
    labeled: &[T],
    unlabeled: &[T],
    batch_l: usize,
    batch_u: usize,
    seed: u64,
) -> Result<Vec<(Vec<T>, Vec<T>)>> {
    if batch_l == 0 || batch_u == 0 {
        return Err(Error::Argument("batch sizes must be >= 1".into()));
    }
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(Error::Argument("cannot schedule an empty labeled or unlabeled list".into()));
    }
    let steps = labeled.len().div_ceil(batch_l).max(unlabeled.len().div_ceil(batch_u));
    let seeds = SeedTree::new(seed);
    let ls = repeat_shuffled(labeled, steps * batch_l, seeds.stream("labeled"));
    let us = repeat_shuffled(unlabeled, steps * batch_u, seeds.stream("unlabeled"));
    Ok(ls.chunks(batch_l).zip(us.chunks(batch_u)).map(|(l, u)| (l.to_vec(), u.to_vec())).collect())
}

fn repeat_shuffled<T: Clone>(items: &[T], len: usize, seeds: SeedTree) -> Vec<T> {
    let mut out = Vec::with_capacity(len);
    let mut pass = 0;
    while out.len() < len {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut seeds.child(pass).rng());
        out.extend(order.into_iter().take(len - out.len()).map(|i| items[i].clone()));
        pass += 1;
    }
    out
}
