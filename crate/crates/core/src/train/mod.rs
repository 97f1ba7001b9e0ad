//! Optimisation loop: SGD with momentum and weight decay under a per-iteration
//! poly schedule, driving [`crate::consistency::train_step`].

mod ohem;

pub use ohem::{ohem_ce, ohem_keep_weights, OhemConfig};

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugPipelineConfig;
use crate::consistency::{train_step, StepConfig, VariantConfig};
use crate::data::epoch_batches;
use crate::error::{Error, Result};
use crate::featperturb::FeaturePerturbSpec;
use crate::model::{save_checkpoint, Gradients, SegModel, TinyNetConfig};
use crate::rng::SeedTree;
use crate::tensor::{ImageTensor, LabelMask};

/// `base · (1 − iter/total)^power`.
pub fn poly_lr(base: f64, iter: usize, total_iters: usize, power: f64) -> Result<f64> {
    if total_iters == 0 {
        return Err(Error::Argument("total_iters must be >= 1".into()));
    }
    if iter > total_iters {
        return Err(Error::Argument(format!("iter {iter} beyond total {total_iters}")));
    }
    Ok(base * (1.0 - iter as f64 / total_iters as f64).powf(power))
}

/// SGD with heavy-ball momentum; weight decay is added to the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &SegModel, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Gradients::zeros_like(model).0,
        }
    }

    pub fn step(&mut self, model: &mut SegModel, grads: &Gradients, lr: f64) {
        for ((p, g), v) in model.params_mut().into_iter().zip(&grads.0).zip(&mut self.velocity) {
            for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let d = g + self.weight_decay * *p;
                *v = self.momentum * *v + d;
                *p -= lr * *v;
            }
        }
    }
}

fn default_poly_power() -> f64 {
    0.9
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub total_epochs: usize,
    #[serde(default = "default_poly_power")]
    pub poly_power: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub batch_l: usize,
    pub batch_u: usize,
    pub train_size: usize,
    pub seed: u64,
    /// Steps between checkpoints; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub variant: VariantConfig,
    pub ohem: Option<OhemConfig>,
    pub augment: AugPipelineConfig,
    pub feature_perturb: FeaturePerturbSpec,
    pub model: TinyNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.03,
            total_epochs: 20,
            poly_power: default_poly_power(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            batch_l: 8,
            batch_u: 8,
            train_size: 32,
            seed: 0,
            checkpoint_every: 0,
            variant: VariantConfig::default(),
            ohem: None,
            augment: AugPipelineConfig::default(),
            feature_perturb: FeaturePerturbSpec::default(),
            model: TinyNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if self.total_epochs == 0 {
            return Err(Error::Argument("total_epochs must be >= 1".into()));
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::Config(format!("poly_power must be > 0, got {}", self.poly_power)));
        }
        if self.batch_l == 0 || self.batch_u == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight_decay be >= 0".into()));
        }
        self.step_config().validate()
    }

    /// Per-step settings; `train_size` overrides the augmentation crop.
    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            variant: self.variant.clone(),
            aug: AugPipelineConfig {
                train_size: self.train_size,
                ..self.augment.clone()
            },
            fp: self.feature_perturb.clone(),
            ohem: self.ohem.clone(),
        }
    }

    /// Parses a TOML config; missing keys keep their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form (keys sorted at every level).
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_s: f64,
    pub loss_u: f64,
    pub loss_total: f64,
    pub mask_ratio: f64,
}

pub struct TrainData<'a> {
    pub labeled: &'a [(ImageTensor, LabelMask)],
    pub unlabeled: &'a [ImageTensor],
}

/// Where run artefacts go; everything is optional.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
    /// Stop after this many steps (the schedule still spans all epochs).
    pub max_steps: Option<usize>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LAST_GOOD_FILE: &str = "last_good.bin";

#[derive(Debug)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub checkpoint: Option<PathBuf>,
}

/// Builds the initial model from the `init` seed stream.
pub fn init_model(cfg: &TrainConfig) -> Result<SegModel> {
    SegModel::tiny(&cfg.model, &mut SeedTree::new(cfg.seed).stream("init").rng())
}

fn write_checkpoint_atomic(dir: &Path, name: &str, model: &SegModel, hash: &str, step: usize) -> Result<PathBuf> {
    let tmp = dir.join(format!("{name}.tmp"));
    save_checkpoint(model, hash, step as u64, &tmp)?;
    let path = dir.join(name);
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Trains `model` in place.
///
/// Each epoch draws a fresh schedule from the `schedule` seed stream; step `t`
/// draws its augmentations from `step/t`. A non-finite loss aborts the run
/// after saving the (still finite) current parameters as `last_good.bin`.
pub fn run_training(
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    model: &mut SegModel,
    out: &TrainOutputs,
) -> Result<TrainReport> {
    cfg.validate()?;
    let step_cfg = cfg.step_config();
    let hash = cfg.config_hash();
    let seeds = SeedTree::new(cfg.seed);
    let labeled_ids: Vec<usize> = (0..data.labeled.len()).collect();
    let unlabeled_ids: Vec<usize> = (0..data.unlabeled.len()).collect();
    let steps_per_epoch = epoch_batches(&labeled_ids, &unlabeled_ids, cfg.batch_l, cfg.batch_u, 0)?.len();
    let total_iters = steps_per_epoch * cfg.total_epochs;

    let mut metrics = match &out.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let mut sgd = Sgd::new(model, cfg.momentum, cfg.weight_decay);
    let mut records = Vec::with_capacity(total_iters);
    let mut checkpoint = None;
    let mut step = 0;
    'epochs: for epoch in 0..cfg.total_epochs {
        let schedule_seed = seeds.stream("schedule").child(epoch as u64).seed();
        let schedule = epoch_batches(&labeled_ids, &unlabeled_ids, cfg.batch_l, cfg.batch_u, schedule_seed)?;
        for (lb, ub) in schedule {
            if out.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let labeled: Vec<_> = lb.iter().map(|&i| data.labeled[i].clone()).collect();
            let unlabeled: Vec<_> = ub.iter().map(|&i| data.unlabeled[i].clone()).collect();
            let lr = poly_lr(cfg.base_lr, step, total_iters, cfg.poly_power)?;
            let result = train_step(model, &labeled, &unlabeled, &step_cfg, &seeds.stream("step").child(step as u64));
            let output = match result {
                Ok(o) if o.losses.loss_total.is_finite() => o,
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    if let Some(dir) = &out.dir {
                        write_checkpoint_atomic(dir, LAST_GOOD_FILE, model, &hash, step)?;
                    }
                    let detail = match result {
                        Err(Error::NonFinite { context }) => context,
                        _ => "total loss".into(),
                    };
                    return Err(Error::non_finite(format!("{detail} at step {step}")));
                }
                Err(e) => return Err(e),
            };
            sgd.step(model, &output.grads, lr);
            let rec = StepRecord {
                step,
                epoch,
                lr,
                loss_s: output.losses.loss_s,
                loss_u: output.losses.loss_u,
                loss_total: output.losses.loss_total,
                mask_ratio: output.losses.mask_ratio,
            };
            log::debug!("step {step} loss {:.5} mask {:.3}", rec.loss_total, rec.mask_ratio);
            if let Some((file, path)) = metrics.as_mut() {
                let line = serde_json::to_string(&rec).map_err(|e| Error::Parse(e.to_string()))?;
                writeln!(file, "{line}").map_err(|e| Error::io(&*path, e))?;
            }
            records.push(rec);
            step += 1;
            if let Some(dir) = &out.dir {
                if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                    checkpoint = Some(write_checkpoint_atomic(dir, CHECKPOINT_FILE, model, &hash, step)?);
                }
            }
        }
        if let Some(last) = records.last() {
            log::info!("epoch {epoch} done, step {} loss {:.4}", last.step, last.loss_total);
        }
    }
    if let Some(dir) = &out.dir {
        checkpoint = Some(write_checkpoint_atomic(dir, CHECKPOINT_FILE, model, &hash, step)?);
    }
    Ok(TrainReport { records, checkpoint })
}
