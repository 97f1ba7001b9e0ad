//! Pseudo-labelling, confidence masking, and the weak-to-strong training step.
//!
//! A step has two phases. [`prepare_step`] draws every random quantity
//! (weak/strong views, CutMix boxes, feature perturbations) and computes the
//! pseudo labels with the current parameters; the result is a [`StepPlan`]
//! holding plain data. [`plan_loss_and_grad`] then evaluates the objective and
//! its gradient for that fixed plan. Pseudo labels never carry gradient
//! because they are data by the time the loss is built.

mod loss;
mod step;

pub use loss::{
    ce_sum_and_grad, combine_unsup, masked_ce, pseudo_label, pseudo_label_checked, unimatch_unsup_loss,
    weighted_ce_sum_and_grad, PseudoLabel,
};
pub use step::{
    plan_loss_and_grad, prepare_step, train_step, StepConfig, StepLosses, StepOutput, StepPlan, StepTrace,
    StrongView, UnlabeledPlan,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SupervisedOnly,
    Fixmatch,
    Uniperb,
    Dusperb,
    Unimatch,
    /// Dropout on the features of one strong view, no separate feature stream.
    HybridSingle,
    /// Two such hybrid views.
    HybridDual,
    /// No strong image views; the weak view's features are perturbed.
    FeatureOnly,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::SupervisedOnly,
        Variant::Fixmatch,
        Variant::Uniperb,
        Variant::Dusperb,
        Variant::Unimatch,
        Variant::HybridSingle,
        Variant::HybridDual,
        Variant::FeatureOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SupervisedOnly => "supervised_only",
            Variant::Fixmatch => "fixmatch",
            Variant::Uniperb => "uniperb",
            Variant::Dusperb => "dusperb",
            Variant::Unimatch => "unimatch",
            Variant::HybridSingle => "hybrid_single",
            Variant::HybridDual => "hybrid_dual",
            Variant::FeatureOnly => "feature_only",
        }
    }

    /// Default `(image streams, feature streams)`.
    pub fn stream_counts(self) -> (usize, usize) {
        match self {
            Variant::SupervisedOnly => (0, 0),
            Variant::Fixmatch => (1, 0),
            Variant::Uniperb => (1, 1),
            Variant::Dusperb => (2, 0),
            Variant::Unimatch => (2, 1),
            Variant::HybridSingle => (1, 0),
            Variant::HybridDual => (2, 0),
            Variant::FeatureOnly => (0, 1),
        }
    }

    /// Whether image streams also get the feature perturbation.
    pub fn is_hybrid(self) -> bool {
        matches!(self, Variant::HybridSingle | Variant::HybridDual)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant '{s}'; valid variants: {}", names.join(", ")))
            })
    }
}

/// Which streams run and how they are weighted.
///
/// When deserialised, omitted fields take the preset of the named variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "PartialVariantConfig")]
pub struct VariantConfig {
    pub variant: Variant,
    pub n_image_streams: usize,
    pub n_feature_streams: usize,
    /// Weight of the feature-perturbation streams.
    pub lambda: f64,
    /// Weight of the image-perturbation streams.
    pub mu: f64,
    /// Confidence threshold for pseudo labels.
    pub tau: f64,
}

impl VariantConfig {
    pub fn preset(variant: Variant) -> Self {
        let (n_image_streams, n_feature_streams) = variant.stream_counts();
        Self {
            variant,
            n_image_streams,
            n_feature_streams,
            lambda: 0.5,
            mu: 0.5,
            tau: 0.95,
        }
    }

    pub fn uses_unlabeled(&self) -> bool {
        self.variant != Variant::SupervisedOnly
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.mu >= 0.0) {
            return Err(Error::Config("lambda and mu must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.uses_unlabeled() && self.n_image_streams == 0 && self.n_feature_streams == 0 {
            return Err(Error::Config(format!(
                "variant {} needs at least one unsupervised stream",
                self.variant
            )));
        }
        if self.variant.is_hybrid() && self.n_image_streams == 0 {
            return Err(Error::Config("hybrid variants need image streams".into()));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialVariantConfig {
    #[serde(default = "default_variant")]
    variant: Variant,
    n_image_streams: Option<usize>,
    n_feature_streams: Option<usize>,
    lambda: Option<f64>,
    mu: Option<f64>,
    tau: Option<f64>,
}

fn default_variant() -> Variant {
    Variant::Unimatch
}

impl From<PartialVariantConfig> for VariantConfig {
    fn from(p: PartialVariantConfig) -> Self {
        let preset = VariantConfig::preset(p.variant);
        Self {
            variant: p.variant,
            n_image_streams: p.n_image_streams.unwrap_or(preset.n_image_streams),
            n_feature_streams: p.n_feature_streams.unwrap_or(preset.n_feature_streams),
            lambda: p.lambda.unwrap_or(preset.lambda),
            mu: p.mu.unwrap_or(preset.mu),
            tau: p.tau.unwrap_or(preset.tau),
        }
    }
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self::preset(Variant::Unimatch)
    }
}
