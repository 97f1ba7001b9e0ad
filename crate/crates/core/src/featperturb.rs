//! Feature-space perturbations applied to the weak view's encoder output.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureDecoder;
use crate::nn::scale_channels;
use crate::rng::Rng;
use crate::tensor::{FeatureMap, ProbabilityMap, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    ChannelDropout,
    UniformNoise,
    Vat,
    None,
}

impl std::str::FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel_dropout" => Ok(Self::ChannelDropout),
            "uniform_noise" => Ok(Self::UniformNoise),
            "vat" => Ok(Self::Vat),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "unknown feature perturbation '{other}' (expected channel_dropout, uniform_noise, vat, none)"
            ))),
        }
    }
}

/// Where in the network the perturbation is inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbLocation {
    /// Between encoder and decoder.
    #[default]
    EncoderDecoder,
    /// Just before the final classifier convolution.
    PreClassifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturePerturbSpec {
    pub kind: PerturbKind,
    pub dropout_prob: f64,
    pub noise_amplitude: f64,
    pub vat_eps: f64,
    pub vat_xi: f64,
    pub vat_iters: usize,
    pub location: PerturbLocation,
}

impl Default for FeaturePerturbSpec {
    fn default() -> Self {
        Self {
            kind: PerturbKind::ChannelDropout,
            dropout_prob: 0.5,
            noise_amplitude: 0.3,
            vat_eps: 2.0,
            vat_xi: 1e-6,
            vat_iters: 1,
            location: PerturbLocation::EncoderDecoder,
        }
    }
}

impl FeaturePerturbSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!(
                "dropout_prob must lie in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        if !(self.noise_amplitude >= 0.0) {
            return Err(Error::Config("noise_amplitude must be >= 0".into()));
        }
        if self.vat_iters == 0 {
            return Err(Error::Config("vat_iters must be >= 1".into()));
        }
        if self.kind == PerturbKind::Vat && !(self.vat_eps >= 0.0 && self.vat_xi > 0.0) {
            return Err(Error::Config("vat_eps must be >= 0 and vat_xi > 0".into()));
        }
        Ok(())
    }
}

/// Per-channel keep factors: `0` with probability `p`, else `1 / (1 − p)`.
pub fn dropout_scales(channels: usize, p: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Argument(format!("dropout probability must lie in [0, 1), got {p}")));
    }
    let keep = 1.0 / (1.0 - p);
    Ok((0..channels)
        .map(|_| if rng.random_bool(p) { 0.0 } else { keep })
        .collect())
}

/// Zeroes whole channels with probability `p` and rescales the survivors.
pub fn channel_dropout(feat: &FeatureMap, p: f64, rng: &mut Rng) -> Result<FeatureMap> {
    if p == 0.0 {
        return Ok(feat.clone());
    }
    let scales = dropout_scales(feat.channels(), p, rng)?;
    Ok(scale_channels(feat, &scales))
}

/// Elementwise factors `1 + N`, `N ~ U[−amplitude, amplitude]`.
pub fn noise_factors(c: usize, h: usize, w: usize, amplitude: f64, rng: &mut Rng) -> Result<Tensor3> {
    if !(amplitude >= 0.0) {
        return Err(Error::Argument(format!("noise amplitude must be >= 0, got {amplitude}")));
    }
    if amplitude == 0.0 {
        return Ok(Tensor3::filled(c, h, w, 1.0));
    }
    Ok(Tensor3::from_fn(c, h, w, |_, _, _| {
        1.0 + rng.random_range(-amplitude..=amplitude)
    }))
}

/// `feat ⊙ (1 + N)`.
pub fn uniform_noise(feat: &FeatureMap, amplitude: f64, rng: &mut Rng) -> Result<FeatureMap> {
    if amplitude == 0.0 {
        return Ok(feat.clone());
    }
    let (c, h, w) = feat.shape();
    let f = noise_factors(c, h, w, amplitude, rng)?;
    feat.zip_map(&f, |a, b| a * b)
}

/// Adversarial direction for `decoder` at `feat`, found by power iteration on
/// the KL divergence between clean and perturbed predictions. Returns the
/// additive offset `eps · d̂`.
pub fn vat_offset(
    feat: &FeatureMap,
    decoder: &dyn FeatureDecoder,
    spec: &FeaturePerturbSpec,
    rng: &mut Rng,
) -> Result<Tensor3> {
    if !(spec.vat_xi > 0.0) || spec.vat_iters == 0 {
        return Err(Error::Argument("vat needs vat_xi > 0 and vat_iters >= 1".into()));
    }
    let (c, h, w) = feat.shape();
    let mut d = Tensor3::from_fn(c, h, w, |_, _, _| StandardNormal.sample(rng));
    let n0 = d.l2_norm();
    d.scale(1.0 / n0);
    let clean = ProbabilityMap::from_logits(&decoder.decode_logits(feat)?);
    for iter in 0..spec.vat_iters {
        let probe = feat.zip_map(&d, |e, v| e + spec.vat_xi * v)?;
        let perturbed = ProbabilityMap::from_logits(&decoder.decode_logits(&probe)?);
        // d KL(clean || perturbed) / d logits_perturbed = softmax(perturbed) − clean
        let grad_logits = perturbed.tensor().zip_map(clean.tensor(), |q, p| q - p)?;
        let g = decoder.feature_gradient(&probe, &grad_logits)?;
        if !g.is_finite() {
            return Err(Error::non_finite(format!("vat power iteration {iter}")));
        }
        let norm = g.l2_norm();
        if norm > 0.0 {
            d = g;
            d.scale(1.0 / norm);
        }
    }
    d.scale(spec.vat_eps);
    Ok(d)
}

/// `feat + eps · d̂`.
pub fn vat_perturb(
    feat: &FeatureMap,
    decoder: &dyn FeatureDecoder,
    spec: &FeaturePerturbSpec,
    rng: &mut Rng,
) -> Result<FeatureMap> {
    let offset = vat_offset(feat, decoder, spec, rng)?;
    feat.zip_map(&offset, |a, b| a + b)
}

/// A sampled, frozen perturbation: applying it is deterministic, and its
/// backward pass is the matching linear map.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureNoise {
    Identity,
    ChannelScale(Vec<f64>),
    Multiplicative(Tensor3),
    Additive(Tensor3),
}

impl FeatureNoise {
    /// Draws a perturbation for `feat`; `decoder` is only consulted for VAT.
    pub fn sample(
        spec: &FeaturePerturbSpec,
        feat: &FeatureMap,
        decoder: &dyn FeatureDecoder,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (c, h, w) = feat.shape();
        Ok(match spec.kind {
            PerturbKind::None => FeatureNoise::Identity,
            PerturbKind::ChannelDropout => FeatureNoise::ChannelScale(dropout_scales(c, spec.dropout_prob, rng)?),
            PerturbKind::UniformNoise => {
                FeatureNoise::Multiplicative(noise_factors(c, h, w, spec.noise_amplitude, rng)?)
            }
            PerturbKind::Vat => FeatureNoise::Additive(vat_offset(feat, decoder, spec, rng)?),
        })
    }

    pub fn apply(&self, feat: &FeatureMap) -> Result<FeatureMap> {
        match self {
            FeatureNoise::Identity => Ok(feat.clone()),
            FeatureNoise::ChannelScale(s) => {
                if s.len() != feat.channels() {
                    return Err(Error::Shape(format!(
                        "{} channel factors for {} channels",
                        s.len(),
                        feat.channels()
                    )));
                }
                Ok(scale_channels(feat, s))
            }
            FeatureNoise::Multiplicative(f) => feat.zip_map(f, |a, b| a * b),
            FeatureNoise::Additive(o) => feat.zip_map(o, |a, b| a + b),
        }
    }

    /// Gradient w.r.t. the unperturbed features.
    pub fn backward(&self, grad: Tensor3) -> Tensor3 {
        match self {
            FeatureNoise::Identity | FeatureNoise::Additive(_) => grad,
            FeatureNoise::ChannelScale(s) => scale_channels(&grad, s),
            FeatureNoise::Multiplicative(f) => grad.zip_map(f, |g, m| g * m).expect("noise shape"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{SegModel, TinyNetConfig};
    use crate::nn::uniform_tensor;
    use crate::rng::SeedTree;

    #[test]
    fn zero_probability_is_identity() {
        let mut rng = SeedTree::new(1).rng();
        let f = uniform_tensor(8, 4, 4, -1.0, 1.0, &mut rng);
        assert_eq!(channel_dropout(&f, 0.0, &mut rng).unwrap(), f);
        assert_eq!(uniform_noise(&f, 0.0, &mut rng).unwrap(), f);
    }

    #[test]
    fn dropout_rejects_p_one() {
        let f = Tensor3::zeros(2, 2, 2);
        assert!(matches!(channel_dropout(&f, 1.0, &mut SeedTree::new(0).rng()), Err(Error::Argument(_))));
    }

    #[test]
    fn dropout_channels_are_all_or_nothing() {
        let mut rng = SeedTree::new(2).rng();
        let f = uniform_tensor(16, 5, 5, 0.1, 1.0, &mut rng);
        let out = channel_dropout(&f, 0.5, &mut rng).unwrap();
        for c in 0..16 {
            let zeroed = out.channel(c).iter().all(|&v| v == 0.0);
            let doubled = out.channel(c).iter().zip(f.channel(c)).all(|(o, i)| *o == 2.0 * i);
            assert!(zeroed ^ doubled, "channel {c}");
        }
    }

    #[test]
    fn uniform_noise_range_and_oracle() {
        let ones = Tensor3::filled(4, 6, 6, 1.0);
        let out = uniform_noise(&ones, 0.3, &mut SeedTree::new(3).rng()).unwrap();
        assert!(out.data().iter().all(|v| (0.7..=1.3).contains(v)));
        let f = uniform_tensor(4, 6, 6, -2.0, 2.0, &mut SeedTree::new(4).rng());
        let got = uniform_noise(&f, 0.3, &mut SeedTree::new(5).rng()).unwrap();
        let mut rng = SeedTree::new(5).rng();
        for (i, (g, x)) in got.data().iter().zip(f.data()).enumerate() {
            let n: f64 = rng.random_range(-0.3..=0.3);
            assert_eq!(*g, x * (1.0 + n), "element {i}");
        }
        assert!(uniform_noise(&f, -0.1, &mut rng).is_err());
    }

    #[test]
    fn vat_norm_equals_eps() {
        let m = SegModel::tiny(&TinyNetConfig::default(), &mut SeedTree::new(6).rng()).unwrap();
        let mut rng = SeedTree::new(7).rng();
        let img = uniform_tensor(3, 16, 16, 0.0, 1.0, &mut rng);
        let feat = m.encode(&img).unwrap();
        let spec = FeaturePerturbSpec {
            kind: PerturbKind::Vat,
            ..Default::default()
        };
        let out = vat_perturb(&feat, &m, &spec, &mut rng).unwrap();
        let diff = out.zip_map(&feat, |a, b| a - b).unwrap();
        assert!((diff.l2_norm() - spec.vat_eps).abs() < 1e-5);
        assert_eq!(out.shape(), feat.shape());

        let tiny = FeaturePerturbSpec {
            vat_eps: 1e-12,
            ..spec
        };
        let out = vat_perturb(&feat, &m, &tiny, &mut rng).unwrap();
        let diff = out.zip_map(&feat, |a, b| a - b).unwrap();
        assert!(diff.l2_norm() < 1e-8);
    }

    #[test]
    fn frozen_noise_apply_and_backward() {
        let mut rng = SeedTree::new(8).rng();
        let f = uniform_tensor(4, 3, 3, -1.0, 1.0, &mut rng);
        assert_eq!(FeatureNoise::Identity.apply(&f).unwrap(), f);
        let n = FeatureNoise::ChannelScale(vec![0.0, 2.0, 2.0, 0.0]);
        let out = n.apply(&f).unwrap();
        assert!(out.channel(0).iter().all(|&v| v == 0.0));
        let g = n.backward(Tensor3::filled(4, 3, 3, 1.0));
        assert_eq!(g.channel(1)[0], 2.0);
        assert!(FeatureNoise::ChannelScale(vec![1.0]).apply(&f).is_err());
    }

    #[test]
    fn kind_parses_from_string() {
        assert_eq!("vat".parse::<PerturbKind>().unwrap(), PerturbKind::Vat);
        assert!("gaussian".parse::<PerturbKind>().is_err());
    }
}
