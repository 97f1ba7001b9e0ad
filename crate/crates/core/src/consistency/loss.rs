use crate::error::{Error, Result};
use crate::tensor::{LabelMask, LogitMap, ProbabilityMap, Tensor3, IGNORE_INDEX};

use super::VariantConfig;

/// Hard pseudo label plus its confidence mask. Pure data: nothing downstream
/// can push a gradient into it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabel {
    pub hard: LabelMask,
    pub valid: Vec<bool>,
}

impl PseudoLabel {
    /// Training target: the hard label where valid, [`IGNORE_INDEX`] elsewhere.
    pub fn to_target(&self) -> LabelMask {
        let data = self
            .hard
            .data()
            .iter()
            .zip(&self.valid)
            .map(|(&c, &v)| if v { c } else { IGNORE_INDEX })
            .collect();
        LabelMask::from_vec(self.hard.height(), self.hard.width(), data).expect("shape preserved")
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Marks pixels that are ignored in `region` (e.g. crop padding) invalid.
    pub fn restrict_to(&mut self, region: &LabelMask) {
        for (v, &r) in self.valid.iter_mut().zip(region.data()) {
            if r == IGNORE_INDEX {
                *v = false;
            }
        }
    }
}

/// Per-pixel argmax and the `max(p) ≥ τ` indicator.
pub fn pseudo_label(probs: &ProbabilityMap, tau: f64) -> Result<PseudoLabel> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Argument(format!("tau must lie in [0, 1], got {tau}")));
    }
    let hard = probs.argmax();
    let valid = probs.max_prob().into_iter().map(|m| m >= tau).collect();
    Ok(PseudoLabel { hard, valid })
}

/// [`pseudo_label`] on a raw tensor, rejecting maps that are not per-pixel
/// distributions.
pub fn pseudo_label_checked(probs: &Tensor3, tau: f64) -> Result<PseudoLabel> {
    pseudo_label(&ProbabilityMap::try_new(probs.clone())?, tau)
}

fn check_shapes(logits: &LogitMap, target: &LabelMask) -> Result<()> {
    if (logits.height(), logits.width()) != (target.height(), target.width()) {
        return Err(Error::Argument(format!(
            "logits {}x{} vs target {}x{}",
            logits.height(),
            logits.width(),
            target.height(),
            target.width()
        )));
    }
    Ok(())
}

/// Cross-entropy summed over scored pixels, the number of scored pixels, and
/// the gradient of `grad_scale · sum` w.r.t. the logits.
pub fn ce_sum_and_grad(logits: &LogitMap, target: &LabelMask, grad_scale: f64) -> Result<(f64, usize, LogitMap)> {
    let weights: Vec<f64> = target
        .data()
        .iter()
        .map(|&t| if t == IGNORE_INDEX { 0.0 } else { 1.0 })
        .collect();
    weighted_ce_sum_and_grad(logits, target, &weights, grad_scale)
}

/// As [`ce_sum_and_grad`] with an explicit per-pixel weight (0 drops a pixel).
pub fn weighted_ce_sum_and_grad(
    logits: &LogitMap,
    target: &LabelMask,
    weights: &[f64],
    grad_scale: f64,
) -> Result<(f64, usize, LogitMap)> {
    check_shapes(logits, target)?;
    let (k, h, w) = logits.shape();
    let n = h * w;
    let z = logits.data();
    let mut grad = LogitMap::zeros(k, h, w);
    let g = grad.data_mut();
    let mut sum = 0.0;
    let mut count = 0;
    for (p, (&t, &wt)) in target.data().iter().zip(weights).enumerate() {
        if t == IGNORE_INDEX || wt == 0.0 {
            continue;
        }
        let t = t as usize;
        if t >= k {
            return Err(Error::Argument(format!("target class {t} outside 0..{k}")));
        }
        let max = (0..k).map(|c| z[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..k).map(|c| (z[c * n + p] - max).exp()).sum();
        let lse = max + denom.ln();
        sum += wt * (lse - z[t * n + p]);
        count += 1;
        if grad_scale != 0.0 {
            for c in 0..k {
                let soft = (z[c * n + p] - lse).exp();
                let onehot = if c == t { 1.0 } else { 0.0 };
                g[c * n + p] = grad_scale * wt * (soft - onehot);
            }
        }
    }
    Ok((sum, count, grad))
}

/// Mean cross-entropy over valid pixels; zero when nothing is valid.
pub fn masked_ce(logits: &LogitMap, pl: &PseudoLabel) -> Result<f64> {
    check_shapes(logits, &pl.hard)?;
    let (sum, count, _) = ce_sum_and_grad(logits, &pl.to_target(), 0.0)?;
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// `λ · mean(feature-stream losses) + μ · mean(image-stream losses)`; an empty
/// list drops its term.
pub fn combine_unsup(fp_losses: &[f64], image_losses: &[f64], lambda: f64, mu: f64) -> Result<f64> {
    if fp_losses.is_empty() && image_losses.is_empty() {
        return Err(Error::Argument("no unsupervised streams".into()));
    }
    let mut total = 0.0;
    if !fp_losses.is_empty() {
        total += lambda * (fp_losses.iter().sum::<f64>() / fp_losses.len() as f64);
    }
    if !image_losses.is_empty() {
        total += mu * (image_losses.iter().sum::<f64>() / image_losses.len() as f64);
    }
    Ok(total)
}

/// Unsupervised loss over feature-perturbed and strongly perturbed predictions
/// sharing one pseudo label.
pub fn unimatch_unsup_loss(
    fp_logits: &[LogitMap],
    strong_logits: &[LogitMap],
    pl: &PseudoLabel,
    cfg: &VariantConfig,
) -> Result<f64> {
    if fp_logits.len() != cfg.n_feature_streams || strong_logits.len() != cfg.n_image_streams {
        return Err(Error::Argument(format!(
            "got {} feature / {} image predictions for {} / {} streams",
            fp_logits.len(),
            strong_logits.len(),
            cfg.n_feature_streams,
            cfg.n_image_streams
        )));
    }
    let fp: Vec<f64> = fp_logits.iter().map(|l| masked_ce(l, pl)).collect::<Result<_>>()?;
    let img: Vec<f64> = strong_logits.iter().map(|l| masked_ce(l, pl)).collect::<Result<_>>()?;
    combine_unsup(&fp, &img, cfg.lambda, cfg.mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::Variant;
    use crate::nn::uniform_tensor;
    use crate::rng::SeedTree;

    fn probs(values: &[f64]) -> ProbabilityMap {
        ProbabilityMap::try_new(Tensor3::from_vec(values.len(), 1, 1, values.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn threshold_arithmetic() {
        let pl = pseudo_label(&probs(&[0.97, 0.02, 0.01]), 0.95).unwrap();
        assert_eq!(pl.hard.get(0, 0), 0);
        assert!(pl.valid[0]);
        let pl = pseudo_label(&probs(&[0.5, 0.3, 0.2]), 0.95).unwrap();
        assert_eq!(pl.hard.get(0, 0), 0);
        assert!(!pl.valid[0]);
        let pl = pseudo_label(&probs(&[0.34, 0.33, 0.33]), 0.0).unwrap();
        assert!(pl.valid[0]);
    }

    #[test]
    fn unnormalized_input_is_rejected() {
        let t = Tensor3::from_vec(2, 1, 1, vec![0.6, 0.6]).unwrap();
        assert!(matches!(pseudo_label_checked(&t, 0.5), Err(Error::Contract(_))));
        let ok = Tensor3::from_vec(2, 1, 1, vec![0.5, 0.5005]).unwrap();
        assert!(pseudo_label_checked(&ok, 0.5).is_ok());
    }

    #[test]
    fn ce_limits() {
        let pl = PseudoLabel {
            hard: LabelMask::filled(2, 2, 1),
            valid: vec![true; 4],
        };
        let confident = Tensor3::from_fn(3, 2, 2, |c, _, _| if c == 1 { 20.0 } else { 0.0 });
        assert!(masked_ce(&confident, &pl).unwrap() < 1e-4);
        let uniform = Tensor3::filled(3, 2, 2, 0.3);
        assert!((masked_ce(&uniform, &pl).unwrap() - 3f64.ln()).abs() < 1e-6);
        let none = PseudoLabel {
            valid: vec![false; 4],
            ..pl
        };
        assert_eq!(masked_ce(&uniform, &none).unwrap(), 0.0);
        let (_, _, g) = ce_sum_and_grad(&uniform, &none.to_target(), 1.0).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_valid_matches_scalar_oracle() {
        let logits = Tensor3::from_vec(2, 2, 2, vec![1.0, -0.5, 2.0, 0.0, 0.2, 0.3, -1.0, 4.0]).unwrap();
        let pl = PseudoLabel {
            hard: LabelMask::from_vec(2, 2, vec![0, 1, 0, 1]).unwrap(),
            valid: vec![true, false, false, true],
        };
        // pixel 0: logits (1.0, 0.2), class 0; pixel 3: logits (0.0, 4.0), class 1
        let ce = |z: [f64; 2], t: usize| -> f64 { (z[0].exp() + z[1].exp()).ln() - z[t] };
        let want = (ce([1.0, 0.2], 0) + ce([0.0, 4.0], 1)) / 2.0;
        assert!((masked_ce(&logits, &pl).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = SeedTree::new(3).rng();
        let logits = uniform_tensor(3, 2, 3, -2.0, 2.0, &mut rng);
        let target = LabelMask::from_vec(2, 3, vec![0, 2, IGNORE_INDEX, 1, 1, 0]).unwrap();
        let (_, _, g) = ce_sum_and_grad(&logits, &target, 1.0).unwrap();
        let eps = 1e-6;
        for i in 0..logits.data().len() {
            let mut p = logits.clone();
            p.data_mut()[i] += eps;
            let mut m = logits.clone();
            m.data_mut()[i] -= eps;
            let fd = (ce_sum_and_grad(&p, &target, 0.0).unwrap().0 - ce_sum_and_grad(&m, &target, 0.0).unwrap().0)
                / (2.0 * eps);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn stream_weighting() {
        let h = 0.731;
        assert!((combine_unsup(&[h], &[h, h], 0.5, 0.5).unwrap() - h).abs() < 1e-15);
        assert_eq!(combine_unsup(&[], &[h], 0.5, 1.0).unwrap(), h);
        assert!(combine_unsup(&[], &[], 0.5, 0.5).is_err());
    }

    #[test]
    fn unsup_loss_reductions() {
        let mut rng = SeedTree::new(4).rng();
        let pl = PseudoLabel {
            hard: LabelMask::from_fn(4, 4, |y, x| ((y + x) % 3) as u8),
            valid: (0..16).map(|i| i % 3 != 0).collect(),
        };
        let a = uniform_tensor(3, 4, 4, -1.0, 1.0, &mut rng);
        let b = uniform_tensor(3, 4, 4, -1.0, 1.0, &mut rng);
        let fixmatch = VariantConfig {
            mu: 1.0,
            ..VariantConfig::preset(Variant::Fixmatch)
        };
        assert_eq!(
            unimatch_unsup_loss(&[], &[a.clone()], &pl, &fixmatch).unwrap(),
            masked_ce(&a, &pl).unwrap()
        );
        let uniperb = VariantConfig {
            lambda: 1.0,
            mu: 1.0,
            ..VariantConfig::preset(Variant::Uniperb)
        };
        let got = unimatch_unsup_loss(&[b.clone()], &[a.clone()], &pl, &uniperb).unwrap();
        let want = masked_ce(&b, &pl).unwrap() + masked_ce(&a, &pl).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!(unimatch_unsup_loss(&[], &[a], &pl, &uniperb).is_err());
    }
}
