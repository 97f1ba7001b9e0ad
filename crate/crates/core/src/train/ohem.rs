use serde::{Deserialize, Serialize};

use crate::consistency::weighted_ce_sum_and_grad;
use crate::error::{Error, Result};
use crate::tensor::{LabelMask, LogitMap, IGNORE_INDEX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OhemConfig {
    #[serde(default = "default_thresh")]
    pub thresh: f64,
    /// `None` keeps at least one sixteenth of the batch pixels.
    #[serde(default)]
    pub min_kept: Option<usize>,
}

fn default_thresh() -> f64 {
    0.7
}

impl Default for OhemConfig {
    fn default() -> Self {
        Self {
            thresh: default_thresh(),
            min_kept: None,
        }
    }
}

fn target_prob(logits: &LogitMap, p: usize, t: usize) -> f64 {
    let (k, h, w) = logits.shape();
    let n = h * w;
    let z = logits.data();
    let max = (0..k).map(|c| z[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = (0..k).map(|c| (z[c * n + p] - max).exp()).sum();
    (z[t * n + p] - max).exp() / denom
}

/// 0/1 pixel weights selecting the hard pixels of a whole batch.
///
/// Pixels are ranked by target-class probability; the kept set is every pixel
/// below `thresh`, grown to the `min_kept` hardest when fewer qualify.
pub fn ohem_keep_weights(items: &[(&LogitMap, &LabelMask)], cfg: &OhemConfig) -> Result<Vec<Vec<f64>>> {
    if !(cfg.thresh > 0.0 && cfg.thresh <= 1.0) {
        return Err(Error::Config(format!("ohem thresh must lie in (0, 1], got {}", cfg.thresh)));
    }
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    let mut total_pixels = 0;
    for (i, (logits, target)) in items.iter().enumerate() {
        if logits.height() != target.height() || logits.width() != target.width() {
            return Err(Error::Shape("ohem logits and target differ in size".into()));
        }
        total_pixels += target.len();
        for (p, &t) in target.data().iter().enumerate() {
            if t == IGNORE_INDEX {
                continue;
            }
            if t as usize >= logits.channels() {
                return Err(Error::Argument(format!("target class {t} outside 0..{}", logits.channels())));
            }
            ranked.push((target_prob(logits, p, t as usize), i, p));
        }
    }
    let min_kept = cfg.min_kept.unwrap_or(total_pixels / 16);
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let hard = ranked.iter().take_while(|r| r.0 < cfg.thresh).count();
    let keep = hard.max(min_kept.min(ranked.len()));
    let mut weights: Vec<Vec<f64>> = items.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    for &(_, i, p) in &ranked[..keep] {
        weights[i][p] = 1.0;
    }
    Ok(weights)
}

/// Cross-entropy averaged over the OHEM-selected pixels of one map.
pub fn ohem_ce(logits: &LogitMap, target: &LabelMask, thresh: f64, min_kept: usize) -> Result<f64> {
    if min_kept == 0 {
        return Err(Error::Argument("min_kept must be >= 1".into()));
    }
    let cfg = OhemConfig {
        thresh,
        min_kept: Some(min_kept),
    };
    let weights = ohem_keep_weights(&[(logits, target)], &cfg)?;
    let (sum, count, _) = weighted_ce_sum_and_grad(logits, target, &weights[0], 0.0)?;
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::ce_sum_and_grad;
    use crate::tensor::Tensor3;

    fn case() -> (LogitMap, LabelMask) {
        let logits = Tensor3::from_fn(3, 3, 3, |c, y, x| ((c * 7 + y * 3 + x * 5) % 11) as f64 * 0.4 - 2.0);
        let target = LabelMask::from_fn(3, 3, |y, x| if (y, x) == (1, 1) { IGNORE_INDEX } else { ((y + x) % 3) as u8 });
        (logits, target)
    }

    fn plain_ce(logits: &LogitMap, target: &LabelMask) -> f64 {
        let (s, c, _) = ce_sum_and_grad(logits, target, 0.0).unwrap();
        s / c as f64
    }

    #[test]
    fn threshold_one_is_plain_ce() {
        let (l, t) = case();
        assert_eq!(ohem_ce(&l, &t, 1.0, 1).unwrap(), plain_ce(&l, &t));
    }

    #[test]
    fn large_min_kept_is_plain_ce() {
        let (l, t) = case();
        assert_eq!(ohem_ce(&l, &t, 1e-9, 100).unwrap(), plain_ce(&l, &t));
    }

    #[test]
    fn confident_pixels_keep_the_min_kept_hardest() {
        // every pixel confidently correct, confidence varies with position
        let target = LabelMask::from_fn(4, 4, |y, x| ((y * 4 + x) % 2) as u8);
        let logits = Tensor3::from_fn(2, 4, 4, |c, y, x| {
            let p = y * 4 + x;
            let margin = 3.0 + p as f64 * 0.25;
            if c as usize == p % 2 { margin } else { 0.0 }
        });
        let got = ohem_ce(&logits, &target, 0.5, 5).unwrap();
        // sorting oracle: the 5 smallest margins are pixels 0..5
        let ces: Vec<f64> = (0..5).map(|p| (1.0 + (-(3.0 + p as f64 * 0.25_f64)).exp()).ln()).collect();
        let want = ces.iter().sum::<f64>() / 5.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn all_ignored_is_zero() {
        let (l, _) = case();
        let t = LabelMask::filled(3, 3, IGNORE_INDEX);
        assert_eq!(ohem_ce(&l, &t, 0.7, 3).unwrap(), 0.0);
    }

    #[test]
    fn zero_min_kept_rejected() {
        let (l, t) = case();
        assert!(ohem_ce(&l, &t, 0.7, 0).is_err());
    }
}
