use rand::Rng as _;

use super::{AugRecord, Rect};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ImageTensor, LabelMask};

/// Box covering a uniform fraction of the frame in `area`, aspect ratio
/// log-uniform in `[1/2, 2]`, uniform position.
pub fn sample_cutmix_box(height: usize, width: usize, area: (f64, f64), rng: &mut Rng) -> Rect {
    let frac = if area.1 > area.0 {
        rng.random_range(area.0..=area.1)
    } else {
        area.0
    };
    let target = frac * (height * width) as f64;
    let ratio = rng.random_range(-std::f64::consts::LN_2..=std::f64::consts::LN_2).exp();
    let w = ((target * ratio).sqrt().round() as usize).clamp(1, width);
    let h = ((target / ratio).sqrt().round() as usize).clamp(1, height);
    let x = rng.random_range(0..=width - w);
    let y = rng.random_range(0..=height - h);
    Rect::new(x, y, w, h)
}

/// Mixes each sample with its successor (`i + 1 mod B`) with probability
/// `prob`. Image and mask share the box. Partners are always read from the
/// unmixed input batch.
pub fn cutmix_batch(
    images: &[ImageTensor],
    masks: &[LabelMask],
    prob: f64,
    area: (f64, f64),
    rng: &mut Rng,
) -> Result<(Vec<ImageTensor>, Vec<LabelMask>, Vec<AugRecord>)> {
    if images.len() != masks.len() {
        return Err(Error::Argument(format!(
            "{} images but {} masks",
            images.len(),
            masks.len()
        )));
    }
    let Some(first) = images.first() else {
        return Ok((Vec::new(), Vec::new(), Vec::new()));
    };
    let (h, w) = (first.height(), first.width());
    for (img, m) in images.iter().zip(masks) {
        if img.shape() != first.shape() || (m.height(), m.width()) != (h, w) {
            return Err(Error::Shape("cutmix batch must share one shape".into()));
        }
    }
    let b = images.len();
    let records: Vec<AugRecord> = (0..b)
        .map(|i| {
            let mut rec = AugRecord::identity(h, w);
            if prob > 0.0 && b < 2 {
                rec.cutmix_skipped = true;
            } else if prob > 0.0 && rng.random_bool(prob) {
                rec.cutmix_box = Some(sample_cutmix_box(h, w, area, rng));
                rec.cutmix_partner = Some((i + 1) % b);
            }
            rec
        })
        .collect();
    let (imgs, ms) = apply_cutmix(images, masks, &records)?;
    Ok((imgs, ms, records))
}

/// Replays recorded CutMix boxes.
pub fn apply_cutmix(
    images: &[ImageTensor],
    masks: &[LabelMask],
    records: &[AugRecord],
) -> Result<(Vec<ImageTensor>, Vec<LabelMask>)> {
    let mut out_i = images.to_vec();
    let mut out_m = masks.to_vec();
    for (i, rec) in records.iter().enumerate() {
        let (Some(bx), Some(p)) = (rec.cutmix_box, rec.cutmix_partner) else {
            continue;
        };
        let (src_i, src_m) = (&images[p], &masks[p]);
        if !bx.fits_within(src_i.height(), src_i.width()) {
            return Err(Error::Argument(format!("cutmix box {bx:?} outside the crop")));
        }
        for c in 0..src_i.channels() {
            for y in bx.y..bx.y + bx.h {
                for x in bx.x..bx.x + bx.w {
                    out_i[i].set(c, y, x, src_i.get(c, y, x));
                }
            }
        }
        for y in bx.y..bx.y + bx.h {
            for x in bx.x..bx.x + bx.w {
                out_m[i].set(y, x, src_m.get(y, x));
            }
        }
    }
    Ok((out_i, out_m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use crate::tensor::Tensor3;

    fn pair() -> (Vec<ImageTensor>, Vec<LabelMask>) {
        let a = Tensor3::from_fn(3, 4, 4, |c, y, x| (c * 16 + y * 4 + x) as f64);
        let b = Tensor3::from_fn(3, 4, 4, |c, y, x| -1.0 - (c * 16 + y * 4 + x) as f64);
        (
            vec![a, b],
            vec![LabelMask::filled(4, 4, 0), LabelMask::filled(4, 4, 1)],
        )
    }

    fn record_with(bx: Rect) -> AugRecord {
        AugRecord {
            cutmix_box: Some(bx),
            cutmix_partner: Some(1),
            ..AugRecord::identity(4, 4)
        }
    }

    #[test]
    fn whole_box_copies_partner() {
        let (imgs, masks) = pair();
        let recs = vec![record_with(Rect::new(0, 0, 4, 4)), AugRecord::identity(4, 4)];
        let (oi, om) = apply_cutmix(&imgs, &masks, &recs).unwrap();
        assert_eq!(oi[0], imgs[1]);
        assert_eq!(om[0], masks[1]);
        assert_eq!(oi[1], imgs[1]);
    }

    #[test]
    fn empty_box_keeps_original() {
        let (imgs, masks) = pair();
        let recs = vec![record_with(Rect::new(2, 2, 0, 0)), AugRecord::identity(4, 4)];
        let (oi, om) = apply_cutmix(&imgs, &masks, &recs).unwrap();
        assert_eq!(oi[0], imgs[0]);
        assert_eq!(om[0], masks[0]);
    }

    #[test]
    fn pixel_provenance_oracle() {
        let (imgs, masks) = pair();
        let bx = Rect::new(1, 1, 2, 2);
        let recs = vec![record_with(bx), AugRecord::identity(4, 4)];
        let (oi, om) = apply_cutmix(&imgs, &masks, &recs).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let inside = (1..3).contains(&y) && (1..3).contains(&x);
                    let want = if inside { imgs[1].get(c, y, x) } else { imgs[0].get(c, y, x) };
                    assert_eq!(oi[0].get(c, y, x), want);
                }
            }
        }
        let from_partner = om[0].data().iter().filter(|&&v| v == 1).count();
        assert_eq!(from_partner, bx.area());
    }

    #[test]
    fn single_sample_batch_records_skip() {
        let (imgs, masks) = pair();
        let (oi, _, recs) = cutmix_batch(&imgs[..1], &masks[..1], 1.0, (0.1, 0.5), &mut SeedTree::new(0).rng()).unwrap();
        assert_eq!(oi[0], imgs[0]);
        assert!(recs[0].cutmix_skipped);
        assert!(recs[0].cutmix_box.is_none());
    }

    #[test]
    fn sampled_boxes_fit_and_respect_area() {
        let mut rng = SeedTree::new(1).rng();
        for _ in 0..500 {
            let b = sample_cutmix_box(32, 24, (0.1, 0.5), &mut rng);
            assert!(b.fits_within(32, 24));
            let frac = b.area() as f64 / (32.0 * 24.0);
            assert!(frac > 0.05 && frac < 0.6, "{b:?}");
        }
    }
}
