use rand::Rng as _;

use super::{AugPipelineConfig, AugRecord, Rect};
use crate::error::{Error, Result};
use crate::nn::resize_bilinear;
use crate::rng::Rng;
use crate::tensor::{ImageTensor, LabelMask, Tensor3, IGNORE_INDEX};

fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    (((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
}

/// Nearest-neighbour resize; output values are always copies of input values.
pub fn resize_nearest(mask: &LabelMask, out_h: usize, out_w: usize) -> LabelMask {
    let (h, w) = (mask.height(), mask.width());
    if (h, w) == (out_h, out_w) {
        return mask.clone();
    }
    LabelMask::from_fn(out_h, out_w, |y, x| {
        mask.get(nearest_index(y, h, out_h), nearest_index(x, w, out_w))
    })
}

fn resized_dims(h: usize, w: usize, scale: f64) -> (usize, usize) {
    (
        ((h as f64 * scale).round() as usize).max(1),
        ((w as f64 * scale).round() as usize).max(1),
    )
}

/// Samples a weak view: random rescale, crop (zero / ignore padded), flip.
pub fn weak_augment(
    image: &ImageTensor,
    mask: Option<&LabelMask>,
    cfg: &AugPipelineConfig,
    rng: &mut Rng,
) -> Result<(ImageTensor, Option<LabelMask>, AugRecord)> {
    cfg.validate()?;
    if image.height() == 0 || image.width() == 0 {
        return Err(Error::Argument("image must be at least 1x1".into()));
    }
    let (lo, hi) = cfg.scale_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let (rh, rw) = resized_dims(image.height(), image.width(), scale);
    let ts = cfg.train_size;
    let (ph, pw) = (rh.max(ts), rw.max(ts));
    let x = rng.random_range(0..=pw - ts);
    let y = rng.random_range(0..=ph - ts);
    let hflip = rng.random_bool(cfg.hflip_prob);
    let record = AugRecord {
        scale,
        crop_box: Rect::new(x, y, ts, ts),
        hflip,
        ..AugRecord::identity(ts, ts)
    };
    let (img, m) = apply_weak(image, mask, &record)?;
    Ok((img, m, record))
}

/// Replays the geometric part of a record.
pub fn apply_weak(
    image: &ImageTensor,
    mask: Option<&LabelMask>,
    record: &AugRecord,
) -> Result<(ImageTensor, Option<LabelMask>)> {
    if let Some(m) = mask {
        if (m.height(), m.width()) != (image.height(), image.width()) {
            return Err(Error::Shape(format!(
                "mask {}x{} vs image {}x{}",
                m.height(),
                m.width(),
                image.height(),
                image.width()
            )));
        }
    }
    let (rh, rw) = resized_dims(image.height(), image.width(), record.scale);
    let resized = resize_bilinear(image, rh, rw);
    let resized_mask = mask.map(|m| resize_nearest(m, rh, rw));
    let cb = record.crop_box;
    let mut out = Tensor3::from_fn(image.channels(), cb.h, cb.w, |c, y, x| {
        let (sy, sx) = (cb.y + y, cb.x + x);
        if sy < rh && sx < rw {
            resized.get(c, sy, sx)
        } else {
            0.0
        }
    });
    let mut out_mask = resized_mask.map(|m| {
        LabelMask::from_fn(cb.h, cb.w, |y, x| {
            let (sy, sx) = (cb.y + y, cb.x + x);
            if sy < rh && sx < rw {
                m.get(sy, sx)
            } else {
                IGNORE_INDEX
            }
        })
    });
    if record.hflip {
        out = out.flip_horizontal();
        out_mask = out_mask.map(|m| m.flip_horizontal());
    }
    Ok((out, out_mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform_tensor;
    use crate::rng::SeedTree;
    use std::collections::BTreeSet;

    // Independent per-pixel bilinear sample, half-pixel centres, clamped.
    fn bilinear_at(img: &Tensor3, c: usize, oy: usize, ox: usize, out_h: usize, out_w: usize) -> f64 {
        let sy = ((oy as f64 + 0.5) * img.height() as f64 / out_h as f64 - 0.5).max(0.0);
        let sx = ((ox as f64 + 0.5) * img.width() as f64 / out_w as f64 - 0.5).max(0.0);
        let y0 = (sy.floor() as usize).min(img.height() - 1);
        let x0 = (sx.floor() as usize).min(img.width() - 1);
        let y1 = (y0 + 1).min(img.height() - 1);
        let x1 = (x0 + 1).min(img.width() - 1);
        let fy = if y1 == y0 { 0.0 } else { sy - y0 as f64 };
        let fx = if x1 == x0 { 0.0 } else { sx - x0 as f64 };
        let v00 = img.get(c, y0, x0);
        let v01 = img.get(c, y0, x1);
        let v10 = img.get(c, y1, x0);
        let v11 = img.get(c, y1, x1);
        v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
    }

    #[test]
    fn identity_record_is_bit_exact() {
        let img = uniform_tensor(3, 5, 5, 0.0, 1.0, &mut SeedTree::new(1).rng());
        let mask = LabelMask::from_fn(5, 5, |y, x| ((x + y) % 2) as u8);
        let rec = AugRecord::identity(5, 5);
        let (out, m) = apply_weak(&img, Some(&mask), &rec).unwrap();
        assert_eq!(out, img);
        assert_eq!(m.unwrap(), mask);
    }

    #[test]
    fn upper_left_quadrant_after_doubling() {
        let img = uniform_tensor(3, 4, 4, 0.0, 1.0, &mut SeedTree::new(2).rng());
        let rec = AugRecord {
            scale: 2.0,
            crop_box: Rect::new(0, 0, 4, 4),
            ..AugRecord::identity(4, 4)
        };
        let (out, _) = apply_weak(&img, None, &rec).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let want = bilinear_at(&img, c, y, x, 8, 8);
                    assert!((out.get(c, y, x) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn padding_uses_zero_and_ignore() {
        let img = Tensor3::filled(3, 4, 4, 0.7);
        let mask = LabelMask::filled(4, 4, 1);
        let rec = AugRecord {
            scale: 1.0,
            crop_box: Rect::new(0, 0, 6, 6),
            ..AugRecord::identity(6, 6)
        };
        let (out, m) = apply_weak(&img, Some(&mask), &rec).unwrap();
        let m = m.unwrap();
        assert_eq!(out.get(0, 5, 5), 0.0);
        assert_eq!(m.get(5, 5), IGNORE_INDEX);
        assert_eq!(m.get(3, 3), 1);
        assert_eq!(m.count_scored(), 16);
    }

    #[test]
    fn weak_output_has_train_size_and_closed_labels() {
        let cfg = AugPipelineConfig {
            train_size: 24,
            ..Default::default()
        };
        let mut rng = SeedTree::new(3).rng();
        let img = uniform_tensor(3, 32, 40, 0.0, 1.0, &mut rng);
        let mask = LabelMask::from_fn(32, 40, |y, _| (y / 16) as u8);
        for _ in 0..20 {
            let (out, m, rec) = weak_augment(&img, Some(&mask), &cfg, &mut rng).unwrap();
            assert_eq!(out.shape(), (3, 24, 24));
            let m = m.unwrap();
            let vals: BTreeSet<u8> = m.data().iter().copied().collect();
            assert!(vals.is_subset(&BTreeSet::from([0, 1, IGNORE_INDEX])));
            assert!((0.5..=2.0).contains(&rec.scale));
            let (again, again_m) = apply_weak(&img, Some(&mask), &rec).unwrap();
            assert_eq!(again, out);
            assert_eq!(again_m.unwrap(), m);
        }
    }

    #[test]
    fn zero_train_size_is_config_error() {
        let cfg = AugPipelineConfig {
            train_size: 0,
            ..Default::default()
        };
        let img = Tensor3::zeros(3, 4, 4);
        let r = weak_augment(&img, None, &cfg, &mut SeedTree::new(0).rng());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
