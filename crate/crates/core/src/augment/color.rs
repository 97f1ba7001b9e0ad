use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{AugPipelineConfig, AugRecord, ColorOp, ColorOpKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ImageTensor, Tensor3};

/// ITU-R 601 luma, the grayscale used by the jitter ops.
#[inline]
pub fn rgb_to_gray(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn sample_factor(magnitude: f64, rng: &mut Rng) -> f64 {
    let lo = (1.0 - magnitude).max(0.0);
    rng.random_range(lo..=1.0 + magnitude)
}

fn sample_ops(cfg: &AugPipelineConfig, rng: &mut Rng) -> Vec<ColorOp> {
    let mut ops = Vec::new();
    if !cfg.strong {
        return ops;
    }
    let j = &cfg.color_jitter;
    if rng.random_bool(j.prob) {
        let mut jitter = Vec::with_capacity(4);
        if j.brightness > 0.0 {
            jitter.push(ColorOp {
                op: ColorOpKind::Brightness,
                magnitude: sample_factor(j.brightness, rng),
            });
        }
        if j.contrast > 0.0 {
            jitter.push(ColorOp {
                op: ColorOpKind::Contrast,
                magnitude: sample_factor(j.contrast, rng),
            });
        }
        if j.saturation > 0.0 {
            jitter.push(ColorOp {
                op: ColorOpKind::Saturation,
                magnitude: sample_factor(j.saturation, rng),
            });
        }
        if j.hue > 0.0 {
            jitter.push(ColorOp {
                op: ColorOpKind::Hue,
                magnitude: rng.random_range(-j.hue..=j.hue),
            });
        }
        jitter.shuffle(rng);
        ops.extend(jitter);
    }
    if rng.random_bool(cfg.grayscale_prob) {
        ops.push(ColorOp {
            op: ColorOpKind::Grayscale,
            magnitude: 1.0,
        });
    }
    if rng.random_bool(cfg.blur_prob) {
        let (lo, hi) = cfg.blur_sigma;
        ops.push(ColorOp {
            op: ColorOpKind::Blur,
            magnitude: rng.random_range(lo..=hi),
        });
    }
    ops
}

/// Samples and applies the photometric part of the strong pipeline.
pub fn strong_color(image: &ImageTensor, cfg: &AugPipelineConfig, rng: &mut Rng) -> Result<(ImageTensor, AugRecord)> {
    cfg.validate()?;
    let ops = sample_ops(cfg, rng);
    let out = apply_color_ops(image, &ops)?;
    let record = AugRecord {
        color_ops: ops,
        ..AugRecord::identity(image.height(), image.width())
    };
    Ok((out, record))
}

/// Draws `n_views` independent strong views of one weak view.
pub fn sample_strong_views(
    weak_image: &ImageTensor,
    n_views: usize,
    cfg: &AugPipelineConfig,
    rng: &mut Rng,
) -> Result<Vec<(ImageTensor, AugRecord)>> {
    if n_views == 0 {
        return Err(Error::Argument("n_views must be at least 1".into()));
    }
    (0..n_views).map(|_| strong_color(weak_image, cfg, rng)).collect()
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn blur_plane(plane: &mut [f64], h: usize, w: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let sx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += k * plane[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[sy * w + x];
            }
            plane[y * w + x] = acc;
        }
    }
}

fn apply_op(rgb: &mut [Vec<f64>; 3], h: usize, w: usize, op: &ColorOp) {
    let n = h * w;
    let f = op.magnitude;
    match op.op {
        ColorOpKind::Brightness => {
            for ch in rgb.iter_mut() {
                ch.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
            }
        }
        ColorOpKind::Contrast => {
            let mean = (0..n).map(|p| rgb_to_gray(rgb[0][p], rgb[1][p], rgb[2][p])).sum::<f64>() / n as f64;
            for ch in rgb.iter_mut() {
                ch.iter_mut()
                    .for_each(|v| *v = (f * *v + (1.0 - f) * mean).clamp(0.0, 1.0));
            }
        }
        ColorOpKind::Saturation => {
            for p in 0..n {
                let g = rgb_to_gray(rgb[0][p], rgb[1][p], rgb[2][p]);
                for ch in rgb.iter_mut() {
                    ch[p] = (f * ch[p] + (1.0 - f) * g).clamp(0.0, 1.0);
                }
            }
        }
        ColorOpKind::Hue => {
            for p in 0..n {
                let (hh, s, v) = rgb_to_hsv(rgb[0][p], rgb[1][p], rgb[2][p]);
                let (r, g, b) = hsv_to_rgb(hh + f, s, v);
                rgb[0][p] = r;
                rgb[1][p] = g;
                rgb[2][p] = b;
            }
        }
        ColorOpKind::Grayscale => {
            for p in 0..n {
                let g = rgb_to_gray(rgb[0][p], rgb[1][p], rgb[2][p]);
                rgb[0][p] = g;
                rgb[1][p] = g;
                rgb[2][p] = g;
            }
        }
        ColorOpKind::Blur => {
            let k = gaussian_kernel(f);
            for ch in rgb.iter_mut() {
                blur_plane(ch, h, w, &k);
            }
        }
    }
}

/// Replays photometric ops in order. Images with `3·n` channels are treated
/// as `n` stacked RGB frames sharing the same ops.
pub fn apply_color_ops(image: &ImageTensor, ops: &[ColorOp]) -> Result<ImageTensor> {
    if ops.is_empty() {
        return Ok(image.clone());
    }
    let (c, h, w) = image.shape();
    if c % 3 != 0 {
        return Err(Error::Argument(format!(
            "photometric ops need RGB frames, image has {c} channels"
        )));
    }
    let mut out = Tensor3::zeros(c, h, w);
    for frame in 0..c / 3 {
        let mut rgb = [0, 1, 2].map(|k| image.channel(frame * 3 + k).to_vec());
        for op in ops {
            apply_op(&mut rgb, h, w, op);
        }
        for (k, ch) in rgb.into_iter().enumerate() {
            out.channel_mut(frame * 3 + k).copy_from_slice(&ch);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::ColorJitterParams;
    use crate::nn::uniform_tensor;
    use crate::rng::SeedTree;

    fn zero_cfg() -> AugPipelineConfig {
        AugPipelineConfig {
            train_size: 8,
            color_jitter: ColorJitterParams {
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
                hue: 0.0,
                prob: 1.0,
            },
            blur_prob: 0.0,
            grayscale_prob: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_magnitudes_are_identity() {
        let mut rng = SeedTree::new(1).rng();
        let img = uniform_tensor(3, 8, 8, 0.0, 1.0, &mut rng);
        let (out, rec) = strong_color(&img, &zero_cfg(), &mut rng).unwrap();
        assert_eq!(out, img);
        assert!(rec.color_ops.is_empty());
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let cfg = AugPipelineConfig {
            grayscale_prob: 1.0,
            ..zero_cfg()
        };
        let mut rng = SeedTree::new(2).rng();
        let img = uniform_tensor(3, 8, 8, 0.0, 1.0, &mut rng);
        let (out, _) = strong_color(&img, &cfg, &mut rng).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.get(0, y, x), out.get(1, y, x));
                assert_eq!(out.get(1, y, x), out.get(2, y, x));
            }
        }
    }

    #[test]
    fn brightness_is_scalar_multiplication() {
        let cfg = AugPipelineConfig {
            color_jitter: ColorJitterParams {
                brightness: 0.5,
                ..zero_cfg().color_jitter
            },
            ..zero_cfg()
        };
        let mut rng = SeedTree::new(3).rng();
        let img = uniform_tensor(3, 8, 8, 0.0, 1.0, &mut rng);
        let (out, rec) = strong_color(&img, &cfg, &mut rng).unwrap();
        assert_eq!(rec.color_ops.len(), 1);
        let f = rec.color_ops[0].magnitude;
        assert!((0.5..=1.5).contains(&f));
        for (o, i) in out.data().iter().zip(img.data()) {
            assert_eq!(*o, (i * f).min(1.0));
        }
    }

    #[test]
    fn hsv_round_trip() {
        let mut rng = SeedTree::new(4).rng();
        for _ in 0..200 {
            let (r, g, b) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn ops_replay_and_keep_geometry() {
        let cfg = AugPipelineConfig {
            train_size: 8,
            blur_prob: 1.0,
            grayscale_prob: 0.5,
            ..Default::default()
        };
        let mut rng = SeedTree::new(5).rng();
        let img = uniform_tensor(6, 8, 8, 0.0, 1.0, &mut rng);
        for _ in 0..10 {
            let (out, rec) = strong_color(&img, &cfg, &mut rng).unwrap();
            assert_eq!(out.shape(), img.shape());
            assert_eq!(apply_color_ops(&img, &rec.color_ops).unwrap(), out);
        }
    }

    #[test]
    fn view_count_contract() {
        let cfg = AugPipelineConfig {
            train_size: 8,
            ..Default::default()
        };
        let mut rng = SeedTree::new(6).rng();
        let img = uniform_tensor(3, 8, 8, 0.0, 1.0, &mut rng);
        assert!(sample_strong_views(&img, 0, &cfg, &mut rng).is_err());
        assert_eq!(sample_strong_views(&img, 1, &cfg, &mut rng).unwrap().len(), 1);
        let views = sample_strong_views(&img, 7, &cfg, &mut rng).unwrap();
        assert_eq!(views.len(), 7);
        // Independent draws: across a seeded batch of pairs, the two views
        // differ somewhere in the vast majority of cases.
        let mut differing = 0;
        for _ in 0..50 {
            let v = sample_strong_views(&img, 2, &cfg, &mut rng).unwrap();
            if v[0].0 != v[1].0 {
                differing += 1;
            }
        }
        assert!(differing >= 45, "only {differing}/50 pairs differed");
    }
}
