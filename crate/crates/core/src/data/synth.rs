//! Synthetic shapes: class 0 is a textured background, class `c >= 1` is a
//! circle, rectangle or triangle (cycling with `c`). Pixels belong to a shape
//! when their centre lies inside it, so the mask is exact by construction.
//!
//! Shape colours are random. Each kind carries its own fine fill texture
//! (circles solid, rectangles a 4-pixel checker, triangles 8-pixel stripes) at
//! a random contrast, so the class is visible locally but never by colour.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{save_image, save_mask, DatasetIndex, DatasetItem};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{Rng, SeedTree};
use crate::tensor::{ImageTensor, LabelMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    pub fn for_class(class: u8) -> Self {
        match (class - 1) % 3 {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Rectangle,
            _ => ShapeKind::Triangle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Circle { cy: f64, cx: f64, r: f64 },
    /// Integer corners, half-open: rows `y0..y1`, columns `x0..x1`.
    Rectangle { y0: usize, x0: usize, y1: usize, x1: usize },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    /// Whether the centre of pixel `(y, x)` lies inside.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match *self {
            Shape::Circle { cy, cx, r } => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
            Shape::Rectangle { y0, x0, y1, x1 } => (y0..y1).contains(&y) && (x0..x1).contains(&x),
            Shape::Triangle { pts } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (py - a.0) - (b.0 - a.0) * (px - a.1);
                let d = [edge(pts[0], pts[1]), edge(pts[1], pts[2]), edge(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

/// Paints shapes in order onto a background mask; later shapes occlude.
pub fn rasterize(height: usize, width: usize, shapes: &[(u8, Shape)]) -> LabelMask {
    let mut mask = LabelMask::filled(height, width, 0);
    for (class, shape) in shapes {
        for y in 0..height {
            for x in 0..width {
                if shape.contains(y, x) {
                    mask.set(y, x, *class);
                }
            }
        }
    }
    mask
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: ImageTensor,
    pub mask: LabelMask,
    /// In draw order.
    pub shapes: Vec<(u8, Shape)>,
    pub high_quality: bool,
}

fn sample_shape(kind: ShapeKind, side: usize, rng: &mut Rng) -> Shape {
    let s = side as f64;
    let size = rng.random_range(0.12..0.28) * s;
    let cy = rng.random_range(size..s - size);
    let cx = rng.random_range(size..s - size);
    match kind {
        ShapeKind::Circle => Shape::Circle { cy, cx, r: size },
        ShapeKind::Rectangle => {
            let hh = (size * rng.random_range(0.6..1.0)).round().max(2.0) as usize;
            let hw = (size * rng.random_range(0.6..1.0)).round().max(2.0) as usize;
            let (cy, cx) = (cy.round() as usize, cx.round() as usize);
            Shape::Rectangle {
                y0: cy.saturating_sub(hh),
                x0: cx.saturating_sub(hw),
                y1: (cy + hh).min(side),
                x1: (cx + hw).min(side),
            }
        }
        ShapeKind::Triangle => {
            let rot = rng.random_range(0.0..std::f64::consts::TAU);
            let r = size * 1.25;
            let pts = std::array::from_fn(|i| {
                let a = rot + i as f64 * std::f64::consts::TAU / 3.0;
                (cy + r * a.sin(), cx + r * a.cos())
            });
            Shape::Triangle { pts }
        }
    }
}

/// Per-instance fill texture parameters.
struct Fill {
    kind: ShapeKind,
    contrast: f64,
    offset: (usize, usize),
    angle: f64,
}

impl Fill {
    fn sample(kind: ShapeKind, rng: &mut Rng) -> Self {
        Fill {
            kind,
            contrast: rng.random_range(0.3..0.6),
            offset: (rng.random_range(0..8), rng.random_range(0..8)),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        }
    }

    /// Brightness factor at `(y, x)`.
    fn factor(&self, y: usize, x: usize) -> f64 {
        let t = match self.kind {
            ShapeKind::Circle => 0.0,
            ShapeKind::Rectangle => {
                let (cy, cx) = ((y + self.offset.0) / 4, (x + self.offset.1) / 4);
                if (cy + cx) % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            ShapeKind::Triangle => {
                let u = y as f64 * self.angle.sin() + x as f64 * self.angle.cos();
                (u * std::f64::consts::FRAC_PI_4).sin()
            }
        };
        1.0 + self.contrast * t
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// One image with one shape per foreground class.
///
/// Shape colours are drawn at random, independent of the class, so the class
/// has to be read from geometry. The background carries a random stripe
/// texture, an illumination ramp and pixel noise; one item in four is a clean
/// "high-quality" sample with lower noise.
pub fn synth_sample(side: usize, num_classes: usize, high_quality: bool, rng: &mut Rng) -> Result<SynthSample> {
    if num_classes < 2 || num_classes > 255 {
        return Err(Error::Argument(format!("k must lie in 2..=255, got {num_classes}")));
    }
    if side < 16 {
        return Err(Error::Argument(format!("side must be >= 16, got {side}")));
    }
    let mut classes: Vec<u8> = (1..num_classes as u8).collect();
    // random draw order decides occlusion
    for i in (1..classes.len()).rev() {
        classes.swap(i, rng.random_range(0..=i));
    }
    let shapes: Vec<(u8, Shape)> = classes
        .iter()
        .map(|&c| (c, sample_shape(ShapeKind::for_class(c), side, rng)))
        .collect();
    let mask = rasterize(side, side, &shapes);

    let bg_a = hsv_to_rgb(rng.random(), rng.random_range(0.1..0.5), rng.random_range(0.3..0.7));
    let bg_b = hsv_to_rgb(rng.random(), rng.random_range(0.1..0.5), rng.random_range(0.3..0.7));
    let freq = rng.random_range(0.15..0.6);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let (fy, fx) = (freq * angle.sin(), freq * angle.cos());
    let colors: Vec<[f64; 3]> = shapes
        .iter()
        .map(|_| hsv_to_rgb(rng.random(), rng.random_range(0.3..0.9), rng.random_range(0.4..1.0)))
        .collect();
    let fills: Vec<Fill> = shapes.iter().map(|(c, _)| Fill::sample(ShapeKind::for_class(*c), rng)).collect();
    let ramp = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let gain = rng.random_range(0.8..1.2);
    let sigma = if high_quality { 0.02 } else { rng.random_range(0.04..0.1) };
    let noise = Normal::new(0.0, sigma).expect("positive sigma");

    let s = side as f64;
    let mut image = ImageTensor::zeros(3, side, side);
    for y in 0..side {
        for x in 0..side {
            let class = mask.get(y, x);
            let base: [f64; 3] = if class == 0 {
                let t = 0.5 + 0.5 * (fy * y as f64 + fx * x as f64).sin();
                std::array::from_fn(|c| bg_a[c] * t + bg_b[c] * (1.0 - t))
            } else {
                let k = shapes.iter().position(|(c, _)| *c == class).expect("painted class");
                let f = fills[k].factor(y, x);
                colors[k].map(|v| v * f)
            };
            let light = gain * (1.0 + ramp.0 * (y as f64 / s - 0.5) + ramp.1 * (x as f64 / s - 0.5));
            for (c, b) in base.iter().enumerate() {
                let v: f64 = b * light + noise.sample(rng);
                // stored images are 8-bit; keep the in-memory copy identical
                image.set(c, y, x, (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
            }
        }
    }
    Ok(SynthSample {
        image,
        mask,
        shapes,
        high_quality,
    })
}

/// In-memory dataset; item `i` depends only on `seed` and `i`.
pub fn synth_items(n_items: usize, side: usize, num_classes: usize, seed: u64) -> Result<Vec<SynthSample>> {
    let seeds = SeedTree::new(seed).stream("synth");
    par::map_range(n_items, |i| synth_sample(side, num_classes, i % 4 == 0, &mut seeds.child(i as u64).rng()))
        .into_iter()
        .collect()
}

/// Writes `images/`, `masks/` and `index.json` under `root`.
pub fn synth_dataset(root: &Path, n_items: usize, side: usize, num_classes: usize, seed: u64) -> Result<DatasetIndex> {
    let samples = synth_items(n_items, side, num_classes, seed)?;
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut items = Vec::with_capacity(n_items);
    for (i, s) in samples.iter().enumerate() {
        let image = format!("images/{i:05}.png");
        let mask = format!("masks/{i:05}.png");
        save_image(&root.join(&image), &s.image)?;
        save_mask(&root.join(&mask), &s.mask)?;
        items.push(DatasetItem {
            image,
            mask: Some(mask),
            high_quality: s.high_quality,
        });
    }
    let index = DatasetIndex::new(root, items, num_classes)?;
    index.save()?;
    Ok(index)
}
