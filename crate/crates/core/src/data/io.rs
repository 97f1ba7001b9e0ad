use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use super::{DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, LabelMask};

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.display().to_string(),
        source,
    }
}

/// Loads an RGB image scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(ImageTensor::from_fn(3, h, w, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let img = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Parse(format!(
                "{}: masks must be 8-bit single channel, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    LabelMask::from_vec(img.height() as usize, img.width() as usize, img.into_raw())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_image(path: &Path, img: &ImageTensor) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", img.channels())));
    }
    let out = RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([quantize(img.get(0, y, x)), quantize(img.get(1, y, x)), quantize(img.get(2, y, x))])
    });
    out.save(path).map_err(|e| image_err(path, e))
}

pub fn save_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let out = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([mask.get(y as usize, x as usize)])
    });
    out.save(path).map_err(|e| image_err(path, e))
}

/// Writes `labeled.txt` ("image mask" per line) and `unlabeled.txt`.
pub fn write_split_files(index: &DatasetIndex, split: &Split, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut labeled = String::new();
    for &i in &split.labeled {
        let item = &index.items[i];
        let mask = item
            .mask
            .as_ref()
            .ok_or_else(|| Error::Argument(format!("labeled item {} has no mask", item.image)))?;
        labeled.push_str(&format!("{} {}\n", item.image, mask));
    }
    let unlabeled: String = split.unlabeled.iter().map(|&i| format!("{}\n", index.items[i].image)).collect();
    for (name, text) in [("labeled.txt", labeled), ("unlabeled.txt", unlabeled)] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Parses a split file into (image, optional mask) relative paths.
pub fn read_split_file(path: &Path) -> Result<Vec<(String, Option<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let mut parts = l.split_whitespace();
            let image = parts.next().expect("non-empty line").to_string();
            let mask = parts.next().map(str::to_string);
            if parts.next().is_some() {
                return Err(Error::Parse(format!("{}:{}: expected at most two paths", path.display(), n + 1)));
            }
            Ok((image, mask))
        })
        .collect()
}
