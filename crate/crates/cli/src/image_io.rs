//! PNG in and out. Channel values are scaled to `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use zoomwarp::{GridDims, Image, ScalarField};

use crate::error::{CliError, Result};

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| CliError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let dims = GridDims::new(h as usize, w as usize)?;
    let channel = |c: usize| {
        ScalarField::from_fn(dims, |i, j| rgb.get_pixel(j as u32, i as u32)[c] as f64 / 255.0)
    };
    Ok(Image::new(vec![channel(0), channel(1), channel(2)])?)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_dynamic(image: &Image) -> DynamicImage {
    let dims = image.dims();
    let (w, h) = (dims.width() as u32, dims.height() as u32);
    let ch = image.channels();
    if ch.len() >= 3 {
        DynamicImage::ImageRgb8(RgbImage::from_fn(w, h, |x, y| {
            let (i, j) = (y as usize, x as usize);
            image::Rgb([quantize(ch[0].get(i, j)), quantize(ch[1].get(i, j)), quantize(ch[2].get(i, j))])
        }))
    } else {
        DynamicImage::ImageLuma8(GrayImage::from_fn(w, h, |x, y| {
            image::Luma([quantize(ch[0].get(y as usize, x as usize))])
        }))
    }
}

pub fn save_png(path: &Path, image: &Image) -> Result<()> {
    to_dynamic(image)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| CliError::Image {
            path: path.to_path_buf(),
            source,
        })
}
