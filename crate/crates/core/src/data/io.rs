//! PNG field directories: five RGB attribute rasters and a gray mask.

use std::path::Path;

use image::{ColorType, DynamicImage, GrayImage, RgbImage};

use super::{FieldStack, STACK_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// File names of the attribute rasters, in stacking order.
pub const ATTRIBUTE_FILES: [&str; 5] = ["aspect.png", "flow.png", "slope.png", "ndvi.png", "yield.png"];
pub const MASK_FILE: &str = "mask.png";

fn ingestion(file: &str, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        file: file.to_string(),
        reason: reason.into(),
    }
}

fn open(dir: &Path, file: &str) -> Result<DynamicImage> {
    let path = dir.join(file);
    if !path.is_file() {
        return Err(ingestion(file, format!("missing from {}", dir.display())));
    }
    let img = image::open(&path).map_err(|e| ingestion(file, e.to_string()))?;
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => Ok(img),
        other => Err(ingestion(file, format!("expected 8-bit channels, found {other:?}"))),
    }
}

/// Load the five attribute rasters of a field directory as a `[15, H, W]`
/// stack scaled by 1/255. The mask file is not needed.
pub fn load_attributes(dir: &Path) -> Result<Tensor<f32>> {
    let mut size: Option<(u32, u32)> = None;
    let mut bands = Vec::with_capacity(5);
    for file in ATTRIBUTE_FILES {
        let img = open(dir, file)?;
        check_size(&mut size, file, &img)?;
        bands.push(img.to_rgb8());
    }
    let (h, w) = size.map(|(h, w)| (h as usize, w as usize)).unwrap_or((0, 0));
    let n = h * w;
    let mut data = vec![0f32; STACK_CHANNELS * n];
    for (a, band) in bands.iter().enumerate() {
        for (i, px) in band.pixels().enumerate() {
            for ch in 0..3 {
                data[(3 * a + ch) * n + i] = px.0[ch] as f32 / 255.0;
            }
        }
    }
    Tensor::new(&[STACK_CHANNELS, h, w], data)
}

fn check_size(size: &mut Option<(u32, u32)>, file: &str, img: &DynamicImage) -> Result<()> {
    let dims = (img.height(), img.width());
    match *size {
        None => *size = Some(dims),
        Some(s) if s != dims => {
            return Err(ingestion(
                file,
                format!("size {}x{} differs from {}x{}", dims.0, dims.1, s.0, s.1),
            ))
        }
        _ => {}
    }
    Ok(())
}

/// Load a field directory; attributes are scaled by 1/255, the mask binarized at 128.
pub fn load_field(dir: &Path) -> Result<FieldStack> {
    let attributes = load_attributes(dir)?;
    let (h, w) = (attributes.shape()[1] as u32, attributes.shape()[2] as u32);
    let mask_img = open(dir, MASK_FILE)?;
    check_size(&mut Some((h, w)), MASK_FILE, &mask_img)?;
    let mask = mask_img.to_luma8().pixels().map(|p| u8::from(p.0[0] >= 128)).collect();
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "field".into());
    FieldStack::new(id, attributes, mask)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a field directory in the layout read by [`load_field`].
pub fn write_field(dir: &Path, stack: &FieldStack) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (stack.height(), stack.width());
    let n = h * w;
    for (a, file) in ATTRIBUTE_FILES.iter().enumerate() {
        let band = stack.attribute(a);
        let mut rgb = Vec::with_capacity(3 * n);
        for i in 0..n {
            rgb.extend((0..3).map(|ch| to_byte(band[ch * n + i])));
        }
        write_rgb_png(&dir.join(file), h, w, rgb)?;
    }
    let mask = stack.mask.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
    write_gray_png(&dir.join(MASK_FILE), h, w, mask)
}

pub fn write_gray_png(path: &Path, height: usize, width: usize, pixels: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::dim(format!("pixel buffer does not fill {height}x{width}")))?;
    img.save(path).map_err(|e| Error::Ingestion {
        file: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn write_rgb_png(path: &Path, height: usize, width: usize, pixels: Vec<u8>) -> Result<()> {
    let img = RgbImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::dim(format!("pixel buffer does not fill {height}x{width}")))?;
    img.save(path).map_err(|e| Error::Ingestion {
        file: path.display().to_string(),
        reason: e.to_string(),
    })
}
