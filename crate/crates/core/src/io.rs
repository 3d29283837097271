//! PNG codecs for images, binary masks and three-label masks.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::types::{BinaryMask, ImageTensor, LabelMap};

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn png_bytes(img: DynamicImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("png encoding into memory cannot fail");
    out.into_inner()
}

/// Any 8- or 16-bit PNG, converted to RGB in `[0,1]`.
pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|v| *v as f64 / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, 3, data)
}

pub fn encode_image(image: &ImageTensor) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::Invalid(format!(
            "only RGB images can be written, got {} channels",
            image.channels()
        )));
    }
    let raw = image.data().iter().map(|v| quantize(*v)).collect();
    let (h, w) = image.dims();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dims");
    Ok(png_bytes(DynamicImage::ImageRgb8(img)))
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn decode_gray(bytes: &[u8]) -> Result<GrayImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    match img {
        DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(Error::Invalid(format!(
            "mask must be an 8-bit single-channel PNG, got {:?}",
            other.color()
        ))),
    }
}

/// Three-label mask: every pixel must be exactly 0, 1 or 2.
pub fn decode_label_mask(bytes: &[u8]) -> Result<LabelMap> {
    let g = decode_gray(bytes)?;
    let (w, h) = g.dimensions();
    LabelMap::from_raw(h as usize, w as usize, g.as_raw())
}

pub fn encode_label_mask(map: &LabelMap) -> Vec<u8> {
    let (h, w) = map.dims();
    let img = GrayImage::from_raw(w as u32, h as u32, map.to_raw()).expect("buffer matches dims");
    png_bytes(DynamicImage::ImageLuma8(img))
}

/// Binary mask: zero is off, anything else is on. Colour PNGs are accepted
/// and thresholded on luma so hand-drawn masks load.
pub fn decode_binary_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let g = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
    let (w, h) = g.dimensions();
    let bits = g.as_raw().iter().map(|v| u8::from(*v > 127)).collect();
    BinaryMask::new(h as usize, w as usize, bits)
}

/// Writes 0/255 so the mask is visible in an image viewer.
pub fn encode_binary_mask(mask: &BinaryMask) -> Vec<u8> {
    let (h, w) = mask.dims();
    let raw = mask.bits().iter().map(|b| b * 255).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dims");
    png_bytes(DynamicImage::ImageLuma8(img))
}

/// Soft mask in `[0,1]` from an 8-bit grey PNG (`v / 255`).
pub fn decode_soft_mask(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let g = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
    let (w, h) = g.dimensions();
    Ok((
        h as usize,
        w as usize,
        g.as_raw().iter().map(|v| *v as f64 / 255.0).collect(),
    ))
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    decode_image(&read_bytes(path)?).map_err(|e| annotate(path, e))
}

pub fn write_image(path: &Path, image: &ImageTensor) -> Result<()> {
    write_bytes(path, &encode_image(image)?)
}

pub fn read_label_mask(path: &Path) -> Result<LabelMap> {
    decode_label_mask(&read_bytes(path)?).map_err(|e| annotate(path, e))
}

pub fn write_label_mask(path: &Path, map: &LabelMap) -> Result<()> {
    write_bytes(path, &encode_label_mask(map))
}

pub fn read_binary_mask(path: &Path) -> Result<BinaryMask> {
    decode_binary_mask(&read_bytes(path)?).map_err(|e| annotate(path, e))
}

pub fn write_binary_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_bytes(path, &encode_binary_mask(mask))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn annotate(path: &Path, e: Error) -> Error {
    match e {
        Error::Invalid(m) => Error::Invalid(format!("{}: {m}", path.display())),
        Error::Image(m) => Error::Image(format!("{}: {m}", path.display())),
        other => other,
    }
}
