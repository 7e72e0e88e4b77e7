//! PNG encode/decode helpers.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::pyramid::{PyramidError, RgbImage};

fn io_err(path: &Path, source: std::io::Error) -> PyramidError {
    PyramidError::Io { path: path.to_path_buf(), source }
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> PyramidError {
    PyramidError::Png { path: path.to_path_buf(), message: e.to_string() }
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<(), PyramidError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    encoder.set_compression(png::Compression::Fast);
    let mut writer = encoder.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<(), PyramidError> {
    write_png(path, img.width(), img.height(), png::ColorType::Rgb, png::BitDepth::Eight, img.as_raw())
}

pub fn write_rgba_png(path: &Path, width: usize, height: usize, rgba: &[u8]) -> Result<(), PyramidError> {
    assert_eq!(rgba.len(), width * height * 4);
    write_png(path, width, height, png::ColorType::Rgba, png::BitDepth::Eight, rgba)
}

/// 1-bit grayscale PNG; `bits` holds one bool per pixel, row-major.
pub fn write_bilevel_png(path: &Path, width: usize, height: usize, bits: impl Fn(usize, usize) -> bool) -> Result<(), PyramidError> {
    let stride = width.div_ceil(8);
    let mut packed = vec![0u8; stride * height];
    for y in 0..height {
        for x in 0..width {
            if bits(x, y) {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::One, &packed)
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage, PyramidError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(info.buffer_size());
    let rgb = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(png_err(path, format!("unsupported color type {other:?}"))),
    };
    RgbImage::from_raw(w, h, rgb).ok_or_else(|| png_err(path, "decoded size mismatch"))
}
