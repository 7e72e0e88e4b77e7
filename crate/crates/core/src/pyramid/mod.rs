//! Multi-resolution slide container.
//!
//! A pyramid holds the base image at x20 plus the x5, x2.5 and x1 levels,
//! each derived from the base by exact rational box filtering. Levels are
//! stored as square tiles; border tiles are padded with white, and region
//! reads outside a level return white, matching the glass background.

mod image;
mod resample;
mod store;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use image::{luma, to_grayscale, GrayImage, RgbImage};
pub use resample::{downsample, ScaleFactor};
pub use store::{PyramidManifest, LevelManifest, FORMAT_VERSION};

pub const DEFAULT_TILE_SIZE: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum PyramidError {
    #[error("zoom x{0} is not a level of this pyramid")]
    UnknownZoom(String),
    #[error("invalid scale factor {num}/{den}: must be a positive rational >= 1")]
    InvalidFactor { num: u32, den: u32 },
    #[error("image has zero area")]
    EmptyImage,
    #[error("tile size {0} is not a power of two")]
    InvalidTileSize(usize),
    #[error("region size must be positive")]
    EmptyRegion,
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("png error on {path}: {message}")]
    Png { path: PathBuf, message: String },
    #[error("bad pyramid manifest: {0}")]
    Manifest(String),
    #[error("unsupported pyramid format version {0}")]
    FormatVersion(u32),
}

/// The four magnifications the pipeline works at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Zoom {
    #[serde(rename = "20")]
    X20,
    #[serde(rename = "5")]
    X5,
    #[serde(rename = "2.5")]
    X2_5,
    #[serde(rename = "1")]
    X1,
}

impl Zoom {
    pub const ALL: [Zoom; 4] = [Zoom::X20, Zoom::X5, Zoom::X2_5, Zoom::X1];

    pub fn magnification(self) -> f64 {
        match self {
            Zoom::X20 => 20.0,
            Zoom::X5 => 5.0,
            Zoom::X2_5 => 2.5,
            Zoom::X1 => 1.0,
        }
    }

    /// Integer downsampling factor from the x20 base.
    pub fn base_factor(self) -> u32 {
        match self {
            Zoom::X20 => 1,
            Zoom::X5 => 4,
            Zoom::X2_5 => 8,
            Zoom::X1 => 20,
        }
    }

    /// Directory label: one decimal only where the zoom is fractional.
    pub fn label(self) -> &'static str {
        match self {
            Zoom::X20 => "20",
            Zoom::X5 => "5",
            Zoom::X2_5 => "2.5",
            Zoom::X1 => "1",
        }
    }

    pub fn from_magnification(m: f64) -> Result<Self, PyramidError> {
        Zoom::ALL
            .into_iter()
            .find(|z| (z.magnification() - m).abs() < 1e-9)
            .ok_or_else(|| PyramidError::UnknownZoom(m.to_string()))
    }

    pub fn from_label(s: &str) -> Result<Self, PyramidError> {
        Zoom::ALL
            .into_iter()
            .find(|z| z.label() == s)
            .ok_or_else(|| PyramidError::UnknownZoom(s.to_string()))
    }

    /// `ceil(base_len * zoom / 20)`
    pub fn level_len(self, base_len: usize) -> usize {
        base_len.div_ceil(self.base_factor() as usize)
    }
}

impl fmt::Display for Zoom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}", self.label())
    }
}

/// Why a candidate patch was dropped by the filter cascade.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    NoNuclei,
    Blurry,
    InsufficientTissue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum PatchStatus {
    Candidate,
    Retained,
    Discarded(DiscardReason),
}

/// One square analysis unit in a level's pixel grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRef {
    pub zoom: Zoom,
    pub x: i64,
    pub y: i64,
    pub side: usize,
    pub status: PatchStatus,
}

impl PatchRef {
    pub fn new(zoom: Zoom, x: i64, y: i64, side: usize) -> Self {
        assert!(side > 0, "patch side must be positive");
        Self { zoom, x, y, side, status: PatchStatus::Candidate }
    }

    pub fn with_status(mut self, status: PatchStatus) -> Self {
        self.status = status;
        self
    }

    /// Center in the level's own pixel grid.
    pub fn center(&self) -> (i64, i64) {
        let half = (self.side / 2) as i64;
        (self.x + half, self.y + half)
    }

    /// Center in x20 base coordinates.
    pub fn base_center(&self) -> (i64, i64) {
        let f = self.zoom.base_factor() as i64;
        let (cx, cy) = self.center();
        (cx * f, cy * f)
    }
}

#[derive(Clone)]
struct Level {
    zoom: Zoom,
    width: usize,
    height: usize,
    cols: usize,
    rows: usize,
    tiles: Vec<RgbImage>,
}

impl Level {
    fn from_image(zoom: Zoom, img: &RgbImage, tile_size: usize) -> Self {
        let (width, height) = (img.width(), img.height());
        let cols = width.div_ceil(tile_size);
        let rows = height.div_ceil(tile_size);
        let mut tiles = Vec::with_capacity(cols * rows);
        for row in 0..rows {
            for col in 0..cols {
                let (x0, y0) = (col * tile_size, row * tile_size);
                let w = tile_size.min(width - x0);
                let h = tile_size.min(height - y0);
                let mut tile = RgbImage::white(tile_size, tile_size);
                let stride = tile_size * 3;
                for y in 0..h {
                    let src = &img.row(y0 + y)[x0 * 3..(x0 + w) * 3];
                    tile.as_raw_mut()[y * stride..y * stride + w * 3].copy_from_slice(src);
                }
                tiles.push(tile);
            }
        }
        Self { zoom, width, height, cols, rows, tiles }
    }
}

/// Immutable tiled multi-resolution image. Safe to share across reader threads.
#[derive(Clone)]
pub struct PyramidImage {
    base_width: usize,
    base_height: usize,
    tile_size: usize,
    levels: Vec<Level>,
}

impl fmt::Debug for PyramidImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PyramidImage")
            .field("base_width", &self.base_width)
            .field("base_height", &self.base_height)
            .field("tile_size", &self.tile_size)
            .finish()
    }
}

impl PartialEq for PyramidImage {
    fn eq(&self, other: &Self) -> bool {
        self.base_width == other.base_width
            && self.base_height == other.base_height
            && self.tile_size == other.tile_size
            && self.levels.len() == other.levels.len()
            && self
                .levels
                .iter()
                .zip(&other.levels)
                .all(|(a, b)| a.zoom == b.zoom && a.tiles == b.tiles)
    }
}

/// Materializes all four levels from an x20 base image.
pub fn build_pyramid(base: &RgbImage, tile_size: usize) -> Result<PyramidImage, PyramidError> {
    if base.width() == 0 || base.height() == 0 {
        return Err(PyramidError::EmptyImage);
    }
    if !tile_size.is_power_of_two() {
        return Err(PyramidError::InvalidTileSize(tile_size));
    }
    let mut levels = Vec::with_capacity(4);
    for zoom in Zoom::ALL {
        let level = if zoom == Zoom::X20 {
            Level::from_image(zoom, base, tile_size)
        } else {
            let img = downsample(base, ScaleFactor::integer(zoom.base_factor())?)?;
            Level::from_image(zoom, &img, tile_size)
        };
        levels.push(level);
    }
    Ok(PyramidImage { base_width: base.width(), base_height: base.height(), tile_size, levels })
}

impl PyramidImage {
    pub fn base_width(&self) -> usize {
        self.base_width
    }

    pub fn base_height(&self) -> usize {
        self.base_height
    }

    pub fn tile_size(&self) -> usize {
        self.tile_size
    }

    pub fn zooms(&self) -> impl Iterator<Item = Zoom> + '_ {
        self.levels.iter().map(|l| l.zoom)
    }

    fn level(&self, zoom: Zoom) -> Result<&Level, PyramidError> {
        self.levels
            .iter()
            .find(|l| l.zoom == zoom)
            .ok_or_else(|| PyramidError::UnknownZoom(zoom.label().to_string()))
    }

    pub fn level_dimensions(&self, zoom: Zoom) -> Result<(usize, usize), PyramidError> {
        self.level(zoom).map(|l| (l.width, l.height))
    }

    /// Tile `(col, row)` of a level, white-padded at the borders.
    pub fn tile(&self, zoom: Zoom, col: usize, row: usize) -> Result<Option<&RgbImage>, PyramidError> {
        let level = self.level(zoom)?;
        if col >= level.cols || row >= level.rows {
            return Ok(None);
        }
        Ok(Some(&level.tiles[row * level.cols + col]))
    }

    pub fn tile_grid(&self, zoom: Zoom) -> Result<(usize, usize), PyramidError> {
        self.level(zoom).map(|l| (l.cols, l.rows))
    }

    /// Reads a `w x h` region with top-left `(x, y)` in the level's grid.
    /// Anything outside the level is white.
    pub fn read_region(&self, zoom: Zoom, x: i64, y: i64, w: usize, h: usize) -> Result<RgbImage, PyramidError> {
        if w == 0 || h == 0 {
            return Err(PyramidError::EmptyRegion);
        }
        let level = self.level(zoom)?;
        let mut out = RgbImage::white(w, h);
        let ts = self.tile_size as i64;
        let x_lo = x.max(0);
        let y_lo = y.max(0);
        let x_hi = (x + w as i64).min(level.width as i64);
        let y_hi = (y + h as i64).min(level.height as i64);
        if x_lo >= x_hi || y_lo >= y_hi {
            return Ok(out);
        }
        let out_stride = w * 3;
        for row in (y_lo / ts)..=((y_hi - 1) / ts) {
            for col in (x_lo / ts)..=((x_hi - 1) / ts) {
                let tile = &level.tiles[row as usize * level.cols + col as usize];
                let tx0 = (col * ts).max(x_lo);
                let tx1 = ((col + 1) * ts).min(x_hi);
                let ty0 = (row * ts).max(y_lo);
                let ty1 = ((row + 1) * ts).min(y_hi);
                let n = (tx1 - tx0) as usize * 3;
                for gy in ty0..ty1 {
                    let src_off = (((gy - row * ts) * ts + (tx0 - col * ts)) * 3) as usize;
                    let dst_off = (gy - y) as usize * out_stride + (tx0 - x) as usize * 3;
                    out.as_raw_mut()[dst_off..dst_off + n].copy_from_slice(&tile.as_raw()[src_off..src_off + n]);
                }
            }
        }
        Ok(out)
    }

    /// Whole level as a single buffer.
    pub fn level_image(&self, zoom: Zoom) -> Result<RgbImage, PyramidError> {
        let (w, h) = self.level_dimensions(zoom)?;
        self.read_region(zoom, 0, 0, w, h)
    }

    pub fn manifest(&self) -> PyramidManifest {
        PyramidManifest {
            format_version: FORMAT_VERSION,
            base_width: self.base_width,
            base_height: self.base_height,
            tile_size: self.tile_size,
            levels: self
                .levels
                .iter()
                .map(|l| LevelManifest { zoom: l.zoom, width: l.width, height: l.height, cols: l.cols, rows: l.rows })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.put(x, y, [(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        img
    }

    #[test]
    fn level_dimensions_follow_ceil_rule() {
        let pyr = build_pyramid(&RgbImage::white(1024, 1024), 256).unwrap();
        assert_eq!(pyr.level_dimensions(Zoom::X20).unwrap(), (1024, 1024));
        assert_eq!(pyr.level_dimensions(Zoom::X5).unwrap(), (256, 256));
        assert_eq!(pyr.level_dimensions(Zoom::X2_5).unwrap(), (128, 128));
        assert_eq!(pyr.level_dimensions(Zoom::X1).unwrap(), (52, 52));
        for z in Zoom::ALL {
            assert_eq!(z.level_len(8192), (8192.0 * z.magnification() / 20.0f64).ceil() as usize);
        }
        assert_eq!(Zoom::X1.level_len(8192), 410);
    }

    #[test]
    fn out_of_bounds_is_white() {
        let pyr = build_pyramid(&gradient(100, 60), 64).unwrap();
        let px = pyr.read_region(Zoom::X20, 500, 500, 1, 1).unwrap();
        assert_eq!(px.get(0, 0), [255, 255, 255]);
        let px = pyr.read_region(Zoom::X20, -3, -3, 1, 1).unwrap();
        assert_eq!(px.get(0, 0), [255, 255, 255]);
        let straddle = pyr.read_region(Zoom::X20, -2, 0, 4, 1).unwrap();
        assert_eq!(straddle.get(0, 0), [255, 255, 255]);
        assert_eq!(straddle.get(2, 0), [0, 0, 0]);
    }

    #[test]
    fn full_read_roundtrips_base() {
        let base = gradient(300, 217);
        let pyr = build_pyramid(&base, 64).unwrap();
        assert_eq!(pyr.level_image(Zoom::X20).unwrap(), base);
        let a = pyr.read_region(Zoom::X5, 10, 7, 33, 21).unwrap();
        let b = pyr.read_region(Zoom::X5, 10, 7, 33, 21).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_base_gives_uniform_levels() {
        let pyr = build_pyramid(&RgbImage::filled(333, 250, [128, 128, 128]), 128).unwrap();
        for z in Zoom::ALL {
            assert!(pyr.level_image(z).unwrap().pixels().all(|p| p == [128, 128, 128]));
        }
    }

    #[test]
    fn region_matches_level_crop() {
        let base = gradient(700, 500);
        let pyr = build_pyramid(&base, 128).unwrap();
        let x5 = downsample(&base, ScaleFactor::integer(4).unwrap()).unwrap();
        let r = pyr.read_region(Zoom::X5, 50, 20, 80, 90).unwrap();
        assert_eq!(r, x5.crop(50, 20, 80, 90));
    }

    #[test]
    fn unknown_zoom_and_bad_args() {
        assert!(Zoom::from_magnification(10.0).is_err());
        assert_eq!(Zoom::from_magnification(2.5).unwrap(), Zoom::X2_5);
        assert!(build_pyramid(&RgbImage::white(8, 8), 100).is_err());
        let pyr = build_pyramid(&RgbImage::white(8, 8), 8).unwrap();
        assert!(matches!(pyr.read_region(Zoom::X20, 0, 0, 0, 1), Err(PyramidError::EmptyRegion)));
    }

    #[test]
    fn patch_centers() {
        let p = PatchRef::new(Zoom::X20, 4096, 4096, 256);
        assert_eq!(p.center(), (4224, 4224));
        let q = PatchRef::new(Zoom::X2_5, 10, 10, 32);
        assert_eq!(q.base_center(), (208, 208));
    }
}
