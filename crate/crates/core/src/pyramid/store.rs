//! On-disk pyramid layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/level_<zoom>/tile_<col>_<row>.png
//! ```
//!
//! Tiles are 8-bit RGB PNGs of exactly `tile_size` pixels per side.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Level, PyramidError, PyramidImage, Zoom};
use crate::io::{read_rgb_png, write_rgb_png};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelManifest {
    pub zoom: Zoom,
    pub width: usize,
    pub height: usize,
    pub cols: usize,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidManifest {
    pub format_version: u32,
    pub base_width: usize,
    pub base_height: usize,
    pub tile_size: usize,
    pub levels: Vec<LevelManifest>,
}

fn io_err(path: &Path, source: std::io::Error) -> PyramidError {
    PyramidError::Io { path: path.to_path_buf(), source }
}

impl PyramidImage {
    pub fn save(&self, dir: &Path) -> Result<(), PyramidError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for level in &self.levels {
            let ldir = dir.join(format!("level_{}", level.zoom.label()));
            fs::create_dir_all(&ldir).map_err(|e| io_err(&ldir, e))?;
            for row in 0..level.rows {
                for col in 0..level.cols {
                    let path = ldir.join(format!("tile_{col}_{row}.png"));
                    write_rgb_png(&path, &level.tiles[row * level.cols + col])?;
                }
            }
        }
        let manifest = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        let path = dir.join("manifest.json");
        fs::write(&path, manifest).map_err(|e| io_err(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, PyramidError> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let manifest: PyramidManifest =
            serde_json::from_str(&text).map_err(|e| PyramidError::Manifest(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(PyramidError::FormatVersion(manifest.format_version));
        }
        if !manifest.tile_size.is_power_of_two() {
            return Err(PyramidError::InvalidTileSize(manifest.tile_size));
        }
        let ts = manifest.tile_size;
        let mut levels = Vec::with_capacity(manifest.levels.len());
        for lm in &manifest.levels {
            if lm.width != lm.zoom.level_len(manifest.base_width)
                || lm.height != lm.zoom.level_len(manifest.base_height)
                || lm.cols != lm.width.div_ceil(ts)
                || lm.rows != lm.height.div_ceil(ts)
            {
                return Err(PyramidError::Manifest(format!("inconsistent dimensions for level {}", lm.zoom)));
            }
            let ldir = dir.join(format!("level_{}", lm.zoom.label()));
            let mut tiles = Vec::with_capacity(lm.cols * lm.rows);
            for row in 0..lm.rows {
                for col in 0..lm.cols {
                    let tpath = ldir.join(format!("tile_{col}_{row}.png"));
                    let tile = read_rgb_png(&tpath)?;
                    if tile.width() != ts || tile.height() != ts {
                        return Err(PyramidError::Manifest(format!("tile {} has wrong size", tpath.display())));
                    }
                    tiles.push(tile);
                }
            }
            levels.push(Level { zoom: lm.zoom, width: lm.width, height: lm.height, cols: lm.cols, rows: lm.rows, tiles });
        }
        Ok(PyramidImage { base_width: manifest.base_width, base_height: manifest.base_height, tile_size: ts, levels })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build_pyramid, RgbImage};
    use super::*;

    #[test]
    fn save_load_roundtrip() {
        let mut base = RgbImage::white(300, 170);
        for y in 0..170 {
            for x in 0..300 {
                base.put(x, y, [(x * 7 % 256) as u8, (y * 3 % 256) as u8, 90]);
            }
        }
        let pyr = build_pyramid(&base, 128).unwrap();
        let dir = tempfile::tempdir().unwrap();
        pyr.save(dir.path()).unwrap();
        assert!(dir.path().join("level_2.5/tile_0_0.png").exists());
        assert!(dir.path().join("level_20/tile_2_1.png").exists());
        let back = PyramidImage::load(dir.path()).unwrap();
        assert_eq!(back, pyr);
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(json["levels"][2]["zoom"], "2.5");
        assert_eq!(json["levels"][3]["width"], 15);
    }

    #[test]
    fn rejects_future_version() {
        let pyr = build_pyramid(&RgbImage::white(16, 16), 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        pyr.save(dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&path, text).unwrap();
        assert!(matches!(PyramidImage::load(dir.path()), Err(PyramidError::FormatVersion(9))));
    }
}
