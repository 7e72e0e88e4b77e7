//! Per-center stain appearance.

use serde::{Deserialize, Serialize};

use super::DatagenError;
use crate::model::augment::{hsv_to_rgb, rgb_to_hsv};

/// Appearance of one center's slides. Applied to tissue pixels only; the
/// glass background stays white.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CenterProfile {
    pub center_id: String,
    /// Hue rotation in turns, within `[-0.5, 0.5]`.
    pub hue_offset: f64,
    /// Saturation multiplier, within `[0.2, 3]`.
    pub saturation_scale: f64,
    /// Additive gray-level offset, within `[-80, 80]`.
    pub brightness_offset: f64,
    /// Multiplier of the stain-density noise, within `[0, 4]`.
    pub grain_scale: f64,
    pub seed: u64,
}

impl Default for CenterProfile {
    fn default() -> Self {
        Self {
            center_id: "reference".into(),
            hue_offset: 0.0,
            saturation_scale: 1.0,
            brightness_offset: 0.0,
            grain_scale: 1.0,
            seed: 0,
        }
    }
}

/// Offsets between two centers' profiles.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileDelta {
    pub hue: f64,
    /// Multiplies the saturation scale; 0 is read as 1.
    pub saturation: f64,
    pub brightness: f64,
    /// Multiplies the grain scale; 0 is read as 1.
    pub grain: f64,
}

impl CenterProfile {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let checks = [
            ("hue_offset", self.hue_offset, -0.5, 0.5),
            ("saturation_scale", self.saturation_scale, 0.2, 3.0),
            ("brightness_offset", self.brightness_offset, -80.0, 80.0),
            ("grain_scale", self.grain_scale, 0.0, 4.0),
        ];
        for (name, v, lo, hi) in checks {
            if !(lo..=hi).contains(&v) {
                return Err(DatagenError::OutOfRange(format!("{name} = {v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.hue_offset == 0.0 && self.saturation_scale == 1.0 && self.brightness_offset == 0.0
    }

    /// Applies hue, saturation and brightness to a linear RGB triple in 0-255.
    pub fn apply(&self, rgb: [f64; 3]) -> [f64; 3] {
        let [mut r, mut g, mut b] = rgb;
        if self.hue_offset != 0.0 || self.saturation_scale != 1.0 {
            let (h, s, v) = rgb_to_hsv(r / 255.0, g / 255.0, b / 255.0);
            let (r2, g2, b2) = hsv_to_rgb(h + self.hue_offset, (s * self.saturation_scale).clamp(0.0, 1.0), v);
            (r, g, b) = (r2 * 255.0, g2 * 255.0, b2 * 255.0);
        }
        [r + self.brightness_offset, g + self.brightness_offset, b + self.brightness_offset]
    }
}

/// New profile shifted by `delta`, for another center.
pub fn apply_center_shift(profile: &CenterProfile, delta: &ProfileDelta, center_id: &str) -> Result<CenterProfile, DatagenError> {
    let mul = |k: f64| if k == 0.0 { 1.0 } else { k };
    let out = CenterProfile {
        center_id: center_id.to_string(),
        hue_offset: profile.hue_offset + delta.hue,
        saturation_scale: profile.saturation_scale * mul(delta.saturation),
        brightness_offset: profile.brightness_offset + delta.brightness,
        grain_scale: profile.grain_scale * mul(delta.grain),
        seed: profile.seed,
    };
    out.validate()?;
    Ok(out)
}

/// Saturation-weighted circular mean hue of the pixels, in turns.
pub fn mean_hue(pixels: impl Iterator<Item = [u8; 3]>) -> f64 {
    let (mut sx, mut sy) = (0.0, 0.0);
    for p in pixels {
        let (h, s, _) = rgb_to_hsv(p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0);
        let a = std::f64::consts::TAU * h;
        sx += s * a.cos();
        sy += s * a.sin();
    }
    (sy.atan2(sx) / std::f64::consts::TAU).rem_euclid(1.0)
}

/// Signed difference `a - b` of two hues, wrapped into `[-0.5, 0.5)`.
pub fn hue_difference(a: f64, b: f64) -> f64 {
    (a - b + 0.5).rem_euclid(1.0) - 0.5
}
