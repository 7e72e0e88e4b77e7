//! One synthetic slide: tissue outline, epithelial nests, annotations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::Polygon;
use super::profile::CenterProfile;
use super::render::{render, RegionMap, BENIGN, IC, STROMA};
use super::DatagenError;
use crate::pyramid::{build_pyramid, PyramidImage, RgbImage};

pub const IC_LABELS: [&str; 3] = ["invasive_ductal_carcinoma", "invasive_lobular_carcinoma", "mucinous_carcinoma"];
pub const BENIGN_LABEL: &str = "benign_epithelium";
pub const STROMA_LABEL: &str = "stroma";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlideLayout {
    /// Base (x20) side in pixels.
    pub side: usize,
    /// Nest area as a fraction of tissue area.
    pub epithelium_fraction: f64,
    /// IC nest area as a fraction of tissue area; at most `epithelium_fraction`.
    pub ic_fraction: f64,
    /// Tissue radius as a fraction of the side.
    pub tissue_radius: f64,
    /// Nest radius range in base pixels.
    pub nest_radius: [f64; 2],
}

impl Default for SlideLayout {
    fn default() -> Self {
        Self { side: 4096, epithelium_fraction: 0.3, ic_fraction: 0.15, tissue_radius: 0.42, nest_radius: [350.0, 650.0] }
    }
}

impl SlideLayout {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let f = |v: f64| (0.0..=1.0).contains(&v);
        if !f(self.epithelium_fraction) || !f(self.ic_fraction) || self.ic_fraction > self.epithelium_fraction {
            return Err(DatagenError::InvalidFractions {
                epithelium: self.epithelium_fraction,
                ic: self.ic_fraction,
            });
        }
        if self.side < 64 || !(0.05..=0.5).contains(&self.tissue_radius) {
            return Err(DatagenError::OutOfRange("slide side must be >= 64 and tissue_radius in [0.05, 0.5]".into()));
        }
        if !(self.nest_radius[0] > 0.0 && self.nest_radius[0] <= self.nest_radius[1]) {
            return Err(DatagenError::OutOfRange("nest_radius must be an increasing positive range".into()));
        }
        Ok(())
    }
}

/// One ground-truth region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub slide_id: String,
    pub patient_id: String,
    pub label: String,
    pub polygon: Polygon,
}

pub struct GeneratedSlide {
    pub pyramid: PyramidImage,
    /// Stroma outline first, then nests; later entries take precedence.
    pub annotations: Vec<Annotation>,
    pub regions: RegionMap,
}

const TISSUE_IRREGULARITY: f64 = 0.12;
const NEST_IRREGULARITY: f64 = 0.25;

struct Placed {
    center: [f64; 2],
    reach: f64,
}

/// Places nests until their polygon area reaches `target`, resizing the last
/// one to land on the target. Returns the polygons placed.
fn place_nests(
    target: f64,
    layout: &SlideLayout,
    tissue_center: [f64; 2],
    tissue_inner: f64,
    placed: &mut Vec<Placed>,
    rng: &mut ChaCha8Rng,
) -> Vec<Polygon> {
    let mut out = Vec::new();
    let mut area = 0.0;
    let [rmin, rmax] = layout.nest_radius;
    let min_area = std::f64::consts::PI * (0.5 * rmin).powi(2);
    while target - area >= min_area {
        let remaining = target - area;
        let mut r = rng.random_range(rmin..=rmax);
        let full = std::f64::consts::PI * r * r;
        if remaining < 1.5 * full {
            r = (remaining / std::f64::consts::PI).sqrt();
        }
        let mut done = false;
        // shrink when the slide is too crowded for this radius
        for _ in 0..4 {
            let reach = r * (1.0 + NEST_IRREGULARITY);
            let room = tissue_inner - reach;
            if room > 0.0 {
                for _ in 0..300 {
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    let d = room * rng.random::<f64>().sqrt();
                    let c = [tissue_center[0] + d * a.cos(), tissue_center[1] + d * a.sin()];
                    let free = placed.iter().all(|p| (p.center[0] - c[0]).hypot(p.center[1] - c[1]) > p.reach + reach + 16.0);
                    if free {
                        let mut poly = Polygon::star(c, r, NEST_IRREGULARITY, 40, rng);
                        if remaining < 1.5 * full {
                            // land the last nest on the target area
                            let k = (remaining / poly.area()).sqrt().min(1.0);
                            poly = poly.scaled_about(c, k);
                        }
                        area += poly.area();
                        placed.push(Placed { center: c, reach });
                        out.push(poly);
                        done = true;
                        break;
                    }
                }
            }
            if done {
                break;
            }
            r *= 0.75;
        }
        if !done {
            log::warn!("slide too crowded; placed {area:.0} of {target:.0} px of nests");
            break;
        }
    }
    out
}

/// Renders a slide. Same profile, layout and seed give a bit-identical pyramid.
pub fn generate_slide(
    slide_id: &str,
    patient_id: &str,
    profile: &CenterProfile,
    layout: &SlideLayout,
    seed: u64,
    tile_size: usize,
) -> Result<GeneratedSlide, DatagenError> {
    layout.validate()?;
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = layout.side;
    let s = side as f64;
    let center = [s / 2.0 + rng.random_range(-0.02..0.02) * s, s / 2.0 + rng.random_range(-0.02..0.02) * s];
    let r = layout.tissue_radius * s;
    let tissue = Polygon::star(center, r, TISSUE_IRREGULARITY, 64, &mut rng);
    let tissue_area = tissue.area();
    let tissue_inner = r * (1.0 - TISSUE_IRREGULARITY);

    let mut placed = Vec::new();
    let ic = place_nests(layout.ic_fraction * tissue_area, layout, center, tissue_inner, &mut placed, &mut rng);
    let ic_area: f64 = ic.iter().map(Polygon::area).sum();
    let benign_target = layout.epithelium_fraction * tissue_area - ic_area;
    let benign = place_nests(benign_target, layout, center, tissue_inner, &mut placed, &mut rng);

    let ann = |label: &str, polygon: Polygon| Annotation {
        slide_id: slide_id.to_string(),
        patient_id: patient_id.to_string(),
        label: label.to_string(),
        polygon,
    };
    let mut regions = RegionMap::new(side, side);
    let mut annotations = Vec::new();
    let paint = |poly: &Polygon, value: u8, regions: &mut RegionMap| {
        poly.scanlines(side, side, |y, a, b| regions.labels[y * side + a..y * side + b].fill(value));
    };
    paint(&tissue, STROMA, &mut regions);
    annotations.push(ann(STROMA_LABEL, tissue));
    for poly in ic {
        paint(&poly, IC, &mut regions);
        let label = IC_LABELS[rng.random_range(0..IC_LABELS.len())];
        annotations.push(ann(label, poly));
    }
    for poly in benign {
        paint(&poly, BENIGN, &mut regions);
        annotations.push(ann(BENIGN_LABEL, poly));
    }

    let base: RgbImage = render(&regions, profile, seed ^ profile.seed);
    let pyramid = build_pyramid(&base, tile_size)?;
    Ok(GeneratedSlide { pyramid, annotations, regions })
}

/// Raw label of the last annotation containing the point, if any.
pub fn label_at<'a>(annotations: &'a [Annotation], x: f64, y: f64) -> Option<&'a str> {
    annotations.iter().rev().find(|a| a.polygon.contains(x, y)).map(|a| a.label.as_str())
}
