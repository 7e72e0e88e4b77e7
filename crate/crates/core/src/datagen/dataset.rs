//! Multi-patient datasets, their manifest, and labeled patch extraction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::profile::CenterProfile;
use super::slide::{generate_slide, label_at, Annotation, GeneratedSlide, SlideLayout, BENIGN_LABEL, IC_LABELS, STROMA_LABEL};
use super::DatagenError;
use crate::evaluation::{split_patients, Class, PatientSlides, SplitResult};
use crate::filtering::{filter_patches, FilterConfig, FilterReport};
use crate::model::forest::derive_seed;
use crate::model::{prepare_input, PatchSet, SlidePatches};
use crate::pipeline::extract_context_patch;
use crate::pyramid::{PyramidImage, RgbImage, DEFAULT_TILE_SIZE};
use crate::segmentation::{epithelium_mask, tissue_mask_or_empty, SegmentationConfig};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub profile: CenterProfile,
    pub patients: usize,
    /// Inclusive range of slides per patient.
    pub slides_per_patient: [usize; 2],
    pub layout: SlideLayout,
    /// Probability that a slide carries IC nests.
    pub ic_slide_fraction: f64,
    pub split_ratio: f64,
    pub tile_size: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            profile: CenterProfile::default(),
            patients: 20,
            slides_per_patient: [1, 3],
            layout: SlideLayout::default(),
            ic_slide_fraction: 0.5,
            split_ratio: 0.8,
            tile_size: DEFAULT_TILE_SIZE,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        self.profile.validate()?;
        self.layout.validate()?;
        if self.patients == 0 || self.slides_per_patient[0] == 0 || self.slides_per_patient[0] > self.slides_per_patient[1] {
            return Err(DatagenError::OutOfRange("need at least one patient and a valid slides_per_patient range".into()));
        }
        if !(0.0..=1.0).contains(&self.ic_slide_fraction) {
            return Err(DatagenError::OutOfRange("ic_slide_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub slide_id: String,
    /// Pyramid directory relative to the dataset root.
    pub path: String,
    pub seed: u64,
    /// True when the slide carries IC annotations.
    pub is_ic: bool,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub patient_id: String,
    pub slides: Vec<SlideEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub center_id: String,
    pub config: DatasetConfig,
    pub grouping: BTreeMap<String, Class>,
    pub patients: Vec<PatientEntry>,
    pub split: SplitResult,
}

pub fn default_grouping() -> BTreeMap<String, Class> {
    let mut g: BTreeMap<String, Class> = IC_LABELS.iter().map(|l| (l.to_string(), Class::Ic)).collect();
    g.insert(BENIGN_LABEL.into(), Class::Rest);
    g.insert(STROMA_LABEL.into(), Class::Rest);
    g
}

struct Planned {
    patient: usize,
    slide_id: String,
    patient_id: String,
    seed: u64,
    is_ic: bool,
}

fn plan(cfg: &DatasetConfig) -> Vec<Planned> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = &cfg.profile.center_id;
    let mut out = Vec::new();
    for p in 0..cfg.patients {
        let n = rng.random_range(cfg.slides_per_patient[0]..=cfg.slides_per_patient[1]);
        for s in 0..n {
            let index = out.len() as u64;
            out.push(Planned {
                patient: p,
                slide_id: format!("{c}-p{p:03}-s{s}"),
                patient_id: format!("{c}-p{p:03}"),
                seed: derive_seed(cfg.seed, index),
                is_ic: rng.random_bool(cfg.ic_slide_fraction),
            });
        }
    }
    out
}

/// Generates every slide and hands it to `sink` (for example to save it or to
/// extract patches right away, so pyramids need not all live in memory).
/// Slides are processed in parallel; results come back in slide order.
pub fn generate_dataset<T: Send>(
    cfg: &DatasetConfig,
    sink: impl Fn(&SlideEntry, &str, GeneratedSlide) -> Result<T, DatagenError> + Sync,
) -> Result<(DatasetManifest, Vec<T>), DatagenError> {
    cfg.validate()?;
    let planned = plan(cfg);
    let results = planned
        .par_iter()
        .map(|p| {
            let mut layout = cfg.layout.clone();
            if !p.is_ic {
                layout.ic_fraction = 0.0;
            }
            let g = generate_slide(&p.slide_id, &p.patient_id, &cfg.profile, &layout, p.seed, cfg.tile_size)?;
            // an IC slide whose nests did not fit is labeled by what was drawn
            let is_ic = g.annotations.iter().any(|a| IC_LABELS.contains(&a.label.as_str()));
            let entry = SlideEntry {
                slide_id: p.slide_id.clone(),
                path: format!("slides/{}", p.slide_id),
                seed: p.seed,
                is_ic,
                annotations: g.annotations.clone(),
            };
            let out = sink(&entry, &p.patient_id, g)?;
            Ok((entry, out))
        })
        .collect::<Result<Vec<_>, DatagenError>>()?;

    let mut patients: Vec<PatientEntry> = Vec::new();
    let mut outputs = Vec::with_capacity(results.len());
    for (p, (entry, out)) in planned.iter().zip(results) {
        if patients.len() <= p.patient {
            patients.push(PatientEntry { patient_id: p.patient_id.clone(), slides: Vec::new() });
        }
        patients[p.patient].slides.push(entry);
        outputs.push(out);
    }
    let folders: Vec<PatientSlides> = patients
        .iter()
        .map(|p| PatientSlides { patient: p.patient_id.clone(), slides: p.slides.iter().map(|s| s.slide_id.clone()).collect() })
        .collect();
    let split = split_patients(&folders, cfg.split_ratio, derive_seed(cfg.seed, u64::MAX))?;
    if split.single_patient {
        log::warn!("dataset has a single patient; every slide is in the training split");
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        center_id: cfg.profile.center_id.clone(),
        config: cfg.clone(),
        grouping: default_grouping(),
        patients,
        split,
    };
    Ok((manifest, outputs))
}

impl DatasetManifest {
    pub fn slides(&self) -> impl Iterator<Item = (&PatientEntry, &SlideEntry)> {
        self.patients.iter().flat_map(|p| p.slides.iter().map(move |s| (p, s)))
    }

    pub fn slide(&self, slide_id: &str) -> Option<(&PatientEntry, &SlideEntry)> {
        self.slides().find(|(_, s)| s.slide_id == slide_id)
    }

    pub fn is_train(&self, slide_id: &str) -> bool {
        self.split.train.iter().any(|s| s == slide_id)
    }

    /// Every raw label present must map to a class.
    pub fn check_grouping(&self) -> Result<(), DatagenError> {
        for (_, s) in self.slides() {
            for a in &s.annotations {
                if !self.grouping.contains_key(&a.label) {
                    return Err(DatagenError::UngroupedLabel(a.label.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DatagenError> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| DatagenError::Manifest(e.to_string()))?;
        std::fs::write(path, json).map_err(|source| DatagenError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, DatagenError> {
        let bytes = std::fs::read(path).map_err(|source| DatagenError::Io { path: path.to_path_buf(), source })?;
        let m: Self = serde_json::from_slice(&bytes).map_err(|e| DatagenError::Manifest(e.to_string()))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(DatagenError::Manifest(format!("unsupported manifest version {}", m.format_version)));
        }
        m.check_grouping()?;
        Ok(m)
    }

    /// Patient-disjoint train/validation split of the training slides.
    pub fn validation_split(&self, ratio: f64, seed: u64) -> Result<SplitResult, DatagenError> {
        let folders: Vec<PatientSlides> = self
            .patients
            .iter()
            .map(|p| PatientSlides {
                patient: p.patient_id.clone(),
                slides: p.slides.iter().filter(|s| self.is_train(&s.slide_id)).map(|s| s.slide_id.clone()).collect(),
            })
            .filter(|p| !p.slides.is_empty())
            .collect();
        Ok(split_patients(&folders, ratio, seed)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub segmentation: SegmentationConfig,
    pub filter: FilterConfig,
    /// Side the x5 context patches are resized to.
    pub input_side: usize,
}

/// Retained patches of one slide, resized to the model input side.
#[derive(Clone, Debug, PartialEq)]
pub struct SlidePatchData {
    pub slide_id: String,
    pub patient_id: String,
    pub is_ic: bool,
    /// Patches whose center lies in an annotation, with their grouped label.
    pub labeled: Vec<(RgbImage, bool)>,
    /// Every retained patch in grid order, labeled or not.
    pub retained: Vec<RgbImage>,
    pub report: FilterReport,
}

/// Segments and filters one slide and collects its labeled context patches.
pub fn extract_slide_patches(
    entry: &SlideEntry,
    patient_id: &str,
    pyr: &PyramidImage,
    grouping: &BTreeMap<String, Class>,
    cfg: &ExtractConfig,
) -> Result<SlidePatchData, DatagenError> {
    let tissue = tissue_mask_or_empty(pyr)?;
    let epi = epithelium_mask(pyr, &tissue, &cfg.segmentation)?;
    let outcome = filter_patches(pyr, &tissue, &epi, &cfg.filter, None)?;
    let mut labeled = Vec::new();
    let mut retained = Vec::new();
    for p in outcome.retained() {
        let ctx = prepare_input(&extract_context_patch(pyr, &p)?, cfg.input_side)?;
        let (cx, cy) = p.base_center();
        if let Some(label) = label_at(&entry.annotations, cx as f64, cy as f64) {
            let class = grouping.get(label).ok_or_else(|| DatagenError::UngroupedLabel(label.to_string()))?;
            labeled.push((ctx.clone(), class.is_ic()));
        }
        retained.push(ctx);
    }
    Ok(SlidePatchData {
        slide_id: entry.slide_id.clone(),
        patient_id: patient_id.to_string(),
        is_ic: entry.is_ic,
        labeled,
        retained,
        report: outcome.report,
    })
}

/// Loads every slide pyramid below `root` and extracts its patches.
pub fn build_patch_dataset(manifest: &DatasetManifest, root: &Path, cfg: &ExtractConfig) -> Result<PatchDataset, DatagenError> {
    manifest.check_grouping()?;
    let slides: Vec<(&PatientEntry, &SlideEntry)> = manifest.slides().collect();
    let data = slides
        .par_iter()
        .map(|(p, s)| {
            let dir: PathBuf = root.join(&s.path);
            let pyr = PyramidImage::load(&dir)?;
            extract_slide_patches(s, &p.patient_id, &pyr, &manifest.grouping, cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PatchDataset { slides: data })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatchDataset {
    pub slides: Vec<SlidePatchData>,
}

impl PatchDataset {
    pub fn labeled_count(&self) -> usize {
        self.slides.iter().map(|s| s.labeled.len()).sum()
    }

    /// Labeled patches of the selected slides, in slide order.
    pub fn patch_set(&self, keep: impl Fn(&str) -> bool) -> PatchSet {
        let mut set = PatchSet::default();
        for s in self.slides.iter().filter(|s| keep(&s.slide_id)) {
            for (img, label) in &s.labeled {
                set.push(img.clone(), *label);
            }
        }
        set
    }

    /// All retained patches per selected slide, for slide-level thresholds.
    pub fn slide_patches(&self, keep: impl Fn(&str) -> bool) -> Vec<SlidePatches> {
        self.slides
            .iter()
            .filter(|s| keep(&s.slide_id))
            .map(|s| SlidePatches { slide_id: s.slide_id.clone(), label: s.is_ic, patches: s.retained.clone() })
            .collect()
    }

    pub fn merged_report(&self) -> FilterReport {
        let mut r = FilterReport::default();
        for s in &self.slides {
            r.merge(&s.report);
        }
        r
    }
}
