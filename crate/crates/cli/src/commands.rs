use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use icscan::datagen::{
    build_patch_dataset, default_grouping, extract_slide_patches, generate_dataset, DatasetConfig, DatasetManifest,
};
use icscan::evaluation::{confusion_at, Class, EvalLevel, MetricsReport};
use icscan::experiment::{calibration_stage, master_stage, run_experiment, split_center, validation_seed, CenterData};
use icscan::filtering::FilterReport;
use icscan::model::{HybridModel, TrainLog};
use icscan::pipeline::{evaluate_patches, evaluate_slides, render_heatmap, score_slide, PipelineConfig, SlideResult, SlideTimings};
use icscan::pyramid::PyramidImage;
use serde::{Deserialize, Serialize};

use crate::config::{load, Layers, RunConfig};
use crate::error::CliError;
use crate::output::Outputs;

pub const MODEL_FILE: &str = "model.icsm";
pub const RUN_CONFIG_FILE: &str = "run-config.json";

#[derive(Debug, Parser)]
#[command(name = "icscan", version, about = "Invasive carcinoma detection on synthetic whole-slide images")]
pub struct Cli {
    /// JSON config file; keys not given keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Override one config value, e.g. `--set model.train.batch_size=16`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the reference and target synthetic datasets.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Only generate the center with this id.
        #[arg(long)]
        center: Option<String>,
        /// Share of slides carrying IC, for both centers.
        #[arg(long)]
        ic_fraction: Option<f64>,
    },
    /// Train the master model on a reference dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a master model on a target dataset.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one slide pyramid and render its heatmap.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Slide pyramid directory.
        #[arg(long)]
        slide: PathBuf,
        #[arg(long)]
        slide_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Patch- and slide-level metrics on a dataset's test split, or on a
    /// predictions file.
    Eval {
        #[arg(long, requires = "dataset", conflicts_with = "predictions")]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// JSON file with `level`, `threshold` and `items` of `{score, label}`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Center id written into the report.
        #[arg(long)]
        center: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the full pipeline on a few slides of a dataset.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Number of slides (defaults to `bench_slides` from the config).
        #[arg(long)]
        slides: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reference-to-target transfer experiment, fully in memory.
    Experiment {
        #[arg(long)]
        out: PathBuf,
    },
}

impl Cli {
    pub fn layers(&self, env: Vec<(String, String)>) -> Layers {
        let ic_fraction = match self.command {
            Command::Gen { ic_fraction, .. } => ic_fraction,
            _ => None,
        };
        Layers {
            file: self.config.clone(),
            env,
            sets: self.sets.clone(),
            seed: self.seed,
            workers: self.workers,
            ic_fraction,
        }
    }
}

pub fn run(cli: &Cli, env: Vec<(String, String)>) -> Result<(), CliError> {
    let cfg = load(&cli.layers(env))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Other(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Gen { out, center, .. } => cmd_gen(&cfg, out, center.as_deref()).map(drop),
        Command::Train { dataset, out } => cmd_train(&cfg, dataset, out),
        Command::Calibrate { model, dataset, out } => cmd_calibrate(&cfg, model, dataset, out),
        Command::Infer { model, slide, slide_id, out } => cmd_infer(&cfg, model, slide, slide_id.as_deref(), out).map(drop),
        Command::Eval { model, dataset, predictions, center, out } => {
            cmd_eval(&cfg, model.as_deref(), dataset.as_deref(), predictions.as_deref(), center.as_deref(), out).map(drop)
        }
        Command::Bench { model, dataset, slides, out } => cmd_bench(&cfg, model, dataset, *slides, out).map(drop),
        Command::Experiment { out } => cmd_experiment(&cfg, out),
    })
}

fn pipeline_config(cfg: &RunConfig) -> PipelineConfig {
    PipelineConfig { segmentation: cfg.extract.segmentation.clone(), filter: cfg.extract.filter.clone() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterSummary {
    pub center_id: String,
    pub slides: usize,
    pub ic_slides: usize,
    pub labeled_patches: usize,
    /// Labeled patches on the training side of the patient split.
    pub train_patches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub centers: Vec<CenterSummary>,
    /// Target over reference training patches, when both were generated.
    pub train_patch_ratio: Option<f64>,
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path, only: Option<&str>) -> Result<GenSummary, CliError> {
    let mut outputs = Outputs::create(out)?;
    let centers: Vec<DatasetConfig> = vec![cfg.reference.clone(), cfg.target_dataset()?]
        .into_iter()
        .filter(|c| only.is_none_or(|id| id == c.profile.center_id))
        .collect();
    if centers.is_empty() {
        return Err(CliError::Config(format!("no center named {:?}", only.unwrap_or_default())));
    }
    let grouping = default_grouping();
    let mut summaries = Vec::new();
    for dcfg in &centers {
        let cdir = outputs.path(&dcfg.profile.center_id);
        log::info!("generating {} into {}", dcfg.profile.center_id, cdir.display());
        let (manifest, counts) = generate_dataset(dcfg, |entry, patient, g| {
            g.pyramid.save(&cdir.join(&entry.path))?;
            let d = extract_slide_patches(entry, patient, &g.pyramid, &grouping, &cfg.extract)?;
            Ok(d.labeled.len())
        })?;
        manifest.save(&cdir.join("manifest.json"))?;
        let slides: Vec<_> = manifest.slides().map(|(_, s)| s).collect();
        summaries.push(CenterSummary {
            center_id: manifest.center_id.clone(),
            slides: slides.len(),
            ic_slides: slides.iter().filter(|s| s.is_ic).count(),
            labeled_patches: counts.iter().sum(),
            train_patches: slides.iter().zip(&counts).filter(|(s, _)| manifest.is_train(&s.slide_id)).map(|(_, c)| c).sum(),
        });
    }
    let ratio = (summaries.len() == 2)
        .then(|| summaries[1].train_patches as f64 / summaries[0].train_patches.max(1) as f64);
    let summary = GenSummary { centers: summaries, train_patch_ratio: ratio };
    outputs.write_json("gen-summary.json", &summary)?;
    outputs.write_json(RUN_CONFIG_FILE, cfg)?;
    outputs.commit();
    Ok(summary)
}

fn load_center(cfg: &RunConfig, dataset: &Path, center_index: u64) -> Result<CenterData, CliError> {
    let manifest = DatasetManifest::load(&dataset.join("manifest.json"))?;
    let patches = build_patch_dataset(&manifest, dataset, &cfg.extract)?;
    Ok(split_center(manifest, patches, cfg.validation_ratio, validation_seed(cfg.seed, center_index))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub center: String,
    pub train_patches: usize,
    pub val_patches: usize,
    pub test_patches: usize,
    pub patch_threshold: f64,
    pub slide_threshold: f64,
    pub warning: Option<String>,
    pub log: TrainLog,
}

fn finish_training(
    outputs: &mut Outputs,
    cfg: &RunConfig,
    center: &CenterData,
    model: &HybridModel,
    log: TrainLog,
    warning: Option<String>,
) -> Result<(), CliError> {
    model.save(&outputs.path(MODEL_FILE))?;
    let report = TrainReport {
        center: center.manifest.center_id.clone(),
        train_patches: center.train.len(),
        val_patches: center.val.len(),
        test_patches: center.test.len(),
        patch_threshold: model.patch_threshold,
        slide_threshold: model.slide_threshold,
        warning,
        log,
    };
    outputs.write_json("train-log.json", &report)?;
    if !center.test.is_empty() {
        let m = evaluate_patches(model, &center.test, &center.manifest.center_id)?;
        outputs.write_json("metrics.json", &m)?;
    }
    outputs.write_json(RUN_CONFIG_FILE, cfg)?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<(), CliError> {
    let center = load_center(cfg, dataset, 0)?;
    let mut outputs = Outputs::create(out)?;
    let outcome = master_stage(&center, &cfg.model, cfg.seed)?;
    finish_training(&mut outputs, cfg, &center, &outcome.model, outcome.log, None)?;
    outputs.commit();
    Ok(())
}

pub fn cmd_calibrate(cfg: &RunConfig, model: &Path, dataset: &Path, out: &Path) -> Result<(), CliError> {
    let master = HybridModel::load(model)?;
    let center = load_center(cfg, dataset, 1)?;
    let mut outputs = Outputs::create(out)?;
    let outcome = calibration_stage(&master, &center, &cfg.model, cfg.seed)?;
    let warning = outcome.warning.map(|w| {
        log::warn!("{w}");
        w.to_string()
    });
    finish_training(&mut outputs, cfg, &center, &outcome.model, outcome.log, warning)?;
    outputs.commit();
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub slide_id: String,
    pub timings: SlideTimings,
    pub filter_report: FilterReport,
}

fn slide_id_of(slide: &Path, given: Option<&str>) -> String {
    given
        .map(str::to_string)
        .or_else(|| slide.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "slide".into())
}

/// Writes `result.json` (no wall-clock fields), `timings.json`,
/// `filter-report.json` and `heatmap.png`.
pub fn cmd_infer(cfg: &RunConfig, model: &Path, slide: &Path, slide_id: Option<&str>, out: &Path) -> Result<SlideResult, CliError> {
    let model = HybridModel::load(model)?;
    let pyr = PyramidImage::load(slide)?;
    let id = slide_id_of(slide, slide_id);
    let result = score_slide(&id, &pyr, &model, &pipeline_config(cfg), None)?;
    let mut outputs = Outputs::create(out)?;
    outputs.write_json("result.json", &result.without_timings())?;
    outputs.write_json(
        "timings.json",
        &TimingReport { slide_id: id, timings: result.timings, filter_report: result.filter_report.clone() },
    )?;
    outputs.write_json("filter-report.json", &result.filter_report)?;
    render_heatmap(&result, &pyr)?.save_png(&outputs.path("heatmap.png"))?;
    outputs.write_json(RUN_CONFIG_FILE, cfg)?;
    outputs.commit();
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionItem {
    #[serde(default)]
    pub id: Option<String>,
    pub score: f64,
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionsFile {
    pub level: EvalLevel,
    pub threshold: f64,
    pub items: Vec<PredictionItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideOutcome {
    pub slide_id: String,
    pub label: Class,
    pub class: Class,
    pub s_ic: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub patch: Option<MetricsReport>,
    pub slide: Option<MetricsReport>,
    pub slides: Vec<SlideOutcome>,
}

pub fn cmd_eval(
    cfg: &RunConfig,
    model: Option<&Path>,
    dataset: Option<&Path>,
    predictions: Option<&Path>,
    center: Option<&str>,
    out: &Path,
) -> Result<EvalReport, CliError> {
    let report = match (predictions, model, dataset) {
        (Some(p), _, _) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            let preds: PredictionsFile =
                serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            let scores: Vec<f64> = preds.items.iter().map(|i| i.score).collect();
            let labels: Vec<Class> = preds.items.iter().map(|i| Class::from_positive(i.label)).collect();
            let counts = confusion_at(&scores, &labels, preds.threshold)?;
            let m = MetricsReport::new(preds.level, center.unwrap_or("unknown"), preds.threshold, counts);
            match preds.level {
                EvalLevel::Patch => EvalReport { patch: Some(m), slide: None, slides: Vec::new() },
                EvalLevel::Slide => EvalReport { patch: None, slide: Some(m), slides: Vec::new() },
            }
        }
        (None, Some(model), Some(dataset)) => evaluate_dataset(cfg, model, dataset, center)?,
        _ => return Err(CliError::Config("eval needs --predictions, or --model with --dataset".into())),
    };
    let mut outputs = Outputs::create(out)?;
    outputs.write_json("metrics.json", &report)?;
    outputs.write_json(RUN_CONFIG_FILE, cfg)?;
    outputs.commit();
    Ok(report)
}

fn evaluate_dataset(cfg: &RunConfig, model: &Path, dataset: &Path, center: Option<&str>) -> Result<EvalReport, CliError> {
    let model = HybridModel::load(model)?;
    let data = load_center(cfg, dataset, 0)?;
    let center = center.unwrap_or(&data.manifest.center_id).to_string();
    let patch = (!data.test.is_empty()).then(|| evaluate_patches(&model, &data.test, &center)).transpose()?;
    let pcfg = pipeline_config(cfg);
    let mut results = Vec::new();
    let mut labels = Vec::new();
    for (_, s) in data.manifest.slides().filter(|(_, s)| !data.manifest.is_train(&s.slide_id)) {
        let pyr = PyramidImage::load(&dataset.join(&s.path))?;
        results.push(score_slide(&s.slide_id, &pyr, &model, &pcfg, None)?);
        labels.push(s.is_ic);
    }
    let slide = (!results.is_empty()).then(|| evaluate_slides(&results, &labels, &center)).transpose()?;
    let slides = results
        .iter()
        .zip(&labels)
        .map(|(r, &l)| SlideOutcome { slide_id: r.slide_id.clone(), label: Class::from_positive(l), class: r.class, s_ic: r.s_ic, n: r.n })
        .collect();
    Ok(EvalReport { patch, slide, slides })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSlide {
    pub slide_id: String,
    pub load_ms: f64,
    pub segmentation_ms: f64,
    pub filter_ms: f64,
    pub inference_ms: f64,
    pub total_ms: f64,
    pub tissue_candidates: usize,
    pub retained: usize,
    pub inference_accesses: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub slides: Vec<BenchSlide>,
    pub mean_filter_ms: f64,
    pub mean_inference_ms: f64,
    pub mean_total_ms: f64,
    /// `filter_ms + inference_ms <= total_ms` and one read per retained patch,
    /// on every slide.
    pub invariants_hold: bool,
}

pub fn cmd_bench(cfg: &RunConfig, model: &Path, dataset: &Path, slides: Option<usize>, out: &Path) -> Result<BenchReport, CliError> {
    let model = HybridModel::load(model)?;
    let manifest = DatasetManifest::load(&dataset.join("manifest.json"))?;
    let want = slides.unwrap_or(cfg.bench_slides);
    // test slides first, then training slides
    let mut entries: Vec<_> = manifest.slides().map(|(_, s)| s).collect();
    entries.sort_by_key(|s| manifest.is_train(&s.slide_id));
    let pcfg = pipeline_config(cfg);
    let mut rows = Vec::new();
    for s in entries.into_iter().take(want) {
        let t = Instant::now();
        let pyr = PyramidImage::load(&dataset.join(&s.path))?;
        let load_ms = t.elapsed().as_secs_f64() * 1e3;
        let r = score_slide(&s.slide_id, &pyr, &model, &pcfg, None)?;
        rows.push(BenchSlide {
            slide_id: r.slide_id.clone(),
            load_ms,
            segmentation_ms: r.timings.segmentation_ms,
            filter_ms: r.timings.filter_ms,
            inference_ms: r.timings.inference_ms,
            total_ms: r.timings.total_ms,
            tissue_candidates: r.filter_report.tissue_candidates,
            retained: r.filter_report.retained,
            inference_accesses: r.inference_accesses,
        });
    }
    if rows.is_empty() {
        return Err(CliError::Data("dataset has no slides to benchmark".into()));
    }
    let mean = |f: fn(&BenchSlide) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let report = BenchReport {
        mean_filter_ms: mean(|r| r.filter_ms),
        mean_inference_ms: mean(|r| r.inference_ms),
        mean_total_ms: mean(|r| r.total_ms),
        invariants_hold: rows.iter().all(|r| r.filter_ms + r.inference_ms <= r.total_ms && r.inference_accesses == r.retained),
        slides: rows,
    };
    let mut outputs = Outputs::create(out)?;
    outputs.write_json("bench.json", &report)?;
    outputs.write_json(RUN_CONFIG_FILE, cfg)?;
    outputs.commit();
    Ok(report)
}

pub fn cmd_experiment(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (report, master, calibrated) = run_experiment(&cfg.experiment())?;
    let mut outputs = Outputs::create(out)?;
    master.save(&outputs.path("master.icsm"))?;
    calibrated.save(&outputs.path("calibrated.icsm"))?;
    outputs.write_json("experiment.json", &report)?;
    outputs.write_json(RUN_CONFIG_FILE, cfg)?;
    outputs.commit();
    Ok(())
}
