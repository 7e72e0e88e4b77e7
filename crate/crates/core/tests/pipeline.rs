use icscan::datagen::{generate_slide, CenterProfile, SlideLayout};
use icscan::evaluation::Class;
use icscan::model::ModelError;
use icscan::pipeline::{
    evaluate_slides, extract_context_patch, render_heatmap, score_color, score_slide, PatchScorer, PipelineConfig,
    PipelineError, HEATMAP_ALPHA,
};
use icscan::pyramid::{build_pyramid, PatchRef, PyramidImage, RgbImage, Zoom};

struct Fixed {
    score: f64,
    p0: f64,
    slide: f64,
}

impl PatchScorer for Fixed {
    fn score(&self, _: &RgbImage) -> Result<f64, ModelError> {
        Ok(self.score)
    }
    fn patch_threshold(&self) -> f64 {
        self.p0
    }
    fn slide_threshold(&self) -> f64 {
        self.slide
    }
}

/// Scores by the mean darkness of the context patch.
struct Darkness;

impl PatchScorer for Darkness {
    fn score(&self, ctx: &RgbImage) -> Result<f64, ModelError> {
        let sum: f64 = ctx.pixels().map(|p| 255.0 - (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0).sum();
        Ok(sum / (255.0 * (ctx.width() * ctx.height()) as f64))
    }
    fn patch_threshold(&self) -> f64 {
        0.2
    }
    fn slide_threshold(&self) -> f64 {
        0.1
    }
}

fn tissue_slide(seed: u64) -> PyramidImage {
    let layout = SlideLayout { side: 2048, nest_radius: [200.0, 350.0], ..Default::default() };
    generate_slide("s", "p", &CenterProfile::default(), &layout, seed, 256).unwrap().pyramid
}

fn blank_slide() -> PyramidImage {
    build_pyramid(&RgbImage::white(1024, 1024), 256).unwrap()
}

#[test]
fn constant_scorers_give_extreme_slide_scores() {
    let pyr = tissue_slide(3);
    let cfg = PipelineConfig::default();
    let ones = score_slide("s", &pyr, &Fixed { score: 1.0, p0: 0.5, slide: 0.5 }, &cfg, None).unwrap();
    assert!(ones.n > 0);
    assert_eq!(ones.s_ic, 1.0);
    assert_eq!(ones.class, Class::Ic);

    let zeros = score_slide("s", &pyr, &Fixed { score: 0.0, p0: 0.5, slide: 0.5 }, &cfg, None).unwrap();
    assert_eq!(zeros.n, ones.n);
    assert_eq!(zeros.s_ic, 0.0);
    assert_eq!(zeros.class, Class::Rest);

    // scores equal to P0 do not count
    let tie = score_slide("s", &pyr, &Fixed { score: 0.7, p0: 0.7, slide: 0.0 }, &cfg, None).unwrap();
    assert_eq!(tie.s_ic, 0.0);
    assert_eq!(tie.class, Class::Rest);
}

#[test]
fn slide_score_matches_independent_sum() {
    let pyr = tissue_slide(5);
    let r = score_slide("s", &pyr, &Darkness, &PipelineConfig::default(), None).unwrap();
    assert!(r.n > 0);
    // recompute each score from the pyramid directly
    let mut sum = 0.0;
    for p in &r.patches {
        let ctx = extract_context_patch(&pyr, &PatchRef::new(Zoom::X20, p.x, p.y, r.patch_side)).unwrap();
        let s = Darkness.score(&ctx).unwrap();
        assert_eq!(s, p.score);
        if s > 0.2 {
            sum += s;
        }
    }
    assert!((r.s_ic - sum / r.n as f64).abs() < 1e-12);
    assert_eq!(r.class, Class::from_positive(r.s_ic > 0.1));
}

#[test]
fn every_retained_patch_is_read_once() {
    let pyr = tissue_slide(7);
    let r = score_slide("s", &pyr, &Darkness, &PipelineConfig::default(), None).unwrap();
    assert_eq!(r.inference_accesses, r.n);
    assert_eq!(r.n, r.filter_report.retained);
    assert_eq!(r.patches.len(), r.n);
    assert!(r.filter_report.reconciles());
}

#[test]
fn timings_are_nested() {
    let pyr = tissue_slide(9);
    let r = score_slide("s", &pyr, &Darkness, &PipelineConfig::default(), None).unwrap();
    let t = r.timings;
    assert!(t.filter_ms + t.inference_ms <= t.total_ms);
    assert!(t.segmentation_ms + t.filter_ms + t.inference_ms <= t.total_ms);
}

#[test]
fn blank_slide_is_rest_with_no_patches() {
    let r = score_slide("blank", &blank_slide(), &Fixed { score: 1.0, p0: 0.5, slide: 0.0 }, &PipelineConfig::default(), None)
        .unwrap();
    assert_eq!(r.n, 0);
    assert_eq!(r.s_ic, 0.0);
    assert_eq!(r.class, Class::Rest);
    assert!(r.no_epithelium);
    assert_eq!(r.inference_accesses, 0);
}

#[test]
fn scoring_is_repeatable() {
    let pyr = tissue_slide(11);
    let a = score_slide("s", &pyr, &Darkness, &PipelineConfig::default(), None).unwrap();
    let b = score_slide("s", &pyr, &Darkness, &PipelineConfig::default(), None).unwrap();
    assert_eq!(a.without_timings(), b.without_timings());
}

fn gradient_pyramid() -> PyramidImage {
    let mut base = RgbImage::white(1024, 1024);
    for y in 0..1024 {
        for x in 0..1024 {
            base.put(x, y, [(x % 251) as u8, (y % 241) as u8, ((x + y) % 239) as u8]);
        }
    }
    build_pyramid(&base, 256).unwrap()
}

fn oracle_context(pyr: &PyramidImage, x0: i64, y0: i64, side: usize) -> RgbImage {
    let level = pyr.level_image(Zoom::X5).unwrap();
    let mut out = RgbImage::white(side, side);
    for dy in 0..side as i64 {
        for dx in 0..side as i64 {
            let (x, y) = (x0 + dx, y0 + dy);
            if x >= 0 && y >= 0 && (x as usize) < level.width() && (y as usize) < level.height() {
                out.put(dx as usize, dy as usize, level.get(x as usize, y as usize));
            }
        }
    }
    out
}

#[test]
fn context_patch_is_centered_at_x5() {
    let pyr = gradient_pyramid();
    // center (640, 384) maps to (160, 96) at x5
    let ctx = extract_context_patch(&pyr, &PatchRef::new(Zoom::X20, 512, 256, 256)).unwrap();
    assert_eq!(ctx, oracle_context(&pyr, 32, -32, 256));
    // a corner patch reads past the top-left edge; those pixels are white
    let corner = extract_context_patch(&pyr, &PatchRef::new(Zoom::X20, 0, 0, 256)).unwrap();
    assert_eq!(corner, oracle_context(&pyr, -96, -96, 256));
    assert_eq!(corner.get(0, 0), [255, 255, 255]);
    assert_eq!(corner.get(95, 95), [255, 255, 255]);
    assert_ne!(corner.get(96, 96), [255, 255, 255]);
}

#[test]
fn context_patch_rejects_other_zooms() {
    let pyr = gradient_pyramid();
    let err = extract_context_patch(&pyr, &PatchRef::new(Zoom::X5, 0, 0, 256)).unwrap_err();
    assert!(matches!(err, PipelineError::NotAnX20Patch { .. }));
}

#[test]
fn score_colors() {
    assert_eq!(score_color(0.0), [0, 0, 255]);
    assert_eq!(score_color(1.0), [255, 0, 0]);
    assert_eq!(score_color(0.5), [128, 0, 127]);
    assert_eq!(score_color(-1.0), [0, 0, 255]);
}

#[test]
fn heatmap_paints_x2_5_footprints() {
    let pyr = tissue_slide(13);
    let r = score_slide("s", &pyr, &Darkness, &PipelineConfig::default(), None).unwrap();
    let hm = render_heatmap(&r, &pyr).unwrap();
    assert_eq!((hm.width, hm.height), pyr.level_dimensions(Zoom::X2_5).unwrap());
    let fp = r.patch_side / 8;
    let mut painted = 0;
    for y in 0..hm.height {
        for x in 0..hm.width {
            if hm.pixel(x, y)[3] != 0 {
                painted += 1;
            }
        }
    }
    // grid patches do not overlap, so each paints exactly its footprint
    assert_eq!(painted, r.n * fp * fp);
    for p in &r.patches {
        let [cr, cg, cb] = score_color(p.score);
        let (x, y) = ((p.x / 8) as usize, (p.y / 8) as usize);
        assert_eq!(hm.pixel(x, y), [cr, cg, cb, HEATMAP_ALPHA]);
        assert_eq!(hm.pixel(x + fp - 1, y + fp - 1), [cr, cg, cb, HEATMAP_ALPHA]);
    }
}

#[test]
fn slide_evaluation_counts() {
    let pyr = tissue_slide(15);
    let cfg = PipelineConfig::default();
    let pos = score_slide("a", &pyr, &Fixed { score: 1.0, p0: 0.5, slide: 0.5 }, &cfg, None).unwrap();
    let neg = score_slide("b", &blank_slide(), &Fixed { score: 1.0, p0: 0.5, slide: 0.5 }, &cfg, None).unwrap();
    let report = evaluate_slides(&[pos.clone(), neg.clone(), pos], &[true, false, false], "c").unwrap();
    assert_eq!((report.counts.tp, report.counts.tn, report.counts.fp, report.counts.fn_), (1, 1, 1, 0));
    assert!((report.metrics.accuracy.unwrap() - 2.0 / 3.0).abs() < 1e-12);
}
