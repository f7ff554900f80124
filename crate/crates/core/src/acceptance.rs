//! The acceptance criteria as runnable checks, one verdict per criterion.

use std::fmt;
use std::path::Path;

use image::Rgb;
use ndarray::{Array2, Array3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sortseg_nn::ops::Warp;
use sortseg_nn::{ResidualSpec, TinyResidual};

use crate::bgremoval::{background_only, fit_background, foreground_mask, masked_foreground, BgParams, NEUTRAL_GRAY};
use crate::classifier::{
    class_order, merge_tiles, residual_spec, sample_loss, split_tiles, temporal_consistency_loss, Backbone, Classifier,
    ClassifierCheckpoint, ClassifierConfig, LossKind, LossWeights,
};
use crate::dataio::{AugmentSpec, BatchIterator, ClassLabel, Partition};
use crate::error::Result;
use crate::evalreport::{pixel_counts, run_protocol, EvalOptions, EvalReport, IouAccumulator, IouMode, PixelCounter, Split, Stage, StageTrees};
use crate::formats::{read_labels, read_rgb};
use crate::pipeline::{load_split, run_pipeline, CoarseSource, PipelineConfig, PipelineOutcome, RunOptions, StageName};
use crate::raster::Mask;
use crate::refine::{refine_mask, RefineParams};
use crate::saliency::{normalize, threshold_values, Threshold};
use crate::scenegen::{render_sequence, SceneConfig};
use crate::segtrain::{decide, train_segmenter_on, SegConfig, SegSample, Segmenter};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Invariants and gradient checks only.
    Fast,
    FullSynthetic,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Profile::Fast),
            "full" | "full_synthetic" | "full-synthetic" => Ok(Profile::FullSynthetic),
            other => Err(crate::Error::Config(format!("unknown acceptance profile `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Skipped,
}

#[derive(Clone, Debug)]
pub struct CriterionOutcome {
    pub id: u8,
    pub title: &'static str,
    pub verdict: Verdict,
    pub detail: String,
}

impl CriterionOutcome {
    fn judged(id: u8, title: &'static str, ok: bool, detail: String) -> Self {
        Self { id, title, verdict: if ok { Verdict::Pass } else { Verdict::Fail }, detail }
    }

    fn skipped(id: u8, title: &'static str, detail: impl Into<String>) -> Self {
        Self { id, title, verdict: Verdict::Skipped, detail: detail.into() }
    }

    fn errored(id: u8, title: &'static str, e: &crate::Error) -> Self {
        Self { id, title, verdict: Verdict::Fail, detail: format!("error: {e}") }
    }
}

impl fmt::Display for CriterionOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = match self.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Skipped => "SKIP",
        };
        write!(f, "criterion {} {v}: {} | {}", self.id, self.title, self.detail)
    }
}

type Check = std::result::Result<(), String>;

fn ensure(ok: bool, what: &str) -> Check {
    if ok {
        Ok(())
    } else {
        Err(what.to_string())
    }
}

/// Identity 1.0, disjoint 0.0 and half-overlap 0.5, scored with `counter`.
pub fn analytic_iou_check(counter: PixelCounter) -> Check {
    let a: Mask = Array2::from_shape_vec((1, 4), vec![true, true, false, false]).expect("shape");
    let b: Mask = Array2::from_shape_vec((1, 4), vec![true, false, false, false]).expect("shape");
    let c: Mask = Array2::from_shape_vec((1, 4), vec![false, false, true, false]).expect("shape");
    let score = |p: &Mask, g: &Mask| {
        let mut acc = IouAccumulator::default();
        acc.add_with(p, g, counter).map_err(|e| e.to_string())?;
        Ok::<f64, String>(acc.miou(IouMode::DatasetLevel))
    };
    ensure(score(&a, &a)? == 100.0, "identical masks must score 100")?;
    ensure(score(&a, &c)? == 0.0, "disjoint masks must score 0")?;
    ensure(score(&a, &b)? == 50.0 && score(&b, &a)? == 50.0, "half overlap must score 50 both ways")
}

/// Intersection off by one; the analytic check must reject it.
pub fn tampered_counts(pred: &Mask, gt: &Mask) -> (u64, u64) {
    let (i, u) = pixel_counts(pred, gt);
    (i + 1, u)
}

fn patterned(w: u32, h: u32, phase: u32) -> image::RgbImage {
    image::RgbImage::from_fn(w, h, |x, y| {
        let g = 100 + ((x * 7 + y * 3 + phase) % 40) as u8;
        Rgb([g, g, g.saturating_add(2)])
    })
}

fn check_background_identities() -> Check {
    let img = patterned(12, 10, 0);
    let model = fit_background(ClassLabel::Before, &vec![img.clone(); 3]).map_err(|e| e.to_string())?;
    let same = img.pixels().enumerate().all(|(i, p)| {
        let (y, x) = (i / 12, i % 12);
        (0..3).all(|c| model.median[[y, x, c]] == p[c] as f32 && model.scale[[y, x, c]] == 0.0)
    });
    ensure(same, "median of identical frames must equal the frame with zero deviation")?;
    let fg = foreground_mask(&img, &model, &BgParams::default()).map_err(|e| e.to_string())?;
    ensure(fg.iter().all(|&v| !v), "a frame equal to the median has no foreground")?;
    ensure(masked_foreground(&img, &fg).pixels().all(|p| *p == Rgb([NEUTRAL_GRAY; 3])), "empty foreground gives all neutral fill")?;
    ensure(background_only(&img, &fg, &model) == img, "empty foreground leaves the background-only variant unchanged")?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let other = patterned(12, 10, 11);
    let m: Mask = Array2::from_shape_fn((10, 12), |_| rng.random::<bool>());
    let (a, b) = (masked_foreground(&other, &m), background_only(&other, &m, &model));
    let split = other.enumerate_pixels().all(|(x, y, p)| {
        let keep_a = a.get_pixel(x, y) == p;
        let keep_b = b.get_pixel(x, y) == p;
        if m[[y as usize, x as usize]] { keep_a } else { keep_b }
    });
    ensure(split, "masked and background-only variants must partition the pixels")
}

fn check_thresholds() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let map = normalize(&Array2::from_shape_fn((16, 16), |_| rng.random::<f32>()));
    let masks: Vec<Mask> = [0.1, 0.3, 0.5, 0.7, 0.9].iter().map(|&t| threshold_values(&map, Threshold::Fixed(t)).mask).collect();
    let nested = masks.windows(2).all(|w| w[1].iter().zip(&w[0]).all(|(&hi, &lo)| !hi || lo));
    ensure(nested, "a higher threshold must give a subset mask")?;
    ensure(normalize(&Array2::zeros((4, 4))).iter().all(|&v| v == 0.0), "an all-zero map stays all-zero")?;
    let mut peak = Array2::from_elem((5, 5), 0.2f32);
    peak[[2, 3]] = 0.9;
    let top = threshold_values(&normalize(&peak), Threshold::Fixed(0.999)).mask;
    ensure(top.iter().filter(|&&v| v).count() == 1 && top[[2, 3]], "threshold 0.999 keeps only the unique maximum")
}

fn narrow_inputs(phase: f64) -> Array3<f64> {
    Array3::from_shape_fn((3, 32, 32), |(c, y, x)| 0.5 + 0.4 * ((c + 1) as f64 * 0.29 * y as f64 - 0.23 * x as f64 + phase).sin())
}

fn check_losses() -> Check {
    let x = narrow_inputs(0.3);
    ensure(merge_tiles(&split_tiles(x.view(), 2).map_err(|e| e.to_string())?, 2) == x, "tiles must merge back to the image")?;
    let net = TinyResidual::new(ResidualSpec::narrow(2));
    let p: Vec<f64> = net.init_params(5);
    let l = temporal_consistency_loss(&net, &p, x.view(), x.view(), Array3::zeros((4, 4, 2)).view(), 1).map_err(|e| e.to_string())?;
    ensure(l == 0.0, "zero flow between identical frames has zero consistency loss")
}

fn check_refinement() -> Check {
    let l = Array2::from_shape_fn((6, 10), |(y, x)| match (y, x) {
        (1..=4, 1..=3) => 1u16,
        (1..=4, 6..=8) => 2,
        _ => 0,
    });
    let exact = l.mapv(|v| v == 1);
    let r = refine_mask(&exact, &l, &RefineParams::default()).map_err(|e| e.to_string())?;
    ensure(r.mask == exact, "an exact instance mask is a fixed point")?;
    let partial = Array2::from_shape_fn((6, 10), |(y, x)| l[[y, x]] == 2 && y <= 3 && x <= 7);
    let r = refine_mask(&partial, &l, &RefineParams::default()).map_err(|e| e.to_string())?;
    ensure(r.mask == l.mapv(|v| v == 2), "coverage above the overlap threshold selects the whole instance")
}

fn check_simplex_and_determinism() -> Check {
    let net = TinyResidual::new(residual_spec(Backbone::Narrow, 3));
    let ck = ClassifierCheckpoint {
        config: ClassifierConfig { backbone: Backbone::Narrow, num_classes: 3, input_size: 32, ..Default::default() },
        labels: class_order(3).map_err(|e| e.to_string())?,
        curves: vec![],
        best_epoch: 0,
        params: net.init_params(9),
    };
    let model = Classifier::from_checkpoint(&ck).map_err(|e| e.to_string())?;
    let x = narrow_inputs(1.1).mapv(|v| v as f32);
    let probs = model.predict(&[x.clone(), x]).map_err(|e| e.to_string())?;
    ensure(
        probs.iter().all(|p| (p.sum() - 1.0).abs() < 1e-5 && p.iter().all(|v| (0.0..=1.0).contains(v))),
        "class probabilities must lie on the simplex",
    )?;
    ensure(probs[0] == probs[1], "duplicate inputs must get identical probabilities")?;
    ensure(!decide(0.5, 0.5), "a probability tie goes to background")?;
    let scene = SceneConfig { image_size: 32, frames_per_sequence: 3, ..Default::default() };
    let a = render_sequence(&scene, Partition::Train, ClassLabel::Before, 1);
    let b = render_sequence(&scene, Partition::Train, ClassLabel::Before, 1);
    let same = a.iter().zip(&b).all(|(f, g)| f.image == g.image && f.gt_instance_masks == g.gt_instance_masks);
    ensure(same, "scene rendering must be deterministic")?;
    let images: Vec<Array3<f32>> = a.iter().map(|f| crate::raster::to_tensor(&f.image)).collect();
    let labels = vec![0; images.len()];
    let run = || -> Vec<Array3<f32>> {
        BatchIterator::new(&images, &labels, 2, AugmentSpec::default(), 7, true).expect("batch size").flat_map(|b| b.images).collect()
    };
    ensure(run() == run(), "batches must repeat under the same seed")
}

/// Every fast invariant with its outcome.
pub fn invariant_suite() -> Vec<(&'static str, Check)> {
    let tamper = match analytic_iou_check(tampered_counts) {
        Ok(()) => Err("a tampered pixel counter went unnoticed".to_string()),
        Err(_) => Ok(()),
    };
    vec![
        ("background median and masking identities", check_background_identities()),
        ("analytic IoU values and symmetry", analytic_iou_check(pixel_counts)),
        ("IoU check rejects a tampered counter", tamper),
        ("threshold monotonicity and normalization", check_thresholds()),
        ("tile merge and zero-flow identities", check_losses()),
        ("refinement fixed point and forced selection", check_refinement()),
        ("probability simplex and determinism", check_simplex_and_determinism()),
    ]
}

pub fn criterion_invariants() -> CriterionOutcome {
    let results = invariant_suite();
    let failed: Vec<String> = results.iter().filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}"))).collect();
    let detail = if failed.is_empty() { format!("{} groups hold", results.len()) } else { failed.join("; ") };
    CriterionOutcome::judged(1, "invariant suite", failed.is_empty(), detail)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    /// Sampled parameters passed over because the loss has a kink within
    /// the finite-difference interval.
    pub kinked: usize,
    pub max_rel_err: f64,
}

/// Central finite differences (step 1e-3) against the analytic gradient of
/// the total training loss on the narrow backbone in double precision.
/// Parameters whose one-sided differences disagree straddle a ReLU or L1
/// kink and are replaced by the next random draw.
pub fn gradient_check(with_aux: bool, samples: usize, seed: u64) -> Result<GradCheck> {
    let net = TinyResidual::new(ResidualSpec::narrow(3));
    let mut params: Vec<f64> = net.init_params(seed);
    let x = narrow_inputs(0.2);
    let x1 = narrow_inputs(0.7);
    let flow = Array3::from_shape_fn((4, 4, 2), |(y, x, k)| if k == 0 { 0.4 + 0.1 * y as f64 } else { -0.2 * x as f64 / 4.0 });
    let warp = Warp::new(flow.view());
    let weights = LossWeights {
        kind: LossKind::CategoricalCrossEntropy,
        puzzle: with_aux.then_some((2.0, 2)),
        temporal: with_aux.then_some(6.0),
    };
    let next = with_aux.then_some((x1.view(), &warp));
    let mut grads = vec![0.0; params.len()];
    let l0 = sample_loss(&net, &params, x.view(), 0, next, &weights, &mut grads)?.total;
    let mut scratch = vec![0.0; params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let eps = 1e-3;
    let mut out = GradCheck { checked: 0, kinked: 0, max_rel_err: 0.0 };
    for i in sample(&mut rng, params.len(), params.len()).iter() {
        if out.checked == samples {
            break;
        }
        let orig = params[i];
        params[i] = orig + eps;
        let lp = sample_loss(&net, &params, x.view(), 0, next, &weights, &mut scratch)?.total;
        params[i] = orig - eps;
        let lm = sample_loss(&net, &params, x.view(), 0, next, &weights, &mut scratch)?.total;
        params[i] = orig;
        let (fwd, bwd) = ((lp - l0) / eps, (l0 - lm) / eps);
        if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()) + 1e-9 {
            out.kinked += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * eps);
        let scale = grads[i].abs().max(numeric.abs());
        let err = if scale < 1e-7 { 0.0 } else { (grads[i] - numeric).abs() / scale };
        out.max_rel_err = out.max_rel_err.max(err);
        out.checked += 1;
    }
    Ok(out)
}

pub fn criterion_gradients() -> CriterionOutcome {
    const TITLE: &str = "gradient check";
    let mut parts = Vec::new();
    let mut ok = true;
    for aux in [false, true] {
        match gradient_check(aux, 100, 11) {
            Ok(g) => {
                ok &= g.max_rel_err <= 1e-2;
                let name = if aux { "with puzzle+temporal" } else { "classification" };
                parts.push(format!("{name}: max rel err {:.2e} over {} ({} kinked skipped)", g.max_rel_err, g.checked, g.kinked));
                ok &= g.checked == 100;
            }
            Err(e) => return CriterionOutcome::errored(2, TITLE, &e),
        }
    }
    CriterionOutcome::judged(2, TITLE, ok, parts.join(", "))
}

/// Two-class and three-class runs of the default biased synthetic config.
#[derive(Clone, Debug)]
pub struct BiasRun {
    pub two_class: EvalReport,
    pub three_class: EvalReport,
    /// Two-class accuracy on test frames with every object painted mid-gray.
    pub shortcut_accuracy: f64,
}

fn coarse_and_refined_report(cfg: &PipelineConfig, out: &PipelineOutcome) -> Result<EvalReport> {
    let split = load_split(cfg, &out.stage_dirs[&StageName::Data])?;
    let trees = StageTrees {
        coarse: Some(out.stage_dirs[&StageName::Cam].clone()),
        refined: Some(out.stage_dirs[&StageName::Refine].clone()),
        segmented: None,
        saliency: None,
    };
    let opts = EvalOptions { stages: vec![Stage::C, Stage::R], ..Default::default() };
    let hashes = out.hashes.iter().map(|(k, v)| (k.name().to_string(), v.clone())).collect();
    run_protocol(&cfg.method, &split.test, &trees, &opts, hashes, pixel_counts)
}

/// Accuracy of a classifier on test frames whose objects are painted over.
pub fn ablated_accuracy(ck: &ClassifierCheckpoint, records: &[crate::dataio::FrameRecord]) -> Result<f64> {
    let model = Classifier::from_checkpoint(ck)?;
    let mut correct = 0usize;
    for rec in records {
        let mut img = read_rgb(&rec.path)?;
        let inst = read_labels(rec.gt_instances.as_ref().ok_or_else(|| crate::Error::MissingGroundTruth(rec.path.clone()))?)?;
        for (x, y, p) in img.enumerate_pixels_mut() {
            if inst[[y as usize, x as usize]] > 0 {
                *p = Rgb([NEUTRAL_GRAY; 3]);
            }
        }
        let probs = &model.predict(&[model.prepare(&img)])?[0];
        let best = probs.iter().enumerate().fold(0, |b, (i, &v)| if v > probs[b] { i } else { b });
        correct += usize::from(Some(best) == model.class_index(rec.class));
    }
    Ok(correct as f64 / records.len().max(1) as f64)
}

pub fn bias_run(work: &Path) -> Result<BiasRun> {
    let mut reports = Vec::new();
    let mut shortcut = 0.0;
    for three in [false, true] {
        let mut cfg = PipelineConfig { output_root: work.to_path_buf(), ..Default::default() };
        cfg.bgremoval.three_class = three;
        cfg.method = if three { "gradcam-br3" } else { "gradcam-2class" }.into();
        let out = run_pipeline(&cfg, &RunOptions { resume: false, until: Some(StageName::Refine) })?;
        let cfg = cfg.resolved();
        reports.push(coarse_and_refined_report(&cfg, &out)?);
        if !three {
            let ck = ClassifierCheckpoint::load(&out.stage_dirs[&StageName::TrainClassifier].join("classifier.ckpt"))?;
            let split = load_split(&cfg, &out.stage_dirs[&StageName::Data])?;
            shortcut = ablated_accuracy(&ck, &split.test)?;
        }
    }
    let three_class = reports.pop().expect("two runs");
    let two_class = reports.pop().expect("two runs");
    Ok(BiasRun { two_class, three_class, shortcut_accuracy: shortcut })
}

fn cell(r: &EvalReport, stage: Stage, split: Split) -> f64 {
    r.miou(stage, split).unwrap_or(f64::NAN)
}

pub fn criterion_bias(run: &BiasRun) -> CriterionOutcome {
    let c2 = cell(&run.two_class, Stage::C, Split::TestBefore);
    let c3 = cell(&run.three_class, Stage::C, Split::TestBefore);
    let ok = run.shortcut_accuracy >= 0.99 && c3 >= c2 + 2.0;
    CriterionOutcome::judged(
        3,
        "background-bias reproduction",
        ok,
        format!("two-class ablated accuracy {:.4}; C(Ts^B) three-class {c3:.2} vs two-class {c2:.2}", run.shortcut_accuracy),
    )
}

pub fn criterion_refinement(run: &BiasRun) -> CriterionOutcome {
    let c = cell(&run.three_class, Stage::C, Split::TestBefore);
    let r = cell(&run.three_class, Stage::R, Split::TestBefore);
    let ok = r >= c - 0.5 && (c >= 90.0 || r >= c);
    CriterionOutcome::judged(4, "refinement ordering", ok, format!("R(Ts^B) {r:.2} vs C(Ts^B) {c:.2} with oracle instances"))
}

pub fn criterion_gap(run: &BiasRun) -> CriterionOutcome {
    let b = cell(&run.three_class, Stage::C, Split::TestBefore);
    let a = cell(&run.three_class, Stage::C, Split::TestAfter);
    CriterionOutcome::judged(5, "before/after gap", b > a, format!("C(Ts^B) {b:.2} vs C(Ts^A) {a:.2}"))
}

#[derive(Clone, Debug)]
pub struct OracleRun {
    pub report: EvalReport,
    pub memorization_iou: f64,
}

/// IoU after training the segmenter on fifty copies of one frame.
pub fn memorization_iou() -> Result<f64> {
    let scene = SceneConfig { image_size: 64, object_radius_range: [5.0, 9.0], ..Default::default() };
    let (img, mask) = render_sequence(&scene, Partition::Train, ClassLabel::Before, 0)
        .into_iter()
        .map(|f| (f.image, f.gt_unwanted_mask))
        .find(|(_, m)| m.iter().filter(|&&v| v).count() > 100)
        .ok_or_else(|| crate::Error::Config("no frame with unwanted items".into()))?;
    let train = vec![SegSample::new(&img, &mask, 64)?; 50];
    let ck = train_segmenter_on(&train, &[], &SegConfig::default())?;
    let pred = Segmenter::from_checkpoint(&ck)?.segment(&img);
    let (i, u) = pixel_counts(&pred, &mask);
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

pub fn oracle_run(work: &Path) -> Result<OracleRun> {
    let mut cfg = PipelineConfig { output_root: work.to_path_buf(), method: "oracle".into(), ..Default::default() };
    cfg.saliency.source = CoarseSource::GroundTruth;
    let out = run_pipeline(&cfg, &RunOptions { resume: false, until: Some(StageName::Refine) })?;
    let report = coarse_and_refined_report(&cfg.resolved(), &out)?;
    Ok(OracleRun { report, memorization_iou: memorization_iou()? })
}

pub fn criterion_oracle(run: &OracleRun) -> CriterionOutcome {
    let cells: Vec<f64> = [Stage::C, Stage::R]
        .iter()
        .flat_map(|&s| Split::ALL.map(|sp| cell(&run.report, s, sp)))
        .collect();
    let ok = cells.iter().all(|&v| v == 100.0) && run.memorization_iou >= 0.95;
    CriterionOutcome::judged(
        6,
        "oracle end-to-end",
        ok,
        format!(
            "C/R cells {} ; segmenter memorization IoU {:.4}",
            cells.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" "),
            run.memorization_iou
        ),
    )
}

pub fn criterion_full_scale() -> CriterionOutcome {
    CriterionOutcome::skipped(7, "full-scale reproduction", "not gated: needs the public dataset and GPU-scale training")
}

/// Runs every criterion of `profile`; training-based ones write under `work`.
pub fn run_acceptance(profile: Profile, work: &Path) -> Vec<CriterionOutcome> {
    let mut out = vec![criterion_invariants(), criterion_gradients()];
    if profile == Profile::Fast {
        for (id, title) in [(3, "background-bias reproduction"), (4, "refinement ordering"), (5, "before/after gap"), (6, "oracle end-to-end")] {
            out.push(CriterionOutcome::skipped(id, title, "training-based; run the full_synthetic profile"));
        }
    } else {
        match bias_run(&work.join("bias")) {
            Ok(run) => out.extend([criterion_bias(&run), criterion_refinement(&run), criterion_gap(&run)]),
            Err(e) => {
                out.push(CriterionOutcome::errored(3, "background-bias reproduction", &e));
                out.push(CriterionOutcome::errored(4, "refinement ordering", &e));
                out.push(CriterionOutcome::errored(5, "before/after gap", &e));
            }
        }
        out.push(match oracle_run(&work.join("oracle")) {
            Ok(run) => criterion_oracle(&run),
            Err(e) => CriterionOutcome::errored(6, "oracle end-to-end", &e),
        });
    }
    out.push(criterion_full_scale());
    out
}
