//! End-to-end orchestration from one TOML file. Every stage writes into
//! `<output_root>/<stage>-<hash>/`, where the hash chains the stage's own
//! configuration with the hashes of the stages it reads from. A `DONE` marker
//! makes finished stages skippable.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bgremoval::{write_three_class_tree, BgParams};
use crate::classifier::{train_on_dataset, Classifier, ClassifierCheckpoint, ClassifierConfig};
use crate::dataio::{ingest, of_class, ClassLabel, DatasetSplit, FrameRecord, IngestOptions, Layout};
use crate::error::{Error, IoContext, Result};
use crate::evalreport::{pixel_counts, run_protocol, write_panels, EvalOptions, EvalReport, StageTrees};
use crate::formats::{read_mask, write_mask, KeyValues};
use crate::refine::{batch_refine, ProviderConfig, RefineParams};
use crate::saliency::{batch_saliency, CamMethod, LayerSelector, SaliencyJob, Threshold};
use crate::scenegen::{generate_scene, SceneConfig};
use crate::segtrain::{batch_segment, train_segmenter, SegCheckpoint, SegConfig};
use crate::util::{config_hash, derive_seed, hash_parts};

/// Environment variable that overrides `output_root`.
pub const OUTPUT_ROOT_ENV: &str = "SORTSEG_OUTPUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageName {
    Data,
    Bgremove,
    TrainClassifier,
    Cam,
    Refine,
    TrainSeg,
    Segment,
    Eval,
}

impl StageName {
    pub const ALL: [StageName; 8] = [
        StageName::Data,
        StageName::Bgremove,
        StageName::TrainClassifier,
        StageName::Cam,
        StageName::Refine,
        StageName::TrainSeg,
        StageName::Segment,
        StageName::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageName::Data => "data",
            StageName::Bgremove => "bgremove",
            StageName::TrainClassifier => "train-classifier",
            StageName::Cam => "cam",
            StageName::Refine => "refine",
            StageName::TrainSeg => "train-seg",
            StageName::Segment => "segment",
            StageName::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub source: DataSource,
    /// Dataset root when `source = "dataset"`.
    pub root: Option<PathBuf>,
    pub layout: Layout,
    /// Share of training sequences kept for training; the rest validate.
    pub train_ratio: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { source: DataSource::Synthetic, root: None, layout: Layout::Canonical, train_ratio: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BgSection {
    /// Train the three-class classifier on the background-removed tree.
    pub three_class: bool,
    pub params: BgParams,
}

impl Default for BgSection {
    fn default() -> Self {
        Self { three_class: true, params: BgParams::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarseSource {
    #[default]
    Cam,
    /// Copies ground-truth masks; for oracle runs on annotated data.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencySection {
    pub source: CoarseSource,
    pub method: CamMethod,
    pub target: ClassLabel,
    pub threshold: Threshold,
    pub layer: LayerSelector,
    pub save_maps: bool,
}

impl Default for SaliencySection {
    fn default() -> Self {
        Self {
            source: CoarseSource::Cam,
            method: CamMethod::Gradcam,
            target: ClassLabel::Before,
            threshold: Threshold::default(),
            layer: LayerSelector::LastConv,
            save_maps: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineSection {
    pub provider: ProviderConfig,
    pub params: RefineParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_root: PathBuf,
    /// Label used in reports and comparisons.
    pub method: String,
    pub data: DataSection,
    pub scene: SceneConfig,
    pub bgremoval: BgSection,
    pub classifier: ClassifierConfig,
    pub saliency: SaliencySection,
    pub refine: RefineSection,
    pub segmenter: SegConfig,
    pub eval: EvalOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_root: PathBuf::from("sortseg-out"),
            method: "gradcam".into(),
            data: DataSection::default(),
            scene: SceneConfig::default(),
            bgremoval: BgSection::default(),
            classifier: ClassifierConfig::default(),
            saliency: SaliencySection::default(),
            refine: RefineSection::default(),
            segmenter: SegConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        toml::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Copy with every stage seed derived from the global seed and the class
    /// count following the background-removal switch.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.scene.seed = derive_seed(self.seed, "scene");
        c.classifier.seed = derive_seed(self.seed, "classifier");
        c.classifier.num_classes = if self.bgremoval.three_class { 3 } else { 2 };
        c.classifier.val_ratio = self.data.train_ratio;
        c.segmenter.seed = derive_seed(self.seed, "segmenter");
        c.segmenter.train_ratio = self.data.train_ratio;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.source == DataSource::Dataset && self.data.root.is_none() {
            return Err(Error::Config("data.root is required when data.source = \"dataset\"".into()));
        }
        if self.data.source == DataSource::Synthetic {
            self.scene.validate()?;
        }
        let r = self.resolved();
        r.classifier.validate()?;
        r.segmenter.validate()?;
        r.saliency.threshold.validate()?;
        if !(0.0..=1.0).contains(&r.refine.params.overlap_tau) {
            return Err(Error::Config("refine overlap_tau must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Flags shared by every stage invocation.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Keep per-frame outputs of an interrupted stage instead of clearing it.
    pub resume: bool,
    /// Last stage to run.
    pub until: Option<StageName>,
}

#[derive(Clone, Debug, Default)]
pub struct PipelineOutcome {
    pub stage_dirs: BTreeMap<StageName, PathBuf>,
    pub hashes: BTreeMap<StageName, String>,
    /// Stages skipped because their `DONE` marker existed.
    pub reused: Vec<StageName>,
    pub report: Option<EvalReport>,
}

const DONE: &str = "DONE";

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    opts: &'a RunOptions,
    out: &'a PipelineOutcome,
}

impl Ctx<'_> {
    fn dir(&self, st: StageName) -> &Path {
        &self.out.stage_dirs[&st]
    }
}

/// Per-stage hashes in pipeline order; each covers the stage configuration
/// and every upstream hash it depends on.
pub fn stage_hashes(cfg: &PipelineConfig) -> BTreeMap<StageName, String> {
    let c = cfg.resolved();
    let mut h = BTreeMap::new();
    let data = match c.data.source {
        DataSource::Synthetic => hash_parts(&["synthetic", &config_hash(&c.scene)]),
        DataSource::Dataset => {
            let root = c.data.root.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            hash_parts(&["dataset", &root, &config_hash(&(c.data.layout, c.data.train_ratio))])
        }
    };
    let bg = hash_parts(&[&data, &config_hash(&c.bgremoval)]);
    let cls = hash_parts(&[&bg, &config_hash(&c.classifier)]);
    let cam = match c.saliency.source {
        CoarseSource::Cam => hash_parts(&[&cls, &config_hash(&c.saliency)]),
        CoarseSource::GroundTruth => hash_parts(&[&data, "ground_truth"]),
    };
    let refine = hash_parts(&[&data, &cam, &config_hash(&c.refine)]);
    let train_seg = hash_parts(&[&data, &refine, &config_hash(&c.segmenter)]);
    let segment = hash_parts(&[&data, &train_seg]);
    let eval = hash_parts(&[&data, &cam, &refine, &segment, &c.method, &config_hash(&c.eval)]);
    for (st, v) in StageName::ALL.into_iter().zip([data, bg, cls, cam, refine, train_seg, segment, eval]) {
        h.insert(st, v);
    }
    h
}

pub fn output_root(cfg: &PipelineConfig) -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| cfg.output_root.clone())
}

/// Dataset root the pipeline reads frames from.
pub fn data_root(cfg: &PipelineConfig, data_dir: &Path) -> PathBuf {
    match cfg.data.source {
        DataSource::Synthetic => data_dir.join("dataset"),
        DataSource::Dataset => cfg.data.root.clone().expect("validated"),
    }
}

/// Ingests the dataset the pipeline runs on.
pub fn load_split(cfg: &PipelineConfig, data_dir: &Path) -> Result<DatasetSplit> {
    let opts = IngestOptions { layout: cfg.data.layout, val_ratio: cfg.data.train_ratio, seed: derive_seed(cfg.seed, "split") };
    Ok(ingest(&data_root(cfg, data_dir), &opts)?.0)
}

fn write_done(dir: &Path, stage: StageName, hash: &str, extra: &KeyValues) -> Result<()> {
    let mut kv = extra.clone();
    kv.set("stage", stage.name()).set("hash", hash);
    kv.write(&dir.join(DONE))
}

/// Runs the pipeline up to `opts.until` (default: all stages).
pub fn run_pipeline(cfg: &PipelineConfig, opts: &RunOptions) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let root = output_root(&cfg);
    fs::create_dir_all(&root).at(&root)?;
    fs::write(root.join("pipeline.toml"), cfg.to_toml()).at(root.join("pipeline.toml"))?;
    let hashes = stage_hashes(&cfg);
    let mut out = PipelineOutcome { hashes: hashes.clone(), ..Default::default() };
    for st in StageName::ALL {
        let dir = root.join(format!("{}-{}", st.name(), hashes[&st]));
        out.stage_dirs.insert(st, dir.clone());
        let skip_data = st == StageName::Data && cfg.data.source == DataSource::Dataset;
        let unused = cfg.saliency.source == CoarseSource::GroundTruth
            && matches!(st, StageName::Bgremove | StageName::TrainClassifier);
        if unused {
            log::info!("stage {st}: not needed with ground-truth coarse masks");
        } else if dir.join(DONE).exists() || skip_data {
            log::info!("stage {st}: reusing {}", dir.display());
            out.reused.push(st);
        } else {
            if dir.exists() && !opts.resume {
                fs::remove_dir_all(&dir).at(&dir)?;
            }
            fs::create_dir_all(&dir).at(&dir)?;
            log::info!("stage {st}: running into {}", dir.display());
            let extra = run_stage(st, &Ctx { cfg: &cfg, opts, out: &out })
                .map_err(|e| Error::Stage { stage: st.name().to_string(), source: Box::new(e) })?;
            write_done(&dir, st, &hashes[&st], &extra)?;
        }
        if st == StageName::Eval {
            out.report = Some(EvalReport::read(&dir)?);
        }
        if opts.until == Some(st) {
            break;
        }
    }
    Ok(out)
}

fn run_stage(st: StageName, ctx: &Ctx<'_>) -> Result<KeyValues> {
    let cfg = ctx.cfg;
    let dir = ctx.dir(st).to_path_buf();
    let data_dir = ctx.dir(StageName::Data).to_path_buf();
    let mut kv = KeyValues::new();
    match st {
        StageName::Data => {
            let s = generate_scene(&cfg.scene, &data_dir.join("dataset"))?;
            kv.set("frames", s.frames).set("sequences", s.sequences);
        }
        StageName::Bgremove => {
            if cfg.bgremoval.three_class {
                let split = load_split(cfg, &data_dir)?;
                let s = write_three_class_tree(&split.training_pool(), &cfg.bgremoval.params, derive_seed(cfg.seed, "bgremove"), &dir.join("tree"))?;
                kv.set("before", s.before).set("after", s.after).set("background", s.background);
            } else {
                kv.set("three_class", false);
            }
        }
        StageName::TrainClassifier => {
            let (root, layout) = if cfg.bgremoval.three_class {
                (ctx.dir(StageName::Bgremove).join("tree"), Layout::Canonical)
            } else {
                (data_root(cfg, &data_dir), cfg.data.layout)
            };
            let ck = train_on_dataset(&root, layout, &cfg.classifier)?;
            ck.save(&dir.join("classifier.ckpt"))?;
            fs::write(dir.join("curves.csv"), ck.curves_csv()).at(dir.join("curves.csv"))?;
            kv.set("best_epoch", ck.best_epoch);
        }
        StageName::Cam => {
            let split = load_split(cfg, &data_dir)?;
            let records = cam_records(&split);
            match cfg.saliency.source {
                CoarseSource::Cam => {
                    let ck = ClassifierCheckpoint::load(&ctx.dir(StageName::TrainClassifier).join("classifier.ckpt"))?;
                    let model = Classifier::from_checkpoint(&ck)?;
                    let job = SaliencyJob {
                        method: cfg.saliency.method,
                        target: cfg.saliency.target,
                        threshold: cfg.saliency.threshold,
                        layer: cfg.saliency.layer,
                        resume: ctx.opts.resume,
                        save_maps: cfg.saliency.save_maps,
                    };
                    let s = batch_saliency(&model, &records, &job, &dir)?;
                    kv.set("written", s.written).set("method", cfg.saliency.method);
                }
                CoarseSource::GroundTruth => {
                    for rec in &records {
                        let gt = rec.gt_mask.as_ref().ok_or_else(|| Error::MissingGroundTruth(rec.path.clone()))?;
                        write_mask(&rec.mirror_path(&dir, "png"), &read_mask(gt)?)?;
                    }
                    kv.set("written", records.len()).set("method", "ground_truth");
                }
            }
        }
        StageName::Refine => {
            let split = load_split(cfg, &data_dir)?;
            let s = batch_refine(
                &cam_records(&split),
                ctx.dir(StageName::Cam),
                &cfg.refine.provider,
                &cfg.refine.params,
                &dir,
                ctx.opts.resume,
            )?;
            kv.set("written", s.written).set("provider", cfg.refine.provider.provider.name());
        }
        StageName::TrainSeg => {
            let split = load_split(cfg, &data_dir)?;
            let train = of_class(&split.training_pool(), ClassLabel::Before);
            let ck = train_segmenter(&train, ctx.dir(StageName::Refine), &cfg.segmenter)?;
            ck.save(&dir.join("segmenter.ckpt"))?;
            fs::write(dir.join("curves.csv"), ck.curves_csv()).at(dir.join("curves.csv"))?;
            kv.set("best_epoch", ck.best_epoch);
        }
        StageName::Segment => {
            let split = load_split(cfg, &data_dir)?;
            let ck = SegCheckpoint::load(&ctx.dir(StageName::TrainSeg).join("segmenter.ckpt"))?;
            let s = batch_segment(&ck, &split.test, &dir, ctx.opts.resume)?;
            kv.set("written", s.written);
        }
        StageName::Eval => {
            let split = load_split(cfg, &data_dir)?;
            let trees = StageTrees {
                coarse: Some(ctx.dir(StageName::Cam).to_path_buf()),
                refined: Some(ctx.dir(StageName::Refine).to_path_buf()),
                segmented: Some(ctx.dir(StageName::Segment).to_path_buf()),
                saliency: Some(ctx.dir(StageName::Cam).to_path_buf()),
            };
            let hashes = ctx.out.hashes.iter().map(|(k, v)| (k.name().to_string(), v.clone())).collect();
            let report = run_protocol(&cfg.method, &split.test, &trees, &cfg.eval, hashes, pixel_counts)?;
            report.write(&dir)?;
            write_panels(&split.test, &trees, &cfg.eval, &dir)?;
            kv.set("cells", report.cells.len());
        }
    }
    Ok(kv)
}

/// Frames that receive coarse and refined masks: the before-camera training
/// pool and every test frame.
pub fn cam_records(split: &DatasetSplit) -> Vec<FrameRecord> {
    let mut v = of_class(&split.training_pool(), ClassLabel::Before);
    v.extend(split.test.iter().cloned());
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = PipelineConfig { seed: 4, method: "x".into(), ..Default::default() };
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = PipelineConfig::from_toml("seed = 3\n[classifier]\nmax_epochs = 2\n").unwrap();
        assert_eq!(partial.classifier.max_epochs, 2);
        assert_eq!(partial.scene, SceneConfig::default());
    }

    #[test]
    fn upstream_change_invalidates_exactly_downstream() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.refine.params.overlap_tau = 0.7;
        let (ha, hb) = (stage_hashes(&a), stage_hashes(&b));
        for st in StageName::ALL {
            let changed = ha[&st] != hb[&st];
            let downstream = matches!(st, StageName::Refine | StageName::TrainSeg | StageName::Segment | StageName::Eval);
            assert_eq!(changed, downstream, "{st}");
        }
    }

    #[test]
    fn stage_names_parse() {
        for st in StageName::ALL {
            assert_eq!(StageName::parse(st.name()).unwrap(), st);
        }
        assert!(StageName::parse("nope").is_err());
    }
}
