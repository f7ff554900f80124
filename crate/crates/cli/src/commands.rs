use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use sortseg::acceptance::{run_acceptance, Verdict};
use sortseg::bgremoval::{default_output_root, write_three_class_tree};
use sortseg::classifier::{train_on_dataset, Classifier, ClassifierCheckpoint};
use sortseg::dataio::{ingest, of_class, ClassLabel, DatasetSplit, IngestOptions};
use sortseg::evalreport::{compare_methods, pixel_counts, run_protocol, write_panels, EvalReport, StageTrees};
use sortseg::pipeline::{cam_records, output_root, run_pipeline, stage_hashes, PipelineConfig, RunOptions};
use sortseg::refine::batch_refine;
use sortseg::saliency::{batch_saliency, SaliencyJob};
use sortseg::scenegen::{generate_scene, LightingBias};
use sortseg::segtrain::{batch_segment, train_segmenter, SegCheckpoint};
use sortseg::util::derive_seed;

use crate::{Cli, Command, Global};

/// The config file (or defaults) with global flags applied.
fn config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(layout) = g.layout {
        cfg.data.layout = layout;
    }
    if let Some(out) = &g.output {
        cfg.output_root = out.clone();
    }
    Ok(cfg)
}

fn load(cfg: &PipelineConfig, root: &Path) -> Result<DatasetSplit> {
    let opts = IngestOptions { layout: cfg.data.layout, val_ratio: cfg.data.train_ratio, seed: derive_seed(cfg.seed, "split") };
    let (split, _) = ingest(root, &opts).with_context(|| format!("reading dataset {}", root.display()))?;
    Ok(split)
}

fn all_frames(split: &DatasetSplit) -> Vec<sortseg::dataio::FrameRecord> {
    let mut v = split.training_pool();
    v.extend(split.test.iter().cloned());
    v
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let g = cli.global;
    let cfg = config(&g)?;
    match cli.command {
        Command::Generate(a) => {
            let mut scene = cfg.resolved().scene;
            if let Some(n) = a.image_size {
                scene.image_size = n;
            }
            if let Some(n) = a.frames_per_sequence {
                scene.frames_per_sequence = n;
            }
            scene.hard_mode |= a.hard_mode;
            if a.no_lighting_bias {
                scene.lighting_bias = LightingBias::none();
            }
            let s = generate_scene(&scene, &a.out)?;
            println!("wrote {} frames in {} sequences to {}", s.frames, s.sequences, a.out.display());
            println!("after-camera unwanted items: {} survived, {} removed", s.unwanted_after_survived, s.unwanted_after_removed);
        }
        Command::Ingest(a) => {
            let opts = IngestOptions { layout: cfg.data.layout, val_ratio: cfg.data.train_ratio, seed: derive_seed(cfg.seed, "split") };
            let (_, stats) = ingest(&a.root, &opts)?;
            let kv = stats.to_key_values();
            print!("{}", kv.render());
            if let Some(m) = a.manifest {
                kv.write(&m)?;
            }
        }
        Command::Bgremove(a) => {
            let mut params = cfg.bgremoval.params.clone();
            if let Some(v) = a.dev_thresh {
                params.dev_thresh = v;
            }
            if let Some(v) = a.sat_thresh {
                params.sat_thresh = v;
            }
            if let Some(v) = a.min_blob {
                params.min_blob = v;
            }
            let out = a.out.unwrap_or_else(|| default_output_root(&a.root));
            let split = load(&cfg, &a.root)?;
            let s = write_three_class_tree(&split.training_pool(), &params, derive_seed(cfg.seed, "bgremove"), &out)?;
            println!("{}: before {} after {} background {}", out.display(), s.before, s.after, s.background);
        }
        Command::TrainClassifier(a) => {
            let mut c = cfg.resolved().classifier;
            c.num_classes = match a.classes {
                Some(n) => n,
                None => load(&cfg, &a.data)?.classes().len(),
            };
            if let Some(n) = a.epochs {
                c.max_epochs = n;
            }
            if let Some(n) = a.input_size {
                c.input_size = n;
            }
            c.puzzle_enabled |= a.puzzle;
            c.temporal_enabled |= a.temporal;
            if a.no_augment {
                c.augment.enabled = false;
            }
            let ck = train_on_dataset(&a.data, cfg.data.layout, &c)?;
            ck.save(&a.out)?;
            let curves = a.out.with_extension("csv");
            fs::write(&curves, ck.curves_csv()).with_context(|| format!("writing {}", curves.display()))?;
            println!("best epoch {}; checkpoint {}; curves {}", ck.best_epoch, a.out.display(), curves.display());
        }
        Command::Cam(a) => {
            let s = &cfg.saliency;
            let job = SaliencyJob {
                method: a.method.unwrap_or(s.method),
                target: a.target.unwrap_or(s.target),
                threshold: a.tau.unwrap_or(s.threshold),
                layer: a.layer.unwrap_or(s.layer),
                resume: g.resume,
                save_maps: s.save_maps && !a.no_maps,
            };
            let model = Classifier::from_checkpoint(&ClassifierCheckpoint::load(&a.checkpoint)?)?;
            let split = load(&cfg, &a.data)?;
            let records = if a.all { all_frames(&split) } else { cam_records(&split) };
            let r = batch_saliency(&model, &records, &job, &a.out)?;
            println!("{} written, {} skipped under {}", r.written, r.skipped, a.out.display());
        }
        Command::Refine(a) => {
            let mut provider = cfg.refine.provider.clone();
            let mut params = cfg.refine.params.clone();
            if let Some(p) = a.provider {
                provider.provider = p;
            }
            if let Some(cmd) = a.external_command {
                provider.external_command = cmd;
            }
            if let Some(t) = a.overlap_tau {
                params.overlap_tau = t;
            }
            if let Some(l) = a.leftover {
                params.leftover = l;
            }
            if a.no_fill_holes {
                params.fill_holes = false;
            }
            let split = load(&cfg, &a.data)?;
            let records = if a.all { all_frames(&split) } else { cam_records(&split) };
            let r = batch_refine(&records, &a.coarse, &provider, &params, &a.out, g.resume)?;
            println!("{} written, {} skipped under {}", r.written, r.skipped, a.out.display());
        }
        Command::TrainSeg(a) => {
            let mut c = cfg.resolved().segmenter;
            if let Some(n) = a.epochs {
                c.max_epochs = n;
            }
            if let Some(n) = a.input_size {
                c.input_size = n;
            }
            let split = load(&cfg, &a.data)?;
            let train = of_class(&split.training_pool(), ClassLabel::Before);
            let ck = train_segmenter(&train, &a.masks, &c)?;
            ck.save(&a.out)?;
            let curves = a.out.with_extension("csv");
            fs::write(&curves, ck.curves_csv()).with_context(|| format!("writing {}", curves.display()))?;
            println!("best epoch {}; checkpoint {}", ck.best_epoch, a.out.display());
        }
        Command::Segment(a) => {
            let ck = SegCheckpoint::load(&a.checkpoint)?;
            let split = load(&cfg, &a.data)?;
            let records = if a.all { all_frames(&split) } else { split.test.clone() };
            let r = batch_segment(&ck, &records, &a.out, g.resume)?;
            println!("{} written, {} skipped under {}", r.written, r.skipped, a.out.display());
        }
        Command::Eval(a) => {
            if let Some(dirs) = a.compare {
                let reports = dirs.iter().map(|d| EvalReport::read(d)).collect::<sortseg::Result<Vec<_>>>()?;
                print!("{}", compare_methods(&reports)?.to_table());
                return Ok(ExitCode::SUCCESS);
            }
            let (Some(data), Some(out)) = (a.data, a.out) else { bail!("--data and --out are required") };
            let mut opts = cfg.eval.clone();
            if let Some(v) = a.stages {
                opts.stages = v;
            }
            if let Some(v) = a.splits {
                opts.splits = v;
            }
            if let Some(m) = a.mode {
                opts.mode = m;
            }
            if let Some(n) = a.panels {
                opts.panels = n;
            }
            let trees = StageTrees { coarse: a.coarse, refined: a.refined, segmented: a.segmented, saliency: a.saliency };
            let split = load(&cfg, &data)?;
            let hashes = stage_hashes(&cfg).into_iter().map(|(k, v)| (k.name().to_string(), v)).collect();
            let method = a.method.unwrap_or_else(|| cfg.method.clone());
            let report = run_protocol(&method, &split.test, &trees, &opts, hashes, pixel_counts)?;
            report.write(&out)?;
            write_panels(&split.test, &trees, &opts, &out)?;
            print!("{}", report.to_table());
        }
        Command::Pipeline => {
            let out = run_pipeline(&cfg, &RunOptions { resume: g.resume, until: g.until })?;
            for (st, dir) in &out.stage_dirs {
                let tag = if out.reused.contains(st) { "reused" } else { "ran" };
                println!("{st:>16}  {tag:<6}  {}", dir.display());
                if g.until == Some(*st) {
                    break;
                }
            }
            if let Some(r) = out.report {
                print!("{}", r.to_table());
            }
        }
        Command::Acceptance(a) => {
            let work = a.work.unwrap_or_else(|| output_root(&cfg).join("acceptance"));
            let outcomes = run_acceptance(a.profile, &work);
            for o in &outcomes {
                println!("{o}");
            }
            let failed: Vec<String> =
                outcomes.iter().filter(|o| o.verdict == Verdict::Fail).map(|o| format!("{} ({})", o.id, o.title)).collect();
            if !failed.is_empty() {
                eprintln!("failed criteria: {}", failed.join(", "));
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
