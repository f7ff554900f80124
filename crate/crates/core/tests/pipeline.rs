use sortseg::evalreport::{Split, Stage};
use sortseg::pipeline::{run_pipeline, stage_hashes, PipelineConfig, RunOptions, StageName};

const TINY: &str = r#"
seed = 3
method = "tiny"

[scene]
image_size = 32
frames_per_sequence = 4
num_sequences_before = 3
num_sequences_after = 3
test_sequences_before = 2
test_sequences_after = 2
belt_speed = 4
object_count_range = [2, 3]
object_radius_range = [3.0, 5.0]

[classifier]
backbone = "narrow"
input_size = 32
max_epochs = 2
batch_size = 8

[segmenter]
input_size = 32
max_epochs = 2

[eval]
panels = 1
"#;

fn tiny(root: &std::path::Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_toml(TINY).unwrap();
    cfg.output_root = root.to_path_buf();
    cfg
}

#[test]
fn until_stops_the_tree_after_cam() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&tiny(dir.path()), &RunOptions { resume: false, until: Some(StageName::Cam) }).unwrap();
    assert!(out.report.is_none());
    for st in StageName::ALL {
        let done = out.stage_dirs.get(&st).is_some_and(|d| d.join("DONE").exists());
        let expected = matches!(st, StageName::Data | StageName::Bgremove | StageName::TrainClassifier | StageName::Cam);
        assert_eq!(done, expected, "{st}");
    }
    let names: Vec<String> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert!(names.iter().all(|n| !n.starts_with("refine") && !n.starts_with("segment") && !n.starts_with("eval")), "{names:?}");
}

#[test]
fn full_runs_are_reproducible_and_cached() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_pipeline(&tiny(a.path()), &RunOptions::default()).unwrap();
    let second = run_pipeline(&tiny(b.path()), &RunOptions::default()).unwrap();
    let (r1, r2) = (first.report.unwrap(), second.report.unwrap());
    assert_eq!(r1.cells, r2.cells);
    assert_eq!(r1.config_hashes, r2.config_hashes);
    assert!(r1.miou(Stage::C, Split::TestBefore).is_some() && r1.miou(Stage::S, Split::TestAfter).is_some());
    assert!(a.path().join("pipeline.toml").exists());

    let again = run_pipeline(&tiny(a.path()), &RunOptions::default()).unwrap();
    assert_eq!(again.reused.len(), StageName::ALL.len());
    assert_eq!(again.report.unwrap().cells, r1.cells);
}

#[test]
fn changing_a_stage_invalidates_only_downstream() {
    let base = tiny(std::path::Path::new("unused"));
    let mut seg = base.clone();
    seg.segmenter.max_epochs = 3;
    let (h0, h1) = (stage_hashes(&base), stage_hashes(&seg));
    for st in StageName::ALL {
        let downstream = matches!(st, StageName::TrainSeg | StageName::Segment | StageName::Eval);
        assert_eq!(h0[&st] != h1[&st], downstream, "{st}");
    }
    let mut bg = base.clone();
    bg.bgremoval.params.dev_thresh = 5.0;
    let h2 = stage_hashes(&bg);
    assert_eq!(h0[&StageName::Data], h2[&StageName::Data]);
    assert!(StageName::ALL[1..].iter().all(|st| h0[st] != h2[st]));
}
