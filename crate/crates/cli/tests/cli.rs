use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
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
max_epochs = 1
batch_size = 8

[segmenter]
input_size = 32
max_epochs = 1

[eval]
panels = 1
"#;

fn sortseg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sortseg"))
        .args(args)
        .current_dir(dir)
        .env_remove("SORTSEG_OUTPUT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = sortseg(args, dir);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["--help"], dir.path());
    for cmd in ["generate", "ingest", "bgremove", "train-classifier", "cam", "refine", "train-seg", "segment", "eval", "pipeline", "acceptance"] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
    for flag in ["--seed", "--resume", "--until", "--layout"] {
        assert!(text.contains(flag), "missing {flag}");
    }
}

#[test]
fn fast_acceptance_passes() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["acceptance", "--profile", "fast"], dir.path());
    assert_eq!(text.lines().filter(|l| l.starts_with("criterion ")).count(), 7);
    assert!(text.contains("criterion 1 PASS") && text.contains("criterion 2 PASS"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn bad_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        &["cam", "--data", "x", "--checkpoint", "y", "--out", "z", "--tau", "1.5"][..],
        &["refine", "--data", "x", "--coarse", "y", "--out", "z", "--provider", "magic"],
        &["pipeline", "--until", "nowhere"],
        &["acceptance", "--profile", "slow"],
    ] {
        let out = sortseg(args, d);
        assert!(!out.status.success(), "{args:?} should fail");
    }
    let out = sortseg(&["ingest", "--root", "missing-dir"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn stage_commands_chain_into_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let c = cfg.to_str().unwrap();
    ok(&["--config", c, "generate", "--out", "data"], d);
    let stats = ok(&["--config", c, "ingest", "--root", "data", "--manifest", "stats.txt"], d);
    assert!(stats.contains("frames") && d.join("stats.txt").exists());
    ok(&["--config", c, "bgremove", "--root", "data"], d);
    assert!(d.join("data-br/train/background").is_dir());
    let trained = ok(&["--config", c, "train-classifier", "--data", "data-br", "--out", "cls.ckpt"], d);
    assert!(trained.contains("best epoch") && d.join("cls.csv").exists());
    ok(&["--config", c, "cam", "--data", "data", "--checkpoint", "cls.ckpt", "--out", "coarse", "--tau", "otsu"], d);
    ok(&["--config", c, "refine", "--data", "data", "--coarse", "coarse", "--out", "refined", "--provider", "oracle"], d);
    ok(&["--config", c, "train-seg", "--data", "data", "--masks", "refined", "--out", "seg.ckpt"], d);
    ok(&["--config", c, "segment", "--data", "data", "--checkpoint", "seg.ckpt", "--out", "segmented"], d);
    let table = ok(
        &[
            "--config", c, "eval", "--data", "data", "--coarse", "coarse", "--refined", "refined", "--segmented", "segmented",
            "--saliency", "coarse", "--out", "report-a", "--stages", "c,r,s", "--splits", "before,after",
        ],
        d,
    );
    assert!(table.contains("Ts^B") && d.join("report-a/report.csv").exists());
    ok(&["--config", c, "eval", "--data", "data", "--coarse", "refined", "--out", "report-b", "--stages", "c", "--method", "other"], d);
    let ranking = ok(&["eval", "--compare", "report-a", "report-b"], d);
    assert!(ranking.contains("tiny") && ranking.contains("other"));
}

#[test]
fn pipeline_until_cam_honours_the_output_env() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let out = Command::new(env!("CARGO_BIN_EXE_sortseg"))
        .args(["--config", cfg.to_str().unwrap(), "--until", "cam", "pipeline"])
        .current_dir(d)
        .env("SORTSEG_OUTPUT", d.join("runs"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let names: Vec<String> = std::fs::read_dir(d.join("runs")).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert!(names.iter().any(|n| n.starts_with("cam-")));
    assert!(!names.iter().any(|n| n.starts_with("refine-") || n.starts_with("eval-")), "{names:?}");
}
