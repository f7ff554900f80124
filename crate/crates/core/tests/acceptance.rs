use std::path::PathBuf;
use std::sync::OnceLock;

use sortseg::acceptance::*;

fn work_dir() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        // stage caches are keyed by configuration only, so start clean
        let _ = std::fs::remove_dir_all(&dir);
        dir
    })
}

fn bias() -> &'static BiasRun {
    static RUN: OnceLock<BiasRun> = OnceLock::new();
    RUN.get_or_init(|| bias_run(&work_dir().join("bias")).expect("biased synthetic run"))
}

fn report(outcome: CriterionOutcome) {
    println!("{outcome}");
    assert_ne!(outcome.verdict, Verdict::Fail, "{outcome}");
}

#[test]
fn criterion_1_invariant_suite() {
    report(criterion_invariants());
}

#[test]
fn criterion_2_gradient_check() {
    report(criterion_gradients());
}

#[test]
fn criterion_3_background_bias() {
    report(criterion_bias(bias()));
}

#[test]
fn criterion_4_refinement_ordering() {
    report(criterion_refinement(bias()));
}

#[test]
fn criterion_5_before_after_gap() {
    report(criterion_gap(bias()));
}

#[test]
fn criterion_6_oracle_end_to_end() {
    report(criterion_oracle(&oracle_run(&work_dir().join("oracle")).expect("oracle run")));
}

#[test]
fn criterion_7_full_scale_is_not_gated() {
    let o = criterion_full_scale();
    println!("{o}");
    assert_eq!(o.verdict, Verdict::Skipped);
}
