//! One test per acceptance criterion; each prints its PASS/FAIL line.
//! Run with `cargo test -p patchdiff --test acceptance -- --nocapture --test-threads=1`.

use patchdiff::checks;

#[test]
fn criterion_01_patch_bijection() {
    let r = checks::patch_bijection();
    println!("{r}");
    assert!(r.passed, "{r}");
}

#[test]
fn criterion_02_schedule_consistency() {
    let r = checks::schedule_consistency();
    println!("{r}");
    assert!(r.passed, "{r}");
}

#[test]
fn criterion_03_oracle_optimality() {
    let r = checks::oracle_optimality();
    println!("{r}");
    assert!(r.passed, "{r}");
}

#[test]
fn criterion_04_score_relation() {
    let r = checks::score_relation();
    println!("{r}");
    assert!(r.passed, "{r}");
}

#[test]
fn criterion_05_parameterization_algebra() {
    let r = checks::parameterization_algebra();
    println!("{r}");
    assert!(r.passed, "{r}");
}

#[test]
fn criterion_06_gradient_correctness() {
    let r = checks::gradient_correctness();
    println!("{r}");
    assert!(r.passed, "{r}");
}

#[test]
fn criterion_07_loss_floor() {
    let r = checks::loss_floor();
    println!("{r}");
    assert!(r.passed, "{r}");
}

#[test]
fn criterion_08_sampling_correctness() {
    let r = checks::sampling_correctness();
    println!("{r}");
    assert!(r.passed, "{r}");
}

#[test]
fn criterion_09_blur_contraction() {
    let r = checks::blur_contraction();
    println!("{r}");
    assert!(r.passed, "{r}");
}

#[test]
fn criterion_10_efficiency_direction() {
    let r = checks::efficiency_direction();
    println!("{r}");
    assert!(r.passed, "{r}");
}

#[test]
fn criterion_11_guidance_contract() {
    let r = checks::guidance_contract();
    println!("{r}");
    assert!(r.passed, "{r}");
}
