mod common;

use std::time::Instant;

#[test]
fn every_layer_and_loss_matches_finite_differences() {
    let t = Instant::now();
    let results = common::gradient_suite();
    let secs = t.elapsed().as_secs_f64();
    let mut failed = Vec::new();
    for (name, err) in &results {
        println!("{name:<26} max rel err {err:.2e}");
        if !(*err < common::FD_TOL) {
            failed.push(*name);
        }
    }
    assert!(failed.is_empty(), "gradient check failed for {failed:?}");
    assert!(secs < 60.0, "gradient suite took {secs:.1}s");
}
