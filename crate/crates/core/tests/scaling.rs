//! Measured wall-time trends of the scaling harness. One test so the
//! timings never contend with each other; assertions are trends with wide
//! margins, not absolutes.

use kgt_core::attention::Backend;
use kgt_core::bench::{run_scaling, CostKind, RunSpec, ScaleCell};

#[test]
fn wall_time_trends() {
    let cell = |hw: usize, k: usize, kind| ScaleCell {
        hw,
        k,
        d: 16,
        heads: 2,
        kind,
    };
    let spec = RunSpec {
        cells: vec![
            // mask vs gather growth in node count at fixed small k
            cell(256, 4, CostKind::Sparse(Backend::Mask)),
            cell(256, 4, CostKind::Sparse(Backend::Gather)),
            cell(1024, 4, CostKind::Sparse(Backend::Mask)),
            cell(1024, 4, CostKind::Sparse(Backend::Gather)),
            // gather at full k against the dense baseline, window scale
            cell(64, 64, CostKind::Dense),
            cell(64, 63, CostKind::Sparse(Backend::Gather)),
        ],
        repeats: 9,
        budget_bytes: u64::MAX,
    };
    let report = run_scaling(&spec).unwrap();
    let wall = |hw: usize, k: usize, backend: &str| -> f64 {
        report
            .find(hw, k, backend)
            .unwrap_or_else(|| panic!("row {hw}/{k}/{backend}"))
            .wall_ms
    };

    // The mask backend's full logit matrix makes its wall time grow
    // superlinearly in hw while gather grows about linearly at fixed k.
    let mask_ratio = wall(1024, 4, "mask") / wall(256, 4, "mask");
    let gather_ratio = wall(1024, 4, "gather") / wall(256, 4, "gather");
    assert!(
        mask_ratio > gather_ratio,
        "mask growth {mask_ratio:.2} should exceed gather growth {gather_ratio:.2}"
    );

    // At k = hw-1 the gather backend does the same score/aggregate work as
    // dense plus its materialization; the measured sanity bound is 3x.
    let dense = wall(64, 64, "dense");
    let gather_full = wall(64, 63, "gather");
    assert!(
        gather_full <= 3.0 * dense,
        "gather at full k ({gather_full:.3} ms) exceeded 3x dense ({dense:.3} ms)"
    );
    println!(
        "trends: mask x{mask_ratio:.1} vs gather x{gather_ratio:.1} (hw 256 -> 1024); gather/dense at full k = {:.2}",
        gather_full / dense
    );
}
