mod common;

use batchless::data::{generate_spirals, Examples, SpiralParams};
use batchless::network::{build_spiral_mlp, ArchConfig, ForwardOptions, NormKind};
use common::{gradcheck, model_gradcheck, op_cases, FD_TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for (i, c) in op_cases().into_iter().enumerate() {
        let worst = gradcheck(&c.params, 100, i as u64, c.build);
        if !(worst <= FD_TOLERANCE) {
            failures.push(format!("{}: {worst:e}", c.name));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn spiral_mlp_matches_finite_differences() {
    let (train, _) = generate_spirals(20, 1, 4, &SpiralParams::default()).unwrap();
    let rows: Vec<usize> = (0..60).step_by(3).collect();
    let (x, y) = train.batch(&rows);
    // batch renormalization is excluded: its r and d are constants by
    // definition, so its gradient is not the derivative of its output
    for norm in [
        NormKind::None,
        NormKind::Bn,
        NormKind::Bin,
        NormKind::BinLog,
        NormKind::BinInv,
    ] {
        let mut model = build_spiral_mlp(&ArchConfig::spiral(norm, 21)).unwrap();
        let worst = model_gradcheck(&mut model, &x, &y, ForwardOptions::train(5), 100, 8);
        assert!(worst <= FD_TOLERANCE, "{norm}: {worst:e}");
    }
}
