use svco::autodiff::{Tape, Tensor};
use svco::gradcheck::{check_loss, check_model, check_op, LOSSES, OPS};
use svco::objectives::Objective;

const CONFIGS: u64 = 100;
const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_finite_differences() {
    for op in OPS {
        for seed in 0..CONFIGS {
            let err = check_op(op, seed).unwrap();
            assert!(err < TOL, "{op} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn every_loss_matches_finite_differences() {
    for loss in LOSSES {
        for seed in 0..CONFIGS {
            let err = check_loss(loss, 1000 + seed).unwrap();
            assert!(err < TOL, "{loss} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn model_end_to_end_matches_finite_differences() {
    let objectives = [
        Objective::Svco,
        Objective::Vco,
        Objective::Dpo,
        Objective::Viscon,
        Objective::Mdpo,
        Objective::Sft2,
    ];
    for seed in 0..CONFIGS + 2 {
        let objective = objectives[seed as usize % objectives.len()];
        let check = check_model(objective, 5000 + seed).unwrap();
        assert!(check.error < TOL, "{objective} seed {seed}: {:e}", check.error);
        assert_eq!(check.reference_grad_max, 0.0, "{objective} seed {seed}");
    }
}

#[test]
fn softplus_derivative_anchor() {
    // d/da of softplus(-(0.1a - 0.1b)) at a=1, b=-1 is -0.1·σ(-0.2).
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::scalar(1.0));
    let b = tape.leaf(Tensor::scalar(-1.0));
    let d = tape.sub(a, b).unwrap();
    let m = tape.scale(d, -0.1);
    let loss = tape.softplus(m);
    let g = tape.backward(loss).unwrap().wrt(a).item();
    let oracle = -0.1 / (1.0 + 0.2f64.exp());
    assert!((g - oracle).abs() < 1e-15);
    assert!((g + 0.045_016_600).abs() < 1e-8);
}
