mod common;

use common::{max_relative_error, Case, Op, FD_STEP, LAYER_OPS, OBJECTIVE_OPS};

const CASES: u64 = 30;

fn check_f64(op: Op) {
    for seed in 0..CASES {
        let case = Case::random(op, seed);
        assert!(case.num_params() <= 1000, "{op:?} case too large");
        let err = max_relative_error(&case.analytic::<f64>(), &case.numeric(FD_STEP), 1e-6);
        assert!(err < 1e-5, "{op:?} seed {seed}: relative error {err:e}");
    }
}

fn check_f32(op: Op) {
    for seed in 0..CASES {
        let case = Case::random(op, seed);
        let err = max_relative_error(&case.analytic::<f32>(), &case.numeric(FD_STEP), 1e-3);
        assert!(err < 1e-3, "{op:?} seed {seed}: f32 relative error {err:e}");
    }
}

#[test]
fn layer_gradients_match_central_differences() {
    for &op in LAYER_OPS {
        check_f64(op);
    }
}

#[test]
fn objective_gradients_match_central_differences() {
    for &op in OBJECTIVE_OPS {
        check_f64(op);
    }
}

#[test]
fn single_precision_gradients_are_close() {
    for &op in LAYER_OPS.iter().chain(OBJECTIVE_OPS) {
        check_f32(op);
    }
}

#[test]
fn annealed_gradient_is_bounded_at_the_kink() {
    use deft_core::objectives::kl_diag_gaussian;
    let mut case = Case::random(Op::AnnealedVae, 3);
    let (mu, lv) = (&case.params[0], &case.params[1]);
    let (b, d) = (mu.shape()[0], mu.shape()[1]);
    let kl: f64 = (0..b)
        .map(|i| kl_diag_gaussian(&mu.data()[i * d..(i + 1) * d], &lv.data()[i * d..(i + 1) * d]))
        .sum::<f64>()
        / b as f64;
    let gamma = case.scalars[0];
    for offset in [-1e-6, 0.0, 1e-6] {
        case.scalars[1] = kl + offset;
        let v = case.value(&case.params);
        assert!(v.is_finite());
        let g = case.analytic::<f64>();
        // |d penalty / d mu| <= gamma · |d KL / d mu|, and KL's gradient is bounded here.
        let bound = gamma * 10.0 + 100.0;
        assert!(g.iter().flatten().all(|x| x.is_finite() && x.abs() < bound));
    }
}
