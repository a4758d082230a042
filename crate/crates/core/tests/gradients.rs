use hintvqa::verify::{model_gradient_check, mutated_gradient_check, op_gradient_checks};

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..10 {
        for c in op_gradient_checks(seed).unwrap() {
            assert!(
                c.error <= 1e-4,
                "{} seed {}: {:.3e}",
                c.name,
                c.seed,
                c.error
            );
        }
    }
}

#[test]
fn end_to_end_matches_finite_differences() {
    for seed in 0..10 {
        let c = model_gradient_check(seed).unwrap();
        assert!(c.error <= 1e-3, "seed {seed}: {:.3e}", c.error);
    }
}

#[test]
fn wrong_gradient_is_flagged() {
    for seed in 0..3 {
        assert!(mutated_gradient_check(seed).unwrap() > 1e-2);
    }
}
