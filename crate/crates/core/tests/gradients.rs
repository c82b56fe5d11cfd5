mod common;

use common::gradient_check;

#[test]
fn loss_gradients_match_central_differences() {
    for seed in 0..24 {
        let r = gradient_check(seed, 1e-6);
        assert!(r.params <= 1000, "{} parameters", r.params);
        assert!(r.rel_error < 1e-5, "seed {seed} ({}): relative error {:e}", r.objective, r.rel_error);
    }
}
