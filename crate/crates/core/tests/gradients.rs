mod common;

#[test]
fn adversarial_loss_gradients_match_central_differences() {
    for seed in [1, 2, 3] {
        let r = common::adversarial_gradcheck(seed, 8);
        assert!(
            r.passes(),
            "seed {seed}: worst group {:.2e}, params {:.2e} / kinked {:.2e} ({} of {}), x_t {:.2e}",
            r.worst_group,
            r.params.smooth_error(),
            r.params.kinked_error(),
            r.params.kinks(),
            r.params.total(),
            r.x_t.smooth_error()
        );
    }
}

#[test]
fn guidance_loss_gradient_matches_central_differences() {
    for seed in [1, 2, 3] {
        let s = common::guidance_gradcheck(seed);
        assert!(s.passes(), "seed {seed}: {:.2e}, {} kinks of {}", s.smooth_error(), s.kinks(), s.total());
    }
}
